#pragma once

// Grounding-token construction: Fourier box embedding, hashed toy text
// encoder, fusion MLP, null-token padding and condition dropout.

#include <cctype>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "grounddiff/layout.hpp"
#include "grounddiff/rng.hpp"
#include "grounddiff/tensor.hpp"

namespace grounddiff {

// Frequencies are the geometric ladder f_i = 2^i, i in [0, M).
struct FourierConfig {
    int num_frequencies = 8;

    int output_dim() const { return 4 * 2 * num_frequencies; }
};

// Parameter-free periodic embedding of a normalized box. Layout is
// [F_0(b), ..., F_{M-1}(b)] with F_i interleaved as
// (x1,y1,x2,y2) x (sin,cos); every entry lies in [-1,1].
template <class S>
Tensor<S> fourier_embed(const Box& box, const FourierConfig& cfg) {
    validate_normalized_box(box);
    std::vector<S> out;
    out.reserve(static_cast<size_t>(cfg.output_dim()));
    const double coords[4] = {box.x1, box.y1, box.x2, box.y2};
    double freq = 1.0;
    for (int i = 0; i < cfg.num_frequencies; ++i) {
        for (double c : coords) {
            out.push_back(static_cast<S>(std::sin(freq * c)));
            out.push_back(static_cast<S>(std::cos(freq * c)));
        }
        freq *= 2.0;
    }
    return Tensor<S>::leaf({cfg.output_dim()}, std::move(out));
}

inline std::vector<std::string> tokenize_words(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (char ch : text) {
        const unsigned char u = static_cast<unsigned char>(ch);
        if (std::isalnum(u)) {
            cur.push_back(static_cast<char>(std::tolower(u)));
        } else if (!cur.empty()) {
            words.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) words.push_back(cur);
    return words;
}

inline uint64_t hash_token(const std::string& token, uint64_t seed) {
    uint64_t h = 1469598103934665603ULL ^ (seed * 1099511628211ULL);
    for (char c : token) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ULL;
    }
    return h;
}

// Hashed bag-of-words text embedding: each token indexes a frozen random
// table, the text vector is the token mean. A frozen stand-in for a real
// pretrained text encoder; deterministic by construction.
template <class S>
class TextEncoderToy {
public:
    TextEncoderToy() = default;

    TextEncoderToy(int vocab_size, int embed_dim, uint64_t seed)
        : vocab_size_(vocab_size), embed_dim_(embed_dim), seed_(seed) {
        Rng rng(mix_seed(seed, 0x7e87));
        const S s = static_cast<S>(1.0 / std::sqrt(static_cast<double>(embed_dim)));
        table_ = Tensor<S>::randn({vocab_size, embed_dim}, rng, s, /*requires_grad=*/false);
    }

    // Null (empty or whitespace-only text) is signalled to the caller, which
    // substitutes its learned null-text token.
    std::optional<std::vector<S>> embed(const std::string& text) const {
        const auto words = tokenize_words(text);
        if (words.empty()) return std::nullopt;
        std::vector<S> acc(static_cast<size_t>(embed_dim_), S(0));
        for (const auto& w : words) {
            const int64_t idx =
                static_cast<int64_t>(hash_token(w, seed_) % static_cast<uint64_t>(vocab_size_));
            const S* row = table_.data().data() + idx * embed_dim_;
            for (int i = 0; i < embed_dim_; ++i) acc[i] += row[i];
        }
        const S inv = S(1) / static_cast<S>(words.size());
        for (auto& v : acc) v *= inv;
        return acc;
    }

    int embed_dim() const { return embed_dim_; }
    Tensor<S>& table() { return table_; }
    const Tensor<S>& table() const { return table_; }

private:
    int vocab_size_ = 0;
    int embed_dim_ = 0;
    uint64_t seed_ = 0;
    Tensor<S> table_;
};

// Fused per-entity control vectors plus a validity mask; slots with
// mask false hold the learned null token and are excluded from attention.
template <class S>
struct GroundingTokens {
    Tensor<S> tokens;        // [N, d_ctx]
    std::vector<char> mask;  // 1 = real entity

    int real_count() const {
        int n = 0;
        for (char m : mask) n += m;
        return n;
    }
};

struct ConditioningConfig {
    int vocab_size = 4096;
    int text_dim = 64;       // d_t
    int fuse_hidden = 96;
    int context_dim = 64;    // d_ctx, grounding token width
    int max_entities = 8;    // N
    FourierConfig fourier;
};

// Text encoder (frozen), fusion MLP and null tokens (trainable).
template <class S>
class Conditioner {
public:
    Conditioner() = default;

    Conditioner(const ConditioningConfig& cfg, uint64_t seed)
        : cfg_(cfg), encoder_(cfg.vocab_size, cfg.text_dim, mix_seed(seed, 0x1e57)) {
        Rng rng(mix_seed(seed, 0xf05e));
        const int in = cfg.text_dim + cfg.fourier.output_dim();
        const int h = cfg.fuse_hidden;
        const int out = cfg.context_dim;
        auto winit = [&](int rows, int cols) {
            const S s = static_cast<S>(1.0 / std::sqrt(static_cast<double>(rows)));
            return Tensor<S>::randn({rows, cols}, rng, s, /*requires_grad=*/true);
        };
        w1_ = winit(in, h);
        b1_ = Tensor<S>::zeros({h}, true);
        w2_ = winit(h, h);
        b2_ = Tensor<S>::zeros({h}, true);
        w3_ = winit(h, out);
        b3_ = Tensor<S>::zeros({out}, true);
        null_text_ = Tensor<S>::zeros({cfg.text_dim}, true);
        null_entity_ = Tensor<S>::zeros({cfg.context_dim}, true);
    }

    const ConditioningConfig& config() const { return cfg_; }

    // Whole-text mean embedding as a [1, d_t] row; empty or dropped text
    // resolves to the learned null-text token so gradients reach it.
    Tensor<S> encode_text(const std::string& text) const {
        auto emb = encoder_.embed(text);
        if (!emb) return reshape(null_text_, {1, cfg_.text_dim});
        return Tensor<S>::leaf({1, cfg_.text_dim}, std::move(*emb));
    }

    // Caption context for cross-attention: one token per word (capped), so
    // attention over the caption is content-dependent. Dropped or empty
    // captions collapse to the single null-text token.
    Tensor<S> encode_caption(const ConditionLayout& layout) const {
        if (layout.caption_dropped) return reshape(null_text_, {1, cfg_.text_dim});
        auto words = tokenize_words(layout.caption);
        if (words.empty()) return reshape(null_text_, {1, cfg_.text_dim});
        if (static_cast<int>(words.size()) > kMaxCaptionTokens)
            words.resize(static_cast<size_t>(kMaxCaptionTokens));
        std::vector<S> rows;
        rows.reserve(words.size() * static_cast<size_t>(cfg_.text_dim));
        for (const auto& w : words) {
            auto emb = encoder_.embed(w);
            rows.insert(rows.end(), emb->begin(), emb->end());
        }
        return Tensor<S>::leaf({static_cast<int64_t>(words.size()), cfg_.text_dim},
                               std::move(rows));
    }

    static constexpr int kMaxCaptionTokens = 16;

    // o_i = MLP(concat(E_text(e_i), F(b_i))) for every real entity; padded
    // slots (and all slots when entities are dropped) hold the null token.
    GroundingTokens<S> fuse_tokens(const ConditionLayout& layout) const {
        const int n_slots = cfg_.max_entities;
        if (static_cast<int>(layout.entities.size()) > n_slots)
            throw ShapeError("fuse_tokens: " + std::to_string(layout.entities.size()) +
                             " entities exceed the slot limit N=" + std::to_string(n_slots) +
                             "; caller must pre-truncate");

        GroundingTokens<S> out;
        out.mask.assign(static_cast<size_t>(n_slots), 0);

        std::vector<Tensor<S>> rows;
        rows.reserve(static_cast<size_t>(n_slots));
        const auto null_row = reshape(null_entity_, {1, cfg_.context_dim});
        const int n_real = layout.entities_dropped ? 0 : static_cast<int>(layout.entities.size());
        for (int i = 0; i < n_slots; ++i) {
            if (i < n_real) {
                const auto& e = layout.entities[static_cast<size_t>(i)];
                validate_entity(e);
                auto text = encode_text(e.text);
                auto pos = reshape(fourier_embed<S>(e.box, cfg_.fourier),
                                   {1, cfg_.fourier.output_dim()});
                auto feat = concat_cols(text, pos);
                rows.push_back(mlp(feat));
                out.mask[static_cast<size_t>(i)] = 1;
            } else {
                rows.push_back(null_row);
            }
        }
        out.tokens = concat_rows(rows);
        return out;
    }

    void collect_params(const std::string& prefix,
                        std::vector<std::pair<std::string, Tensor<S>>>& out) const {
        out.emplace_back(prefix + ".fuse.w1", w1_);
        out.emplace_back(prefix + ".fuse.b1", b1_);
        out.emplace_back(prefix + ".fuse.w2", w2_);
        out.emplace_back(prefix + ".fuse.b2", b2_);
        out.emplace_back(prefix + ".fuse.w3", w3_);
        out.emplace_back(prefix + ".fuse.b3", b3_);
        out.emplace_back(prefix + ".null_text", null_text_);
        out.emplace_back(prefix + ".null_entity", null_entity_);
    }

    const Tensor<S>& frozen_table() const { return encoder_.table(); }
    const Tensor<S>& null_text() const { return null_text_; }
    const Tensor<S>& null_entity() const { return null_entity_; }
    const TextEncoderToy<S>& encoder() const { return encoder_; }

private:
    static Tensor<S> concat_cols(const Tensor<S>& a, const Tensor<S>& b) {
        // [1,p] ++ [1,q] -> [1,p+q] via row concat on transposed views.
        auto joined = concat_rows<S>({reshape(a, {a.numel(), 1}), reshape(b, {b.numel(), 1})});
        return reshape(joined, {1, a.numel() + b.numel()});
    }

    Tensor<S> mlp(const Tensor<S>& x) const {
        auto h1 = silu(add(matmul(x, w1_), b1_));
        auto h2 = silu(add(matmul(h1, w2_), b2_));
        return add(matmul(h2, w3_), b3_);
    }

    ConditioningConfig cfg_;
    TextEncoderToy<S> encoder_;
    Tensor<S> w1_, b1_, w2_, b2_, w3_, b3_;
    Tensor<S> null_text_;
    Tensor<S> null_entity_;
};

// Training-time condition dropout: two independent Bernoulli draws, caption
// first, then entities.
inline ConditionLayout drop_conditions(const ConditionLayout& layout, double p_caption,
                                       double p_entities, Rng& rng) {
    ConditionLayout out = layout;
    out.caption_dropped = layout.caption_dropped || rng.bernoulli(p_caption);
    out.entities_dropped = layout.entities_dropped || rng.bernoulli(p_entities);
    return out;
}

}  // namespace grounddiff
