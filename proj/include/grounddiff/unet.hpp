#pragma once

// Dual-network architecture: a frozen text-conditioned base U-Net, a
// trainable clone of its encoder + middle blocks with gated self-attention
// inserted (the grounding branch), and zero-initialized 1x1 convolution
// bridges that add the branch's multi-scale taps into the base decoder.

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "grounddiff/conditioning.hpp"
#include "grounddiff/tensor.hpp"

namespace grounddiff {

struct UNetConfig {
    int image_size = 32;
    int in_channels = 3;
    std::vector<int> channels = {8, 16, 32};  // per level, top to bottom
    std::vector<int> attn_levels = {1, 2};    // level indices with attention blocks
    bool middle_attention = true;
    int res_blocks_per_level = 1;
    int time_dim = 32;
    int groups = 4;
    int context_dim = 64;  // width of caption context and grounding tokens

    int levels() const { return static_cast<int>(channels.size()); }
    bool has_attn(int level) const {
        for (int l : attn_levels)
            if (l == level) return true;
        return false;
    }
};

inline void validate_unet_config(const UNetConfig& cfg) {
    if (cfg.channels.empty()) throw ConfigError("unet: channels must be non-empty");
    const int down_factor = 1 << (cfg.levels() - 1);
    if (cfg.image_size % down_factor != 0)
        throw ConfigError("unet: image size " + std::to_string(cfg.image_size) +
                          " not divisible by 2^(levels-1) = " + std::to_string(down_factor));
    for (int c : cfg.channels)
        if (c % cfg.groups != 0)
            throw ConfigError("unet: channel count " + std::to_string(c) +
                              " not divisible by norm groups " + std::to_string(cfg.groups));
    for (int l : cfg.attn_levels)
        if (l < 0 || l >= cfg.levels()) throw ConfigError("unet: attention level out of range");
    if (cfg.res_blocks_per_level < 1) throw ConfigError("unet: need >= 1 res block per level");
}

template <class S>
using ParamList = std::vector<std::pair<std::string, Tensor<S>>>;

// Named parameter tensors split into the frozen set (base network + text
// encoder) and the trainable set (grounding branch, gates, fusion MLP, null
// tokens, zero convolutions). Name sets are disjoint and exhaustive.
template <class S>
struct ParameterPartition {
    ParamList<S> frozen;
    ParamList<S> trainable;

    void validate() const {
        std::vector<std::string> names;
        for (const auto& [n, t] : frozen) names.push_back(n);
        for (const auto& [n, t] : trainable) names.push_back(n);
        std::sort(names.begin(), names.end());
        for (size_t i = 1; i < names.size(); ++i)
            if (names[i] == names[i - 1])
                throw ConfigError("parameter partition: duplicate name " + names[i]);
        for (const auto& [n, t] : frozen)
            if (t.requires_grad())
                throw ConfigError("frozen tensor " + n + " must not require grad");
        for (const auto& [n, t] : trainable)
            if (!t.requires_grad())
                throw ConfigError("trainable tensor " + n + " must require grad");
    }

    int64_t frozen_numel() const {
        int64_t n = 0;
        for (const auto& [name, t] : frozen) n += t.numel();
        return n;
    }
    int64_t trainable_numel() const {
        int64_t n = 0;
        for (const auto& [name, t] : trainable) n += t.numel();
        return n;
    }
};

inline uint64_t fnv1a_bytes(const void* data, size_t len, uint64_t h = 1469598103934665603ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

// Casts every tensor of src into the name-aligned tensor of dst. Used to
// evaluate the same model at the same parameter point in both precisions.
template <class SD, class SS>
void copy_param_values(ParamList<SD>& dst, const ParamList<SS>& src) {
    if (dst.size() != src.size())
        throw ShapeError("copy_param_values: tensor count mismatch");
    for (size_t i = 0; i < dst.size(); ++i) {
        if (dst[i].first != src[i].first)
            throw ShapeError("copy_param_values: name mismatch " + dst[i].first + " vs " +
                             src[i].first);
        auto& d = dst[i].second.mutable_data();
        const auto& s = src[i].second.data();
        if (d.size() != s.size())
            throw ShapeError("copy_param_values: size mismatch for " + dst[i].first);
        for (size_t j = 0; j < d.size(); ++j) d[j] = static_cast<SD>(s[j]);
    }
}

template <class S>
std::vector<uint64_t> checksum_params(const ParamList<S>& params) {
    std::vector<uint64_t> sums;
    sums.reserve(params.size());
    for (const auto& [name, t] : params)
        sums.push_back(fnv1a_bytes(t.data().data(), t.data().size() * sizeof(S),
                                   fnv1a_bytes(name.data(), name.size())));
    return sums;
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

namespace nn {

template <class S>
Tensor<S> clone_tensor(const Tensor<S>& t, bool requires_grad) {
    return Tensor<S>::leaf(t.shape(), t.data(), requires_grad);
}

template <class S>
struct Linear {
    Tensor<S> w, b;

    static Linear init(int in, int out, Rng& rng, bool trainable) {
        Linear l;
        const S s = static_cast<S>(1.0 / std::sqrt(static_cast<double>(in)));
        l.w = Tensor<S>::randn({in, out}, rng, s, trainable);
        l.b = Tensor<S>::zeros({out}, trainable);
        return l;
    }

    Tensor<S> apply(const Tensor<S>& x) const { return add(matmul(x, w), b); }

    Linear clone(bool trainable) const { return {clone_tensor(w, trainable), clone_tensor(b, trainable)}; }

    void collect(const std::string& p, ParamList<S>& out) const {
        out.emplace_back(p + ".w", w);
        out.emplace_back(p + ".b", b);
    }
};

template <class S>
struct Conv {
    Tensor<S> w, b;
    int stride = 1, pad = 1;

    static Conv init(int cin, int cout, int k, int stride, int pad, Rng& rng, bool trainable) {
        Conv c;
        const S s = static_cast<S>(1.0 / std::sqrt(static_cast<double>(cin * k * k)));
        c.w = Tensor<S>::randn({cout, cin, k, k}, rng, s, trainable);
        c.b = Tensor<S>::zeros({cout}, trainable);
        c.stride = stride;
        c.pad = pad;
        return c;
    }

    static Conv zero_init(int cin, int cout, int k, bool trainable) {
        Conv c;
        c.w = Tensor<S>::zeros({cout, cin, k, k}, trainable);
        c.b = Tensor<S>::zeros({cout}, trainable);
        c.stride = 1;
        c.pad = 0;
        return c;
    }

    Tensor<S> apply(const Tensor<S>& x) const { return conv2d(x, w, b, stride, pad); }

    Conv clone(bool trainable) const {
        Conv c{clone_tensor(w, trainable), clone_tensor(b, trainable), stride, pad};
        return c;
    }

    void collect(const std::string& p, ParamList<S>& out) const {
        out.emplace_back(p + ".w", w);
        out.emplace_back(p + ".b", b);
    }
};

template <class S>
struct GroupNormP {
    Tensor<S> gamma, beta;
    int groups = 1;

    static GroupNormP init(int channels, int groups, bool trainable) {
        return {Tensor<S>::full({channels}, S(1), trainable), Tensor<S>::zeros({channels}, trainable),
                groups};
    }

    Tensor<S> apply(const Tensor<S>& x) const { return group_norm(x, groups, gamma, beta); }

    GroupNormP clone(bool trainable) const {
        return {clone_tensor(gamma, trainable), clone_tensor(beta, trainable), groups};
    }

    void collect(const std::string& p, ParamList<S>& out) const {
        out.emplace_back(p + ".g", gamma);
        out.emplace_back(p + ".b", beta);
    }
};

template <class S>
struct LayerNormP {
    Tensor<S> gamma, beta;

    static LayerNormP init(int dim, bool trainable) {
        return {Tensor<S>::full({dim}, S(1), trainable), Tensor<S>::zeros({dim}, trainable)};
    }

    Tensor<S> apply(const Tensor<S>& x) const { return layer_norm(x, gamma, beta); }

    LayerNormP clone(bool trainable) const {
        return {clone_tensor(gamma, trainable), clone_tensor(beta, trainable)};
    }

    void collect(const std::string& p, ParamList<S>& out) const {
        out.emplace_back(p + ".g", gamma);
        out.emplace_back(p + ".b", beta);
    }
};

template <class S>
struct SelfAttention {
    Linear<S> q, k, v, o;

    static SelfAttention init(int dim, Rng& rng, bool trainable) {
        return {Linear<S>::init(dim, dim, rng, trainable), Linear<S>::init(dim, dim, rng, trainable),
                Linear<S>::init(dim, dim, rng, trainable), Linear<S>::init(dim, dim, rng, trainable)};
    }

    Tensor<S> apply(const Tensor<S>& tokens) const {
        return o.apply(attention(q.apply(tokens), k.apply(tokens), v.apply(tokens)));
    }

    SelfAttention clone(bool trainable) const {
        return {q.clone(trainable), k.clone(trainable), v.clone(trainable), o.clone(trainable)};
    }

    void collect(const std::string& p, ParamList<S>& out) const {
        q.collect(p + ".q", out);
        k.collect(p + ".k", out);
        v.collect(p + ".v", out);
        o.collect(p + ".o", out);
    }
};

template <class S>
struct CrossAttention {
    Linear<S> q, k, v, o;  // q,o on the visual width, k,v map context -> visual width

    static CrossAttention init(int dim, int ctx_dim, Rng& rng, bool trainable) {
        return {Linear<S>::init(dim, dim, rng, trainable),
                Linear<S>::init(ctx_dim, dim, rng, trainable),
                Linear<S>::init(ctx_dim, dim, rng, trainable),
                Linear<S>::init(dim, dim, rng, trainable)};
    }

    Tensor<S> apply(const Tensor<S>& tokens, const Tensor<S>& ctx) const {
        return o.apply(attention(q.apply(tokens), k.apply(ctx), v.apply(ctx)));
    }

    CrossAttention clone(bool trainable) const {
        return {q.clone(trainable), k.clone(trainable), v.clone(trainable), o.clone(trainable)};
    }

    void collect(const std::string& p, ParamList<S>& out) const {
        q.collect(p + ".q", out);
        k.collect(p + ".k", out);
        v.collect(p + ".v", out);
        o.collect(p + ".o", out);
    }
};

}  // namespace nn

// ---------------------------------------------------------------------------
// Gated self-attention (Eq. 5 form): v <- v + tanh(gamma) * SA([v, o])
// ---------------------------------------------------------------------------

template <class S>
struct GatedSelfAttentionLayer {
    Tensor<S> gate;               // scalar gamma, zero-initialized: identity at init
    nn::Linear<S> entity_proj;    // context width -> visual width
    nn::SelfAttention<S> sa;      // joint self-attention projections

    static GatedSelfAttentionLayer init(int dim, int ctx_dim, Rng& rng) {
        GatedSelfAttentionLayer g;
        g.gate = Tensor<S>::zeros({1}, /*requires_grad=*/true);
        g.entity_proj = nn::Linear<S>::init(ctx_dim, dim, rng, true);
        g.sa = nn::SelfAttention<S>::init(dim, rng, true);
        return g;
    }

    void collect(const std::string& p, ParamList<S>& out) const {
        out.emplace_back(p + ".gate", gate);
        entity_proj.collect(p + ".proj", out);
        sa.collect(p + ".sa", out);
    }
};

// Joint self-attention over visual tokens and the real (masked-in) grounding
// tokens; only the first n_v outputs are kept, scaled by tanh(gamma) and
// added residually. Padded slots never reach the attention.
template <class S>
Tensor<S> gated_self_attention(const Tensor<S>& v, const GroundingTokens<S>& o,
                               const GatedSelfAttentionLayer<S>& layer) {
    if (v.shape().size() != 2 || v.shape()[1] != layer.sa.q.w.shape()[0])
        throw ShapeError("gated_self_attention: visual width " + shape_str(v.shape()) +
                         " does not match layer width " + shape_str(layer.sa.q.w.shape()));
    if (o.tokens.shape()[1] != layer.entity_proj.w.shape()[0])
        throw ShapeError("gated_self_attention: grounding width " + shape_str(o.tokens.shape()) +
                         " does not match projection " + shape_str(layer.entity_proj.w.shape()));
    const int64_t n_v = v.shape()[0];

    std::vector<Tensor<S>> parts = {v};
    for (size_t i = 0; i < o.mask.size(); ++i)
        if (o.mask[i])
            parts.push_back(layer.entity_proj.apply(slice_rows(o.tokens, static_cast<int64_t>(i), 1)));
    const auto joint = parts.size() > 1 ? concat_rows(parts) : v;

    auto sa_out = slice_rows(layer.sa.apply(joint), 0, n_v);
    return add(v, mul(sa_out, tanh_op(layer.gate)));
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

namespace nn {

template <class S>
struct ResBlock {
    GroupNormP<S> gn1, gn2;
    Conv<S> conv1, conv2;
    Linear<S> time_proj;
    std::optional<Conv<S>> skip;  // 1x1 when channel counts differ

    static ResBlock init(int cin, int cout, int time_dim, int groups, Rng& rng, bool trainable) {
        ResBlock r;
        r.gn1 = GroupNormP<S>::init(cin, groups, trainable);
        r.conv1 = Conv<S>::init(cin, cout, 3, 1, 1, rng, trainable);
        r.time_proj = Linear<S>::init(time_dim, cout, rng, trainable);
        r.gn2 = GroupNormP<S>::init(cout, groups, trainable);
        // the closing conv starts at zero so the block opens as an identity
        // (plus skip projection); the usual residual init for diffusion nets
        r.conv2 = Conv<S>::zero_init(cout, cout, 3, trainable);
        r.conv2.pad = 1;
        if (cin != cout) r.skip = Conv<S>::init(cin, cout, 1, 1, 0, rng, trainable);
        return r;
    }

    Tensor<S> forward(const Tensor<S>& x, const Tensor<S>& temb) const {
        auto h = conv1.apply(silu(gn1.apply(x)));
        auto tb = time_proj.apply(silu(temb));
        h = add_channel_bias(h, reshape(tb, {tb.numel()}));
        h = conv2.apply(silu(gn2.apply(h)));
        return add(h, skip ? skip->apply(x) : x);
    }

    ResBlock clone(bool trainable) const {
        ResBlock r;
        r.gn1 = gn1.clone(trainable);
        r.conv1 = conv1.clone(trainable);
        r.time_proj = time_proj.clone(trainable);
        r.gn2 = gn2.clone(trainable);
        r.conv2 = conv2.clone(trainable);
        if (skip) r.skip = skip->clone(trainable);
        return r;
    }

    void collect(const std::string& p, ParamList<S>& out) const {
        gn1.collect(p + ".gn1", out);
        conv1.collect(p + ".conv1", out);
        time_proj.collect(p + ".temb", out);
        gn2.collect(p + ".gn2", out);
        conv2.collect(p + ".conv2", out);
        if (skip) skip->collect(p + ".skip", out);
    }
};

// Self-attention + optional gated self-attention + cross-attention over the
// spatial tokens of one feature map. The gated layer sits between the
// self-attention and the cross-attention.
template <class S>
struct TransformerBlock {
    LayerNormP<S> ln1, ln2;
    SelfAttention<S> sa;
    std::optional<GatedSelfAttentionLayer<S>> gsa;
    CrossAttention<S> ca;

    static TransformerBlock init(int dim, int ctx_dim, Rng& rng, bool trainable) {
        TransformerBlock b;
        b.ln1 = LayerNormP<S>::init(dim, trainable);
        b.sa = SelfAttention<S>::init(dim, rng, trainable);
        b.ln2 = LayerNormP<S>::init(dim, trainable);
        b.ca = CrossAttention<S>::init(dim, ctx_dim, rng, trainable);
        return b;
    }

    Tensor<S> forward(const Tensor<S>& x_chw, const Tensor<S>& ctx,
                      const GroundingTokens<S>* g) const {
        const int64_t c = x_chw.shape()[0], h = x_chw.shape()[1], w = x_chw.shape()[2];
        auto tokens = transpose(reshape(x_chw, {c, h * w}));  // [HW, C]
        tokens = add(tokens, sa.apply(ln1.apply(tokens)));
        if (gsa) {
            if (!g) throw ShapeError("transformer block with gated attention needs grounding tokens");
            tokens = gated_self_attention(tokens, *g, *gsa);
        }
        tokens = add(tokens, ca.apply(ln2.apply(tokens), ctx));
        return reshape(transpose(tokens), {c, h, w});
    }

    // Clone of the frozen block plus a freshly initialized gated layer.
    TransformerBlock clone_with_gsa(int dim, int ctx_dim, Rng& rng) const {
        TransformerBlock b;
        b.ln1 = ln1.clone(true);
        b.sa = sa.clone(true);
        b.ln2 = ln2.clone(true);
        b.ca = ca.clone(true);
        b.gsa = GatedSelfAttentionLayer<S>::init(dim, ctx_dim, rng);
        return b;
    }

    void collect(const std::string& p, ParamList<S>& out) const {
        ln1.collect(p + ".ln1", out);
        sa.collect(p + ".sa", out);
        if (gsa) gsa->collect(p + ".gsa", out);
        ln2.collect(p + ".ln2", out);
        ca.collect(p + ".ca", out);
    }
};

}  // namespace nn

template <class S>
Tensor<S> sinusoidal_time_embedding(int t, int dim) {
    const int half = dim / 2;
    std::vector<S> e(static_cast<size_t>(dim), S(0));
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        e[static_cast<size_t>(i)] = static_cast<S>(std::sin(t * freq));
        e[static_cast<size_t>(half + i)] = static_cast<S>(std::cos(t * freq));
    }
    return Tensor<S>::leaf({1, dim}, std::move(e));
}

// ---------------------------------------------------------------------------
// Encoder + middle (shared structure between the base and the clone)
// ---------------------------------------------------------------------------

template <class S>
struct EncoderTaps {
    std::vector<Tensor<S>> levels;  // post-block activation per level
    Tensor<S> middle;
    Tensor<S> temb;
};

template <class S>
struct EncoderMiddle {
    UNetConfig cfg;
    nn::Linear<S> time1, time2;
    nn::Conv<S> stem;
    std::vector<std::vector<nn::ResBlock<S>>> level_res;
    std::vector<std::optional<nn::TransformerBlock<S>>> level_attn;
    std::vector<nn::Conv<S>> downs;
    nn::ResBlock<S> mid_res1, mid_res2;
    std::optional<nn::TransformerBlock<S>> mid_attn;

    static EncoderMiddle init(const UNetConfig& cfg, Rng& rng, bool trainable) {
        EncoderMiddle e;
        e.cfg = cfg;
        e.time1 = nn::Linear<S>::init(cfg.time_dim, cfg.time_dim, rng, trainable);
        e.time2 = nn::Linear<S>::init(cfg.time_dim, cfg.time_dim, rng, trainable);
        e.stem = nn::Conv<S>::init(cfg.in_channels, cfg.channels[0], 3, 1, 1, rng, trainable);
        for (int l = 0; l < cfg.levels(); ++l) {
            std::vector<nn::ResBlock<S>> blocks;
            for (int r = 0; r < cfg.res_blocks_per_level; ++r)
                blocks.push_back(nn::ResBlock<S>::init(cfg.channels[l], cfg.channels[l],
                                                       cfg.time_dim, cfg.groups, rng, trainable));
            e.level_res.push_back(std::move(blocks));
            if (cfg.has_attn(l))
                e.level_attn.push_back(nn::TransformerBlock<S>::init(cfg.channels[l],
                                                                     cfg.context_dim, rng,
                                                                     trainable));
            else
                e.level_attn.push_back(std::nullopt);
            if (l + 1 < cfg.levels())
                e.downs.push_back(
                    nn::Conv<S>::init(cfg.channels[l], cfg.channels[l + 1], 3, 2, 1, rng, trainable));
        }
        const int cm = cfg.channels.back();
        e.mid_res1 = nn::ResBlock<S>::init(cm, cm, cfg.time_dim, cfg.groups, rng, trainable);
        if (cfg.middle_attention)
            e.mid_attn = nn::TransformerBlock<S>::init(cm, cfg.context_dim, rng, trainable);
        e.mid_res2 = nn::ResBlock<S>::init(cm, cm, cfg.time_dim, cfg.groups, rng, trainable);
        return e;
    }

    // Trainable deep copy with a gated self-attention layer inserted into
    // every attention block.
    EncoderMiddle clone_with_gsa(Rng& rng) const {
        EncoderMiddle e;
        e.cfg = cfg;
        e.time1 = time1.clone(true);
        e.time2 = time2.clone(true);
        e.stem = stem.clone(true);
        for (int l = 0; l < cfg.levels(); ++l) {
            std::vector<nn::ResBlock<S>> blocks;
            for (const auto& b : level_res[l]) blocks.push_back(b.clone(true));
            e.level_res.push_back(std::move(blocks));
            if (level_attn[l])
                e.level_attn.push_back(
                    level_attn[l]->clone_with_gsa(cfg.channels[l], cfg.context_dim, rng));
            else
                e.level_attn.push_back(std::nullopt);
        }
        for (const auto& d : downs) e.downs.push_back(d.clone(true));
        e.mid_res1 = mid_res1.clone(true);
        if (mid_attn) e.mid_attn = mid_attn->clone_with_gsa(cfg.channels.back(), cfg.context_dim, rng);
        e.mid_res2 = mid_res2.clone(true);
        return e;
    }

    EncoderTaps<S> forward(const Tensor<S>& z, int t, const Tensor<S>& ctx,
                           const GroundingTokens<S>* g) const {
        if (z.shape() != Shape{cfg.in_channels, cfg.image_size, cfg.image_size})
            throw ShapeError("unet: latent shape " + shape_str(z.shape()) + " does not match config [" +
                             std::to_string(cfg.in_channels) + "," + std::to_string(cfg.image_size) +
                             "," + std::to_string(cfg.image_size) + "]");
        if (t < 0) throw ShapeError("unet: negative timestep");
        EncoderTaps<S> taps;
        auto temb = time2.apply(silu(time1.apply(sinusoidal_time_embedding<S>(t, cfg.time_dim))));
        taps.temb = temb;
        auto h = stem.apply(z);
        for (int l = 0; l < cfg.levels(); ++l) {
            for (const auto& b : level_res[l]) h = b.forward(h, temb);
            if (level_attn[l]) h = level_attn[l]->forward(h, ctx, g);
            taps.levels.push_back(h);
            if (l + 1 < cfg.levels()) h = downs[l].apply(h);
        }
        h = mid_res1.forward(h, temb);
        if (mid_attn) h = mid_attn->forward(h, ctx, g);
        h = mid_res2.forward(h, temb);
        taps.middle = h;
        return taps;
    }

    void collect(const std::string& p, ParamList<S>& out) const {
        time1.collect(p + ".time1", out);
        time2.collect(p + ".time2", out);
        stem.collect(p + ".stem", out);
        for (int l = 0; l < cfg.levels(); ++l) {
            for (size_t r = 0; r < level_res[l].size(); ++r)
                level_res[l][r].collect(p + ".enc.l" + std::to_string(l) + ".res" + std::to_string(r),
                                        out);
            if (level_attn[l]) level_attn[l]->collect(p + ".enc.l" + std::to_string(l) + ".attn", out);
            if (l + 1 < cfg.levels())
                downs[l].collect(p + ".enc.down" + std::to_string(l), out);
        }
        mid_res1.collect(p + ".mid.res1", out);
        if (mid_attn) mid_attn->collect(p + ".mid.attn", out);
        mid_res2.collect(p + ".mid.res2", out);
    }
};

// ---------------------------------------------------------------------------
// Base decoder and full base network
// ---------------------------------------------------------------------------

template <class S>
struct Decoder {
    UNetConfig cfg;
    std::vector<nn::ResBlock<S>> level_res;  // first block per level takes the skip concat
    std::vector<std::optional<nn::TransformerBlock<S>>> level_attn;
    std::vector<nn::Conv<S>> ups;  // ups[l]: channels[l] -> channels[l-1]
    nn::GroupNormP<S> out_gn;
    nn::Conv<S> out_conv;

    static Decoder init(const UNetConfig& cfg, Rng& rng, bool trainable) {
        Decoder d;
        d.cfg = cfg;
        for (int l = 0; l < cfg.levels(); ++l) {
            d.level_res.push_back(nn::ResBlock<S>::init(2 * cfg.channels[l], cfg.channels[l],
                                                        cfg.time_dim, cfg.groups, rng, trainable));
            if (cfg.has_attn(l))
                d.level_attn.push_back(
                    nn::TransformerBlock<S>::init(cfg.channels[l], cfg.context_dim, rng, trainable));
            else
                d.level_attn.push_back(std::nullopt);
            if (l > 0)
                d.ups.push_back(
                    nn::Conv<S>::init(cfg.channels[l], cfg.channels[l - 1], 3, 1, 1, rng, trainable));
            else
                d.ups.push_back(nn::Conv<S>());  // unused slot keeps indices aligned
        }
        d.out_gn = nn::GroupNormP<S>::init(cfg.channels[0], cfg.groups, trainable);
        d.out_conv = nn::Conv<S>::init(cfg.channels[0], cfg.in_channels, 3, 1, 1, rng, trainable);
        return d;
    }

    // skips[l] must already include any bridged control taps.
    Tensor<S> forward(const EncoderTaps<S>& enc, const std::vector<Tensor<S>>& skips,
                      const Tensor<S>& middle, const Tensor<S>& ctx) const {
        auto h = middle;
        for (int l = cfg.levels() - 1; l >= 0; --l) {
            const auto& s = skips[static_cast<size_t>(l)];
            const int64_t c = h.shape()[0], hh = h.shape()[1], ww = h.shape()[2];
            auto joined = reshape(concat_rows<S>({reshape(h, {c, hh * ww}),
                                                  reshape(s, {s.shape()[0], hh * ww})}),
                                  {c + s.shape()[0], hh, ww});
            h = level_res[static_cast<size_t>(l)].forward(joined, enc.temb);
            if (level_attn[static_cast<size_t>(l)])
                h = level_attn[static_cast<size_t>(l)]->forward(h, ctx, nullptr);
            if (l > 0) h = ups[static_cast<size_t>(l)].apply(upsample2x(h));
        }
        return out_conv.apply(silu(out_gn.apply(h)));
    }

    void collect(const std::string& p, ParamList<S>& out) const {
        for (int l = 0; l < cfg.levels(); ++l) {
            level_res[static_cast<size_t>(l)].collect(p + ".dec.l" + std::to_string(l) + ".res", out);
            if (level_attn[static_cast<size_t>(l)])
                level_attn[static_cast<size_t>(l)]->collect(p + ".dec.l" + std::to_string(l) + ".attn",
                                                            out);
            if (l > 0) ups[static_cast<size_t>(l)].collect(p + ".dec.up" + std::to_string(l), out);
        }
        out_gn.collect(p + ".out.gn", out);
        out_conv.collect(p + ".out.conv", out);
    }
};

// One zero-initialized 1x1 convolution per control tap. Every bridge output
// is exactly zero at initialization for any input, which makes the combined
// forward coincide with the base forward.
template <class S>
struct ZeroConvBridge {
    std::vector<nn::Conv<S>> levels;
    nn::Conv<S> middle;

    static ZeroConvBridge init(const UNetConfig& cfg) {
        ZeroConvBridge z;
        for (int l = 0; l < cfg.levels(); ++l)
            z.levels.push_back(nn::Conv<S>::zero_init(cfg.channels[l], cfg.channels[l], 1, true));
        z.middle = nn::Conv<S>::zero_init(cfg.channels.back(), cfg.channels.back(), 1, true);
        return z;
    }

    void collect(const std::string& p, ParamList<S>& out) const {
        for (size_t l = 0; l < levels.size(); ++l)
            levels[l].collect(p + ".l" + std::to_string(l), out);
        middle.collect(p + ".mid", out);
    }
};

// ---------------------------------------------------------------------------
// Full grounded model
// ---------------------------------------------------------------------------

struct ModelConfig {
    UNetConfig unet;
    ConditioningConfig cond;
};

inline void validate_model_config(const ModelConfig& cfg) {
    validate_unet_config(cfg.unet);
    if (cfg.unet.context_dim != cfg.cond.context_dim)
        throw ConfigError("model: unet context width " + std::to_string(cfg.unet.context_dim) +
                          " != grounding token width " + std::to_string(cfg.cond.context_dim));
    if (cfg.cond.text_dim != cfg.cond.context_dim)
        throw ConfigError("model: caption embedding width must equal context width in this artifact");
}

template <class S>
class GroundedModel {
public:
    GroundedModel(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
        validate_model_config(cfg);
        Rng base_rng(mix_seed(seed, 0xba5e));
        base_enc_ = EncoderMiddle<S>::init(cfg.unet, base_rng, /*trainable=*/false);
        base_dec_ = Decoder<S>::init(cfg.unet, base_rng, /*trainable=*/false);
        calibrate_head_gain(mix_seed(seed, 0xca1b));
        Rng gsa_rng(mix_seed(seed, 0x65a1));
        ground_ = base_enc_.clone_with_gsa(gsa_rng);
        bridge_ = ZeroConvBridge<S>::init(cfg.unet);
        cond_ = Conditioner<S>(cfg.cond, mix_seed(seed, 0xc0de));
    }

    const ModelConfig& config() const { return cfg_; }
    Conditioner<S>& conditioner() { return cond_; }
    const Conditioner<S>& conditioner() const { return cond_; }
    EncoderMiddle<S>& ground_net() { return ground_; }
    ZeroConvBridge<S>& bridge() { return bridge_; }

    // Frozen text-to-image branch: f_theta(z_t, t, c).
    Tensor<S> forward_base(const Tensor<S>& z, int t, const Tensor<S>& ctx) const {
        auto enc = base_enc_.forward(z, t, ctx, nullptr);
        return base_dec_.forward(enc, enc.levels, enc.middle, ctx);
    }

    // Combined prediction: base forward plus zero-conv-bridged control taps
    // added to the matching decoder skip connections and the middle output.
    Tensor<S> forward_combined(const Tensor<S>& z, int t, const Tensor<S>& ctx,
                               const GroundingTokens<S>& g) const {
        auto enc = base_enc_.forward(z, t, ctx, nullptr);
        auto control = ground_.forward(z, t, ctx, &g);
        std::vector<Tensor<S>> skips;
        for (int l = 0; l < cfg_.unet.levels(); ++l)
            skips.push_back(add(enc.levels[static_cast<size_t>(l)],
                                bridge_.levels[static_cast<size_t>(l)].apply(
                                    control.levels[static_cast<size_t>(l)])));
        auto middle = add(enc.middle, bridge_.middle.apply(control.middle));
        return base_dec_.forward(enc, skips, middle, ctx);
    }

    // Convenience wrapper resolving the layout to caption context and
    // grounding tokens first.
    Tensor<S> predict(const Tensor<S>& z, int t, const ConditionLayout& layout) const {
        auto ctx = cond_.encode_caption(layout);
        auto tokens = cond_.fuse_tokens(layout);
        return forward_combined(z, t, ctx, tokens);
    }

    ParameterPartition<S> partition() const {
        ParameterPartition<S> p;
        base_enc_.collect("base", p.frozen);
        base_dec_.collect("base", p.frozen);
        p.frozen.emplace_back("text_encoder.table", cond_.frozen_table());
        ground_.collect("ground", p.trainable);
        bridge_.collect("bridge", p.trainable);
        cond_.collect_params("cond", p.trainable);
        p.validate();
        return p;
    }

    // Per-prefix trainable element counts, used by the parameter audit.
    int64_t numel_with_prefix(const std::string& prefix) const {
        auto part = partition();
        int64_t n = 0;
        for (const auto& [name, t] : part.trainable)
            if (name.rfind(prefix, 0) == 0) n += t.numel();
        for (const auto& [name, t] : part.frozen)
            if (name.rfind(prefix, 0) == 0) n += t.numel();
        return n;
    }

private:
    // The epsilon head sits behind a frozen GroupNorm, which pins the
    // pre-head feature scale; with random frozen weights the output gain
    // is an accident of initialization and can cap the achievable
    // prediction norm. One probe forward rescales the head so unit-normal
    // latents map to unit-rms predictions. Deterministic given the seed.
    void calibrate_head_gain(uint64_t seed) {
        Rng rng(seed);
        auto z = Tensor<S>::randn(
            {cfg_.unet.in_channels, cfg_.unet.image_size, cfg_.unet.image_size}, rng);
        auto ctx = Tensor<S>::randn({4, cfg_.unet.context_dim}, rng, S(0.2));
        auto out = forward_base(z, 17, ctx);
        double ms = 0;
        for (const S v : out.data()) ms += static_cast<double>(v) * v;
        const double rms = std::sqrt(ms / static_cast<double>(out.numel()));
        const S gain = static_cast<S>(1.0 / std::max(rms, 1e-6));
        for (auto& w : base_dec_.out_conv.w.mutable_data()) w *= gain;
    }

    ModelConfig cfg_;
    EncoderMiddle<S> base_enc_;
    Decoder<S> base_dec_;
    EncoderMiddle<S> ground_;
    ZeroConvBridge<S> bridge_;
    Conditioner<S> cond_;
};

}  // namespace grounddiff
