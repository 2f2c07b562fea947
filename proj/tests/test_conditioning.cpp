#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "grounddiff/conditioning.hpp"

using namespace grounddiff;

namespace {

ConditioningConfig toy_config() {
    ConditioningConfig cfg;
    cfg.vocab_size = 4096;
    cfg.text_dim = 64;
    cfg.fuse_hidden = 96;
    cfg.context_dim = 64;
    cfg.max_entities = 4;
    cfg.fourier.num_frequencies = 8;
    return cfg;
}

std::string random_word(Rng& rng) {
    const int len = 3 + static_cast<int>(rng.below(6));
    std::string w;
    for (int i = 0; i < len; ++i) w.push_back(static_cast<char>('a' + rng.below(26)));
    return w;
}

}  // namespace

TEST_CASE("fourier_embed layout and values") {
    SUBCASE("M=8 gives a 64-dim embedding in [-1,1]") {
        FourierConfig cfg;
        auto e = fourier_embed<double>({0.1, 0.2, 0.7, 0.9}, cfg);
        CHECK(e.numel() == 64);
        for (double v : e.data()) {
            CHECK(v >= -1.0);
            CHECK(v <= 1.0);
        }
    }

    SUBCASE("zero coordinates give sin 0 / cos 1") {
        FourierConfig cfg;
        cfg.num_frequencies = 3;
        auto e = fourier_embed<double>({0.0, 0.0, 1e-9, 1e-9}, cfg);
        for (int i = 0; i < 3; ++i) {
            const double* f = e.data().data() + i * 8;
            CHECK(f[0] == 0.0);                         // sin(f_i * x1), x1 = 0
            CHECK(f[1] == 1.0);                         // cos(f_i * x1)
            CHECK(f[2] == 0.0);                         // y1 = 0
            CHECK(f[3] == 1.0);
            CHECK(f[4] == doctest::Approx(0.0).epsilon(1e-6));  // x2 -> 0 limit
            CHECK(f[5] == doctest::Approx(1.0));
            CHECK(f[6] == doctest::Approx(0.0).epsilon(1e-6));
            CHECK(f[7] == doctest::Approx(1.0));
        }
    }

    SUBCASE("M=1 frozen values") {
        FourierConfig cfg;
        cfg.num_frequencies = 1;
        auto e = fourier_embed<double>({0.25, 0.0, 0.5, 1.0}, cfg);
        const std::vector<double> expect = {0.2474039593, 0.9689124217, 0.0, 1.0,
                                            0.4794255386, 0.8775825619, 0.8414709848,
                                            0.5403023059};
        REQUIRE(e.numel() == 8);
        for (int i = 0; i < 8; ++i) CHECK(e.data()[i] == doctest::Approx(expect[i]).epsilon(1e-9));
    }

    SUBCASE("invalid box rejected") {
        FourierConfig cfg;
        CHECK_THROWS_AS(fourier_embed<double>({0.5, 0.0, 0.4, 1.0}, cfg), ConfigError);
        CHECK_THROWS_AS(fourier_embed<double>({-0.1, 0.0, 0.4, 1.0}, cfg), ConfigError);
    }

    SUBCASE("range property over random boxes") {
        Rng rng(9);
        FourierConfig cfg;
        for (int trial = 0; trial < 50; ++trial) {
            const double x1 = rng.uniform(0.0, 0.9), y1 = rng.uniform(0.0, 0.9);
            Box b{x1, y1, x1 + rng.uniform(0.01, 1.0 - x1), y1 + rng.uniform(0.01, 1.0 - y1)};
            auto e = fourier_embed<float>(b, cfg);
            for (float v : e.data()) {
                CHECK(v >= -1.0f);
                CHECK(v <= 1.0f);
            }
        }
    }
}

TEST_CASE("toy text encoder") {
    TextEncoderToy<float> enc(4096, 64, 1234);

    SUBCASE("deterministic") {
        auto a = enc.embed("a shiny red sports car");
        auto b = enc.embed("a shiny red sports car");
        REQUIRE(a.has_value());
        CHECK(*a == *b);
    }

    SUBCASE("tokenization is case and punctuation insensitive") {
        CHECK(*enc.embed("Red Circle!") == *enc.embed("red circle"));
    }

    SUBCASE("empty and whitespace strings signal null") {
        CHECK(!enc.embed("").has_value());
        CHECK(!enc.embed("   \t ").has_value());
    }

    SUBCASE("distinct strings rarely collide") {
        Rng rng(77);
        int collisions = 0;
        for (int i = 0; i < 1000; ++i) {
            const std::string w1 = random_word(rng);
            const std::string w2 = random_word(rng);
            if (w1 == w2) continue;
            const auto e1 = *enc.embed(w1);
            const auto e2 = *enc.embed(w2);
            if (e1 == e2) ++collisions;
        }
        CHECK(collisions < 10);  // < 1% of 1000 pairs
    }
}

TEST_CASE("encode_text null path uses the learned null-text token") {
    Conditioner<float> cond(toy_config(), 42);
    auto v = cond.encode_text("");
    // zero-initialized null token
    for (float x : v.data()) CHECK(x == 0.0f);
    // gradient reaches the null token through the returned view
    auto probe = sum_all(v);
    auto g = backward(probe);
    CHECK(g.find(cond.null_text()) != nullptr);
}

TEST_CASE("fuse_tokens shapes") {
    SUBCASE("paper-parity widths: 832 -> 515 -> 768, output (N, 768)") {
        ConditioningConfig cfg;
        cfg.vocab_size = 512;
        cfg.text_dim = 768;
        cfg.fuse_hidden = 515;
        cfg.context_dim = 768;
        cfg.max_entities = 6;
        cfg.fourier.num_frequencies = 8;
        Conditioner<float> cond(cfg, 7);

        std::vector<std::pair<std::string, Tensor<float>>> params;
        cond.collect_params("cond", params);
        auto shape_of = [&](const std::string& name) -> Shape {
            for (auto& [n, t] : params)
                if (n == name) return t.shape();
            return {};
        };
        CHECK(cfg.text_dim + cfg.fourier.output_dim() == 832);
        CHECK(shape_of("cond.fuse.w1") == Shape{832, 515});
        CHECK(shape_of("cond.fuse.w2") == Shape{515, 515});
        CHECK(shape_of("cond.fuse.w3") == Shape{515, 768});

        ConditionLayout layout;
        layout.caption = "a cat on a mat";
        layout.entities = {{"cat", {0.1, 0.1, 0.5, 0.6}}, {"mat", {0.0, 0.5, 1.0, 1.0}}};
        auto tokens = cond.fuse_tokens(layout);
        CHECK(tokens.tokens.shape() == Shape{6, 768});
        CHECK(tokens.real_count() == 2);
    }

    SUBCASE("toy config output is (N, d_ctx) regardless of entity count") {
        Conditioner<float> cond(toy_config(), 7);
        for (int k = 0; k <= 4; ++k) {
            ConditionLayout layout;
            layout.caption = "scene";
            for (int i = 0; i < k; ++i)
                layout.entities.push_back({"red circle", {0.1, 0.1, 0.4, 0.4}});
            auto tokens = cond.fuse_tokens(layout);
            CHECK(tokens.tokens.shape() == Shape{4, 64});
            CHECK(tokens.real_count() == k);
        }
    }

    SUBCASE("too many entities is an error") {
        Conditioner<float> cond(toy_config(), 7);
        ConditionLayout layout;
        layout.caption = "x";
        for (int i = 0; i < 5; ++i)
            layout.entities.push_back({"blue square", {0.1, 0.1, 0.4, 0.4}});
        CHECK_THROWS_AS(cond.fuse_tokens(layout), ShapeError);
    }
}

TEST_CASE("fuse_tokens values") {
    auto cfg = toy_config();
    Conditioner<float> cond(cfg, 99);

    ConditionLayout layout;
    layout.caption = "a scene";
    layout.entities = {{"red circle", {0.2, 0.3, 0.6, 0.8}}, {"blue square", {0.5, 0.1, 0.9, 0.4}}};

    SUBCASE("zeroed MLP maps every real token to zero") {
        Conditioner<float> zeroed(cfg, 99);
        std::vector<std::pair<std::string, Tensor<float>>> params;
        zeroed.collect_params("cond", params);
        for (auto& [name, t] : params) {
            auto& d = t.mutable_data();
            std::fill(d.begin(), d.end(), 0.0f);
        }
        auto tokens = zeroed.fuse_tokens(layout);
        for (float v : tokens.tokens.data()) CHECK(v == 0.0f);
    }

    SUBCASE("matches an independently coded matrix-chain oracle") {
        std::vector<std::pair<std::string, Tensor<float>>> params;
        cond.collect_params("cond", params);
        auto get = [&](const std::string& name) -> const Tensor<float>& {
            for (auto& [n, t] : params)
                if (n == "cond." + name) return t;
            throw std::runtime_error("missing " + name);
        };

        const auto& e = layout.entities[0];
        auto text = *cond.encoder().embed(e.text);
        auto four = fourier_embed<double>(e.box, cfg.fourier);
        std::vector<double> x;
        for (float v : text) x.push_back(v);
        for (double v : four.data()) x.push_back(v);

        auto lin_silu = [](const std::vector<double>& in, const Tensor<float>& w,
                           const Tensor<float>& b, bool act) {
            const int64_t rows = w.shape()[0], cols = w.shape()[1];
            std::vector<double> out(static_cast<size_t>(cols));
            for (int64_t j = 0; j < cols; ++j) {
                double acc = b.data()[j];
                for (int64_t i = 0; i < rows; ++i) acc += in[i] * w.data()[i * cols + j];
                out[j] = act ? acc / (1.0 + std::exp(-acc)) : acc;
            }
            return out;
        };
        auto h1 = lin_silu(x, get("fuse.w1"), get("fuse.b1"), true);
        auto h2 = lin_silu(h1, get("fuse.w2"), get("fuse.b2"), true);
        auto o = lin_silu(h2, get("fuse.w3"), get("fuse.b3"), false);

        auto tokens = cond.fuse_tokens(layout);
        for (int j = 0; j < 64; ++j)
            CHECK(std::abs(tokens.tokens.data()[j] - o[j]) < 1e-6);
    }

    SUBCASE("real tokens do not depend on other slots") {
        auto t1 = cond.fuse_tokens(layout);
        auto changed = layout;
        changed.entities[1] = {"green triangle", {0.05, 0.55, 0.35, 0.95}};
        auto t2 = cond.fuse_tokens(changed);
        // slot 0 unchanged, slot 1 changed, padded slots identical
        for (int j = 0; j < 64; ++j) {
            CHECK(t1.tokens.data()[j] == t2.tokens.data()[j]);
            CHECK(t1.tokens.data()[2 * 64 + j] == t2.tokens.data()[2 * 64 + j]);
            CHECK(t1.tokens.data()[3 * 64 + j] == t2.tokens.data()[3 * 64 + j]);
        }
    }

    SUBCASE("entities_dropped output is independent of the entity list") {
        auto a = layout;
        a.entities_dropped = true;
        auto b = layout;
        b.entities = {{"green triangle", {0.3, 0.3, 0.7, 0.7}}};
        b.entities_dropped = true;
        auto ta = cond.fuse_tokens(a);
        auto tb = cond.fuse_tokens(b);
        CHECK(ta.tokens.data() == tb.tokens.data());
        CHECK(ta.real_count() == 0);
        CHECK(tb.real_count() == 0);
    }
}

TEST_CASE("encode_caption builds a per-word context sequence") {
    Conditioner<float> cond(toy_config(), 3);

    ConditionLayout layout;
    layout.caption = "a red circle on the left";
    auto ctx = cond.encode_caption(layout);
    CHECK(ctx.shape() == Shape{6, 64});

    // each row is the single-word embedding from the same encoder
    auto first = cond.encoder().embed("a");
    for (int j = 0; j < 64; ++j) CHECK(ctx.data()[j] == (*first)[j]);

    SUBCASE("dropped caption collapses to the null token") {
        layout.caption_dropped = true;
        auto null_ctx = cond.encode_caption(layout);
        CHECK(null_ctx.shape() == Shape{1, 64});
        for (float v : null_ctx.data()) CHECK(v == 0.0f);
    }

    SUBCASE("empty caption also maps to the null token") {
        ConditionLayout empty;
        empty.caption = "  ";
        auto null_ctx = cond.encode_caption(empty);
        CHECK(null_ctx.shape() == Shape{1, 64});
    }

    SUBCASE("very long captions are capped") {
        ConditionLayout lng;
        for (int i = 0; i < 40; ++i) lng.caption += "word" + std::to_string(i) + " ";
        auto ctx2 = cond.encode_caption(lng);
        CHECK(ctx2.shape() == Shape{Conditioner<float>::kMaxCaptionTokens, 64});
    }
}

TEST_CASE("drop_conditions") {
    ConditionLayout layout;
    layout.caption = "a scene with a red circle";
    layout.entities = {{"red circle", {0.1, 0.1, 0.5, 0.5}}};

    SUBCASE("p=0 leaves the layout unchanged") {
        Rng rng(1);
        auto out = drop_conditions(layout, 0.0, 0.0, rng);
        CHECK(!out.caption_dropped);
        CHECK(!out.entities_dropped);
        CHECK(out.caption == layout.caption);
        CHECK(out.entities.size() == 1);
    }

    SUBCASE("p=1 sets both flags") {
        Rng rng(1);
        auto out = drop_conditions(layout, 1.0, 1.0, rng);
        CHECK(out.caption_dropped);
        CHECK(out.entities_dropped);
    }

    SUBCASE("empirical rates at p=0.1 over 10000 seeded trials") {
        Rng rng(2024);
        int nc = 0, ne = 0, nboth = 0;
        for (int i = 0; i < 10000; ++i) {
            auto out = drop_conditions(layout, 0.1, 0.1, rng);
            nc += out.caption_dropped;
            ne += out.entities_dropped;
            nboth += out.caption_dropped && out.entities_dropped;
        }
        CHECK(std::abs(nc / 10000.0 - 0.1) < 0.01);
        CHECK(std::abs(ne / 10000.0 - 0.1) < 0.01);
        CHECK(std::abs(nboth / 10000.0 - 0.01) < 0.005);
    }
}
