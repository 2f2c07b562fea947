#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "grounddiff/cli.hpp"
#include "grounddiff/diffusion.hpp"
#include "grounddiff/train.hpp"

using namespace grounddiff;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("grounddiff_cli_" + std::to_string(::getpid()) + "_" +
                std::to_string(reinterpret_cast<uintptr_t>(this)));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str(const std::string& sub = "") const { return (path / sub).string(); }
};

std::string tiny_model_lines() {
    return "image_size=8\nchannels=4,8\nattn_levels=1\nmiddle_attention=1\n"
           "context_dim=16\ntime_dim=8\ngroups=2\nfuse_hidden=24\nmax_entities=3\n"
           "fourier_m=2\nvocab_size=64\ntimesteps=50\n";
}

std::string read_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

RunConfig tiny_train_config(const std::string& data_dir, const std::string& out_dir,
                            int64_t steps) {
    auto cfg = parse_config_text(tiny_model_lines());
    cfg.data_dir = data_dir;
    cfg.out_dir = out_dir;
    cfg.total_steps = steps;
    cfg.batch_size = 2;
    cfg.grad_accum = 1;
    cfg.lr = 1e-3;
    cfg.warmup = 4;
    cfg.checkpoint_every = steps / 2;
    cfg.log_every = 0;
    cfg.threads = 2;
    cfg.seed = 99;
    return cfg;
}

void make_dataset(const std::string& dir, int n, uint64_t seed, int canvas = 32) {
    GenDataArgs args;
    args.out_dir = dir;
    args.num = n;
    args.seed = seed;
    args.canvas = canvas;
    REQUIRE(cmd_gen_data(args) == 0);
}

}  // namespace

TEST_CASE("config parsing") {
    SUBCASE("defaults plus overrides") {
        auto cfg = parse_config_text("lr = 1e-3\nbatch_size=8\n# a comment\n\nchannels=4,8\n"
                                     "image_size=16\ngroups=2\nattn_levels=1\n");
        CHECK(cfg.lr == 1e-3);
        CHECK(cfg.batch_size == 8);
        CHECK(cfg.model.unet.channels == std::vector<int>{4, 8});
        CHECK(cfg.grad_accum == 4);  // untouched default
        CHECK(cfg.warmup == 4000);
    }

    SUBCASE("unknown key is an error") {
        CHECK_THROWS_WITH_AS(parse_config_text("learning_rate=1e-4\n"),
                             doctest::Contains("unknown key"), ConfigError);
    }

    SUBCASE("duplicate key is an error") {
        CHECK_THROWS_WITH_AS(parse_config_text("lr=1e-4\nlr=2e-4\n"),
                             doctest::Contains("duplicate"), ConfigError);
    }

    SUBCASE("malformed values are errors") {
        CHECK_THROWS_AS(parse_config_text("lr=fast\n"), ConfigError);
        CHECK_THROWS_AS(parse_config_text("batch_size=2.5\n"), ConfigError);
        CHECK_THROWS_AS(parse_config_text("caption_only=maybe\n"), ConfigError);
        CHECK_THROWS_AS(parse_config_text("lr\n"), ConfigError);
    }

    SUBCASE("invariants enforced") {
        CHECK_THROWS_AS(parse_config_text("lr=0\n"), ConfigError);
        CHECK_THROWS_AS(parse_config_text("grad_accum=0\n"), ConfigError);
        CHECK_THROWS_AS(parse_config_text("sample_steps=2000\n"), ConfigError);
        CHECK_THROWS_AS(parse_config_text("sampler=euler\n"), ConfigError);
    }

    SUBCASE("canonical string round trips through the parser") {
        auto cfg = parse_config_text(tiny_model_lines());
        auto canon = canonical_config_string(cfg);
        auto back = parse_config_text(canon);
        CHECK(canonical_config_string(back) == canon);
        CHECK(config_digest(back) == config_digest(cfg));
    }

    SUBCASE("digest tracks every schedule-relevant field") {
        auto cfg = parse_config_text(tiny_model_lines());
        auto base_digest = config_digest(cfg);
        auto cfg2 = cfg;
        cfg2.seed += 1;
        CHECK(config_digest(cfg2) != base_digest);
        auto cfg3 = cfg;
        cfg3.lr *= 2;
        CHECK(config_digest(cfg3) != base_digest);
        auto cfg4 = cfg;
        cfg4.out_dir = "/elsewhere";  // paths deliberately excluded
        CHECK(config_digest(cfg4) == base_digest);
    }
}

TEST_CASE("layout file parsing") {
    SUBCASE("valid layout") {
        auto layout = parse_layout_json(
            R"({"caption":"a red circle","entities":[{"text":"red circle","box":[0.1,0.2,0.5,0.6]}]})");
        CHECK(layout.caption == "a red circle");
        REQUIRE(layout.entities.size() == 1);
        CHECK(layout.entities[0].box.x2 == 0.5);
    }

    SUBCASE("caption-only layout is fine") {
        auto layout = parse_layout_json(R"({"caption":"just a caption"})");
        CHECK(layout.entities.empty());
    }

    SUBCASE("out-of-range box is a parse error") {
        CHECK_THROWS_AS(parse_layout_json(
                            R"({"caption":"x","entities":[{"text":"t","box":[0.1,0.2,1.5,0.6]}]})"),
                        ConfigError);
        CHECK_THROWS_AS(parse_layout_json(
                            R"({"caption":"x","entities":[{"text":"t","box":[0.5,0.2,0.1,0.6]}]})"),
                        ConfigError);
    }

    SUBCASE("malformed JSON and missing fields") {
        CHECK_THROWS_AS(parse_layout_json("{oops"), ConfigError);
        CHECK_THROWS_AS(parse_layout_json(R"({"entities":[]})"), ConfigError);
        CHECK_THROWS_AS(parse_layout_json(R"({"caption":"x","entities":[{"box":[0,0,1,1]}]})"),
                        ConfigError);
    }
}

TEST_CASE("exit code mapping") {
    CHECK(run_guarded([] { return 0; }) == 0);
    CHECK(run_guarded([]() -> int { throw ConfigError("bad"); }) == 2);
    CHECK(run_guarded([]() -> int { throw IoError("gone"); }) == 2);
    CHECK(run_guarded([]() -> int { throw NumericError("nan"); }) == 3);
    CHECK(run_guarded([]() -> int { throw std::runtime_error("other"); }) == 1);
}

TEST_CASE("gradient accumulation matches the full-batch update") {
    auto cfg = parse_config_text(tiny_model_lines());
    const auto sched = cfg.make_noise_schedule();

    GroundedModel<float> model_a(cfg.model, 5);
    GroundedModel<float> model_b(cfg.model, 5);
    auto part_a = model_a.partition();
    auto part_b = model_b.partition();

    // perturb both identically off the zero-bridge init
    Rng jitter(3);
    for (size_t i = 0; i < part_a.trainable.size(); ++i) {
        auto& da = part_a.trainable[i].second.mutable_data();
        auto& db = part_b.trainable[i].second.mutable_data();
        for (size_t j = 0; j < da.size(); ++j) {
            const float d = static_cast<float>(jitter.uniform(-0.05, 0.05));
            da[j] += d;
            db[j] += d;
        }
    }

    // 16 fixed items
    Rng rng(17);
    std::vector<TrainItem<float>> items;
    const Shape shape{cfg.model.unet.in_channels, cfg.model.unet.image_size,
                      cfg.model.unet.image_size};
    for (int i = 0; i < 16; ++i) {
        TrainItem<float> it;
        it.x0 = Tensor<float>::randn(shape, rng);
        it.eps = Tensor<float>::randn(shape, rng);
        it.t = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(sched.T)));
        it.layout.caption = "a scene with a red circle";
        it.layout.entities = {{"red circle", {0.1, 0.1, 0.6, 0.6}}};
        items.push_back(std::move(it));
    }

    // full batch of 16 through one graph
    auto grads_full = backward(training_loss_fixed(model_a, items, sched));
    std::vector<std::vector<float>> g_full;
    for (const auto& [name, t] : part_a.trainable) g_full.push_back(grads_full.get(t));

    // 4 accumulated micro-batches of 4 (normalized sum)
    std::vector<std::vector<float>> g_accum;
    for (const auto& [name, t] : part_b.trainable)
        g_accum.emplace_back(static_cast<size_t>(t.numel()), 0.0f);
    for (int micro = 0; micro < 4; ++micro) {
        std::vector<TrainItem<float>> chunk(items.begin() + micro * 4,
                                            items.begin() + (micro + 1) * 4);
        auto g = backward(training_loss_fixed(model_b, chunk, sched));
        for (size_t ti = 0; ti < part_b.trainable.size(); ++ti) {
            auto gv = g.get(part_b.trainable[ti].second);
            for (size_t j = 0; j < gv.size(); ++j) g_accum[ti][j] += gv[j] / 4.0f;
        }
    }

    double worst = 0;
    for (size_t ti = 0; ti < g_full.size(); ++ti)
        for (size_t j = 0; j < g_full[ti].size(); ++j) {
            const double a = g_full[ti][j], b = g_accum[ti][j];
            worst = std::max(worst, std::abs(a - b) /
                                        std::max({std::abs(a), std::abs(b), 1e-4}));
        }
    CHECK(worst < 1e-5);

    // and the Adam updates built from those gradients agree wherever the
    // gradient is non-degenerate (a first Adam step is ~lr*sign(g), so
    // elements with g ~ 0 are sign-unstable by construction, not by any
    // accumulation error)
    AdamState<float> sa, sb;
    AdamConfig adam;
    FrozenGuard<float> guard_a(part_a.frozen);
    FrozenGuard<float> guard_b(part_b.frozen);
    freeze_step_guard(part_a, sa, g_full, 1e-3, adam, guard_a);
    freeze_step_guard(part_b, sb, g_accum, 1e-3, adam, guard_b);
    double worst_p = 0;
    for (size_t ti = 0; ti < part_a.trainable.size(); ++ti) {
        const auto& pa = part_a.trainable[ti].second.data();
        const auto& pb = part_b.trainable[ti].second.data();
        for (size_t j = 0; j < pa.size(); ++j) {
            if (std::abs(g_full[ti][j]) < 1e-4f) continue;
            worst_p = std::max(worst_p, static_cast<double>(std::abs(pa[j] - pb[j])));
        }
    }
    CHECK(worst_p < 1e-6);
}

TEST_CASE("training end to end") {
    TempDir tmp;
    make_dataset(tmp.str("data"), 12, 42);

    SUBCASE("two runs with the same seed are bit-identical") {
        auto cfg1 = tiny_train_config(tmp.str("data"), tmp.str("run1"), 6);
        auto cfg2 = tiny_train_config(tmp.str("data"), tmp.str("run2"), 6);
        auto r1 = run_train(cfg1, "", false);
        auto r2 = run_train(cfg2, "", false);
        CHECK(read_bytes(r1.final_checkpoint) == read_bytes(r2.final_checkpoint));
        REQUIRE(r1.log.size() == r2.log.size());
    }

    SUBCASE("thread count does not change the result") {
        auto cfg1 = tiny_train_config(tmp.str("data"), tmp.str("t1"), 4);
        cfg1.threads = 1;
        auto cfg2 = tiny_train_config(tmp.str("data"), tmp.str("t2"), 4);
        cfg2.threads = 2;
        auto r1 = run_train(cfg1, "", false);
        auto r2 = run_train(cfg2, "", false);
        // threads are excluded from the digest, so the payloads must agree
        CHECK(read_bytes(r1.final_checkpoint) == read_bytes(r2.final_checkpoint));
    }

    SUBCASE("resume reproduces the uninterrupted run bit-exactly") {
        auto cfg_a = tiny_train_config(tmp.str("data"), tmp.str("full"), 8);
        cfg_a.checkpoint_every = 4;
        auto ra = run_train(cfg_a, "", false);
        CHECK(ra.first_checkpoint != ra.final_checkpoint);

        auto cfg_b = tiny_train_config(tmp.str("data"), tmp.str("resumed"), 8);
        cfg_b.checkpoint_every = 4;
        auto rb = run_train(cfg_b, ra.first_checkpoint, false);
        CHECK(read_bytes(ra.final_checkpoint) == read_bytes(rb.final_checkpoint));
    }

    SUBCASE("checkpoint save-load-save is byte stable and digest is enforced") {
        auto cfg = tiny_train_config(tmp.str("data"), tmp.str("ck"), 2);
        auto r = run_train(cfg, "", false);

        GroundedModel<float> model(cfg.model, cfg.seed);
        auto part = model.partition();
        TrainState state;
        const auto canon = canonical_config_string(cfg);
        load_checkpoint(r.final_checkpoint, part, state, canon);
        const auto resaved = tmp.str("resaved.bin");
        save_checkpoint(resaved, canon, part, state);
        CHECK(read_bytes(r.final_checkpoint) == read_bytes(resaved));

        auto other = cfg;
        other.seed += 1;
        GroundedModel<float> model2(other.model, other.seed);
        auto part2 = model2.partition();
        TrainState state2;
        CHECK_THROWS_WITH_AS(
            load_checkpoint(r.final_checkpoint, part2, state2, canonical_config_string(other)),
            doctest::Contains("digest"), ConfigError);
    }

    SUBCASE("a poisoned parameter aborts with a numeric failure") {
        auto cfg = tiny_train_config(tmp.str("data"), tmp.str("poison"), 2);
        auto r = run_train(cfg, "", false);

        GroundedModel<float> model(cfg.model, cfg.seed);
        auto part = model.partition();
        TrainState state;
        const auto canon = canonical_config_string(cfg);
        load_checkpoint(r.final_checkpoint, part, state, canon);
        part.frozen[3].second.mutable_data()[0] = std::nanf("");
        const auto bad = tmp.str("bad.bin");
        save_checkpoint(bad, canon, part, state);

        auto cfg2 = tiny_train_config(tmp.str("data"), tmp.str("poison2"), 4);
        CHECK_THROWS_AS(run_train(cfg2, bad, false), NumericError);
        // diagnostic snapshot was written
        bool found = false;
        for (const auto& entry : fs::directory_iterator(tmp.str("poison2")))
            if (entry.path().filename().string().rfind("diagnostic_", 0) == 0) found = true;
        CHECK(found);
    }
}

TEST_CASE("sample and eval commands") {
    TempDir tmp;
    make_dataset(tmp.str("data"), 10, 31);
    auto cfg = tiny_train_config(tmp.str("data"), tmp.str("run"), 2);
    // 8x8 model cannot consume 32px scenes? preprocess resizes; fine.
    auto r = run_train(cfg, "", false);

    std::ofstream lf(tmp.str("layout.json"));
    lf << R"({"caption":"a scene with a red circle",
              "entities":[{"text":"red circle","box":[0.2,0.2,0.7,0.7]}]})";
    lf.close();

    SUBCASE("sampling twice with the same seed gives identical bytes") {
        SampleArgs s;
        s.ckpt = r.final_checkpoint;
        s.layout_path = tmp.str("layout.json");
        s.steps = 4;
        s.guidance = 1.5;
        s.seeds = {7};
        s.out_dir = tmp.str("s1");
        s.overlay = true;
        REQUIRE(cmd_sample(s) == 0);
        s.out_dir = tmp.str("s2");
        REQUIRE(cmd_sample(s) == 0);
        CHECK(read_bytes(tmp.str("s1/sample_s7.png")) == read_bytes(tmp.str("s2/sample_s7.png")));
        CHECK(fs::exists(tmp.str("s1/sample_s7_overlay.png")));
    }

    SUBCASE("different guidance changes the image") {
        SampleArgs s;
        s.ckpt = r.final_checkpoint;
        s.layout_path = tmp.str("layout.json");
        s.steps = 4;
        s.seeds = {3};
        s.guidance = 0.0;
        s.out_dir = tmp.str("g0");
        REQUIRE(cmd_sample(s) == 0);
        s.guidance = 5.0;
        s.out_dir = tmp.str("g5");
        REQUIRE(cmd_sample(s) == 0);
        CHECK(read_bytes(tmp.str("g0/sample_s3.png")) != read_bytes(tmp.str("g5/sample_s3.png")));
    }

    SUBCASE("caption-only layout samples fine") {
        std::ofstream cf(tmp.str("cap.json"));
        cf << R"({"caption":"an empty scene"})";
        cf.close();
        SampleArgs s;
        s.ckpt = r.final_checkpoint;
        s.layout_path = tmp.str("cap.json");
        s.steps = 3;
        s.seeds = {1};
        s.out_dir = tmp.str("cap");
        CHECK(cmd_sample(s) == 0);
        CHECK(fs::exists(tmp.str("cap/sample_s1.png")));
    }

    SUBCASE("eval writes a deterministic report with all six fields") {
        EvalArgs e;
        e.ckpt = r.final_checkpoint;
        e.data_dir = tmp.str("data");
        e.out_path = tmp.str("report.json");
        e.steps = 3;
        e.guidance = 1.5;
        e.limit = 4;
        REQUIRE(cmd_eval(e) == 0);
        auto report = read_bytes(tmp.str("report.json"));
        for (const char* key :
             {"\"ap\"", "\"ap50\"", "\"ap75\"", "\"ar\"", "\"per_class\"", "\"fid_analog\""})
            CHECK(report.find(key) != std::string::npos);

        e.out_path = tmp.str("report2.json");
        REQUIRE(cmd_eval(e) == 0);
        CHECK(read_bytes(tmp.str("report2.json")) == report);
    }
}

TEST_CASE("evaluating real images against themselves is exact") {
    TempDir tmp;
    make_dataset(tmp.str("data"), 12, 77, 64);

    // detector exactness: detections on the real renders vs their own boxes
    auto records = read_annotations(tmp.str("data"));
    std::vector<EvalInstance> instances;
    std::vector<std::vector<double>> fa, fb;
    for (const auto& rec : records) {
        auto img = read_dataset_image(tmp.str("data"), rec);
        EvalInstance inst;
        inst.detections = oracle_detect(img);
        for (const auto& a : rec.annotations)
            inst.ground_truth.push_back({Box{a.bbox[0] / rec.width, a.bbox[1] / rec.height,
                                             (a.bbox[0] + a.bbox[2]) / rec.width,
                                             (a.bbox[1] + a.bbox[3]) / rec.height},
                                         a.category});
        instances.push_back(std::move(inst));
        fa.push_back(feature_extract(img));
        fb.push_back(feature_extract(img));
    }
    auto m = compute_ap(instances, shape_vocabulary());
    CHECK(m.ap50 == doctest::Approx(1.0));
    CHECK(frechet_distance(fa, fb) < 1e-6);
}
