#include "grounddiff/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>

#include <json.hpp>

#include "grounddiff/png_io.hpp"
#include "grounddiff/train.hpp"

namespace grounddiff {

namespace fs = std::filesystem;
using nlohmann::json;

ConditionLayout parse_layout_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("layout: malformed JSON: ") + e.what());
    }
    ConditionLayout layout;
    if (!j.contains("caption") || !j["caption"].is_string())
        throw ConfigError("layout: missing string field \"caption\"");
    layout.caption = j["caption"].get<std::string>();
    size_t idx = 0;
    for (const auto& je : j.value("entities", json::array())) {
        GroundingEntity e;
        if (!je.contains("text") || !je["text"].is_string())
            throw ConfigError("layout: entities[" + std::to_string(idx) + "].text missing");
        e.text = je["text"].get<std::string>();
        if (!je.contains("box") || !je["box"].is_array() || je["box"].size() != 4)
            throw ConfigError("layout: entities[" + std::to_string(idx) +
                              "].box must be [x1,y1,x2,y2]");
        const auto b = je["box"].get<std::vector<double>>();
        e.box = Box{b[0], b[1], b[2], b[3]};
        try {
            validate_entity(e);
        } catch (const ConfigError& err) {
            throw ConfigError("layout: entities[" + std::to_string(idx) + "]: " + err.what());
        }
        layout.entities.push_back(std::move(e));
        ++idx;
    }
    return layout;
}

ConditionLayout parse_layout_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("layout: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_layout_json(text);
}

int cmd_gen_data(const GenDataArgs& args) {
    if (args.out_dir.empty()) throw ConfigError("gen-data: --out is required");
    if (args.num < 1) throw ConfigError("gen-data: --num must be >= 1");
    GenConfig gen;
    gen.canvas = args.canvas;
    std::vector<std::pair<Image, AnnotationRecord>> records;
    records.reserve(static_cast<size_t>(args.num));
    for (int i = 0; i < args.num; ++i) {
        Rng rng(mix_seed(args.seed, static_cast<uint64_t>(i)));
        records.push_back(generate_scene(rng, gen, i));
    }
    write_dataset(args.out_dir, records);
    std::printf("wrote %d scenes to %s\n", args.num, args.out_dir.c_str());
    return 0;
}

int cmd_train(const TrainArgs& args) {
    auto cfg = load_config(args.config_path);
    auto result = run_train(cfg, args.resume, /*verbose=*/true);
    std::printf("final checkpoint: %s\n", result.final_checkpoint.c_str());
    return 0;
}

int cmd_sample(const SampleArgs& args) {
    auto layout = parse_layout_file(args.layout_path);
    std::unique_ptr<GroundedModel<float>> model;
    RunConfig cfg = load_model_from_checkpoint(args.ckpt, model);
    const auto sched = cfg.make_noise_schedule();
    if (static_cast<int>(layout.entities.size()) > cfg.model.cond.max_entities)
        layout.entities.resize(static_cast<size_t>(cfg.model.cond.max_entities));
    if (cfg.caption_only) layout.entities_dropped = true;

    fs::create_directories(args.out_dir);
    const auto& ucfg = cfg.model.unet;
    const Shape shape{ucfg.in_channels, ucfg.image_size, ucfg.image_size};

    const auto method = sampler_method_from_string(args.method);
    std::vector<Image> outputs(args.seeds.size());
    parallel_for(static_cast<int64_t>(args.seeds.size()), args.threads, [&](int64_t i) {
        SamplerConfig sampler;
        sampler.method = method;
        sampler.steps = args.steps;
        sampler.guidance_scale = args.guidance;
        sampler.seed = args.seeds[static_cast<size_t>(i)];
        sampler.clip_x0 = true;  // pixel-space data lives in [-1, 1]
        auto img_t = sample<float>(*model, layout, shape, sampler, sched);
        outputs[static_cast<size_t>(i)] = planes_to_image(img_t.data(), ucfg.image_size,
                                                          ucfg.image_size);
    });

    for (size_t i = 0; i < args.seeds.size(); ++i) {
        char name[64];
        std::snprintf(name, sizeof(name), "sample_s%llu.png",
                      static_cast<unsigned long long>(args.seeds[i]));
        const auto path = (fs::path(args.out_dir) / name).string();
        write_png(path, outputs[i]);
        std::printf("%s\n", path.c_str());
        if (args.overlay) {
            Image over = bicubic_resize(outputs[i], 256, 256);
            int color_idx = 0;
            const uint8_t palette[6][3] = {{255, 80, 80},  {80, 255, 120}, {110, 140, 255},
                                           {255, 220, 80}, {255, 120, 255}, {120, 255, 255}};
            for (const auto& e : layout.entities) {
                const auto* c = palette[color_idx % 6];
                draw_box_outline(over, e.box, c[0], c[1], c[2]);
                const int lx = static_cast<int>(e.box.x1 * over.width) + 2;
                const int ly = static_cast<int>(e.box.y1 * over.height) + 2;
                draw_label(over, lx, ly, e.text, c[0], c[1], c[2]);
                ++color_idx;
            }
            std::snprintf(name, sizeof(name), "sample_s%llu_overlay.png",
                          static_cast<unsigned long long>(args.seeds[i]));
            write_png((fs::path(args.out_dir) / name).string(), over);
        }
    }
    return 0;
}

int cmd_eval(const EvalArgs& args) {
    EvalOptions opts;
    opts.limit = args.limit;
    opts.steps = args.steps;
    opts.guidance = args.guidance;
    opts.seed = args.seed;
    opts.save_images_dir = args.save_images_dir;
    opts.threads = args.threads;
    auto report = run_eval_checkpoint(args.ckpt, args.data_dir, opts);

    std::ofstream f(args.out_path);
    if (!f) throw IoError("eval: cannot write " + args.out_path);
    f << metric_report_json(report);
    std::printf("%s", metric_report_table(report).c_str());
    std::printf("report written to %s\n", args.out_path.c_str());
    return 0;
}

int run_guarded(const std::function<int()>& body) {
    try {
        return body();
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

}  // namespace grounddiff
