#include "grounddiff/train.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <mutex>
#include <thread>

#include "grounddiff/diffusion.hpp"
#include "grounddiff/png_io.hpp"

namespace grounddiff {

namespace fs = std::filesystem;

void parallel_for(int64_t n, int threads, const std::function<void(int64_t)>& fn) {
    if (n <= 0) return;
    const int workers = std::max<int>(1, static_cast<int>(std::min<int64_t>(threads, n)));
    if (workers == 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::exception_ptr error;
    std::mutex error_mu;
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            try {
                for (int64_t i = w; i < n; i += workers) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mu);
                if (!error) error = std::current_exception();
            }
        });
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

namespace {

struct LoadedDataset {
    std::vector<AnnotationRecord> records;
    std::vector<Image> images;
};

LoadedDataset load_dataset(const std::string& dir) {
    LoadedDataset ds;
    ds.records = read_annotations(dir);
    if (ds.records.empty()) throw ConfigError("dataset at " + dir + " is empty");
    ds.images.reserve(ds.records.size());
    for (const auto& rec : ds.records) ds.images.push_back(read_dataset_image(dir, rec));
    return ds;
}

// Keep at most the model's N entities; preprocess emits them largest-first.
void truncate_entities(ConditionLayout& layout, int max_entities) {
    if (static_cast<int>(layout.entities.size()) > max_entities)
        layout.entities.resize(static_cast<size_t>(max_entities));
}

}  // namespace

TrainResult run_train(const RunConfig& cfg, const std::string& resume_path, bool verbose) {
    validate_run_config(cfg);
    if (cfg.data_dir.empty()) throw ConfigError("train: data_dir is required");
    if (cfg.out_dir.empty()) throw ConfigError("train: out_dir is required");
    fs::create_directories(cfg.out_dir);

    const auto canonical = canonical_config_string(cfg);
    const auto sched = cfg.make_noise_schedule();
    auto ds = load_dataset(cfg.data_dir);

    GroundedModel<float> model(cfg.model, cfg.seed);
    auto partition = model.partition();
    FrozenGuard<float> guard(partition.frozen);

    TrainState state;
    state.rng = Rng(mix_seed(cfg.seed, 0x7a13));
    if (!resume_path.empty()) {
        load_checkpoint(resume_path, partition, state, canonical);
        if (verbose)
            std::fprintf(stderr, "[train] resumed from %s at step %lld\n", resume_path.c_str(),
                         static_cast<long long>(state.step));
    }

    PreprocessConfig pp;
    pp.target_size = cfg.model.unet.image_size;
    pp.flip_prob = 0.5;

    const Shape latent_shape{cfg.model.unet.in_channels, cfg.model.unet.image_size,
                             cfg.model.unet.image_size};
    const int64_t numel = shape_numel(latent_shape);

    AdamConfig adam;
    TrainResult result;

    const int items_per_micro = cfg.batch_size;
    std::vector<std::vector<float>> grad_sum;
    for (const auto& [name, t] : partition.trainable)
        grad_sum.emplace_back(static_cast<size_t>(t.numel()), 0.0f);

    double window_loss = 0.0;
    int64_t window_count = 0;

    auto checkpoint_path = [&](int64_t step) {
        return (fs::path(cfg.out_dir) / ("ckpt_" + std::to_string(step) + ".bin")).string();
    };

    for (int64_t step = state.step + 1; step <= cfg.total_steps; ++step) {
        for (auto& g : grad_sum) std::fill(g.begin(), g.end(), 0.0f);
        double step_loss = 0.0;

        for (int micro = 0; micro < cfg.grad_accum; ++micro) {
            // all randomness drawn sequentially on the training stream
            std::vector<TrainItem<float>> items(static_cast<size_t>(items_per_micro));
            for (int b = 0; b < items_per_micro; ++b) {
                const size_t idx = static_cast<size_t>(state.rng.below(ds.records.size()));
                auto ex = preprocess(ds.records[idx], ds.images[idx], pp, state.rng);
                truncate_entities(ex.layout, cfg.model.cond.max_entities);
                auto layout = drop_conditions(ex.layout, cfg.drop_caption, cfg.drop_entities,
                                              state.rng);
                if (cfg.caption_only) layout.entities_dropped = true;
                TrainItem<float>& item = items[static_cast<size_t>(b)];
                item.x0 = Tensor<float>::leaf(latent_shape, std::move(ex.image));
                item.layout = std::move(layout);
                item.t = 1 + static_cast<int>(state.rng.below(static_cast<uint64_t>(sched.T)));
                std::vector<float> eps(static_cast<size_t>(numel));
                for (auto& v : eps) v = static_cast<float>(state.rng.normal());
                item.eps = Tensor<float>::leaf(latent_shape, std::move(eps));
            }

            // per-item forward/backward in parallel, reduced in item order
            std::vector<double> item_losses(items.size(), 0.0);
            std::vector<Gradients<float>> item_grads;
            item_grads.reserve(items.size());
            for (size_t i = 0; i < items.size(); ++i)
                item_grads.emplace_back(GradMap<float>{});
            parallel_for(static_cast<int64_t>(items.size()), cfg.threads, [&](int64_t i) {
                const auto& item = items[static_cast<size_t>(i)];
                auto z_t = q_sample(item.x0, item.t, item.eps, sched);
                auto pred = model.predict(z_t, item.t - 1, item.layout);
                auto loss = noise_mse(item.eps, pred);
                item_losses[static_cast<size_t>(i)] = loss.item();
                item_grads[static_cast<size_t>(i)] = backward(loss);
            });

            const float weight = 1.0f / static_cast<float>(items.size());
            for (size_t i = 0; i < items.size(); ++i) {
                step_loss += item_losses[i] / items.size();
                for (size_t ti = 0; ti < partition.trainable.size(); ++ti) {
                    const auto* g = item_grads[i].find(partition.trainable[ti].second);
                    if (!g) continue;
                    auto& dst = grad_sum[ti];
                    for (size_t j = 0; j < dst.size(); ++j) dst[j] += (*g)[j] * weight;
                }
            }
        }

        step_loss /= cfg.grad_accum;
        if (!std::isfinite(step_loss)) {
            const auto snap =
                (fs::path(cfg.out_dir) / ("diagnostic_step" + std::to_string(step) + ".bin"))
                    .string();
            save_checkpoint(snap, canonical, partition, state);
            throw NumericError("train: non-finite loss at step " + std::to_string(step) +
                               "; diagnostic snapshot written to " + snap);
        }

        // normalized accumulated gradients
        const float inv_accum = 1.0f / static_cast<float>(cfg.grad_accum);
        for (auto& g : grad_sum)
            for (auto& v : g) v *= inv_accum;

        const double lr = warmup_lr(cfg.lr, step, cfg.warmup);
        freeze_step_guard(partition, state.adam, grad_sum, lr, adam, guard);
        state.step = step;

        window_loss += step_loss;
        ++window_count;
        if (cfg.log_every > 0 && step % cfg.log_every == 0) {
            const double avg = window_loss / window_count;
            result.log.push_back({step, avg, lr});
            if (verbose)
                std::fprintf(stderr, "[train] step %6lld  loss %.5f  lr %.3g\n",
                             static_cast<long long>(step), avg, lr);
            window_loss = 0.0;
            window_count = 0;
        }

        if ((cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) ||
            step == cfg.total_steps) {
            const auto path = checkpoint_path(step);
            save_checkpoint(path, canonical, partition, state);
            if (result.first_checkpoint.empty()) result.first_checkpoint = path;
            result.final_checkpoint = path;
        }
    }
    if (result.final_checkpoint.empty()) {
        const auto path = checkpoint_path(state.step);
        save_checkpoint(path, canonical, partition, state);
        result.first_checkpoint = path;
        result.final_checkpoint = path;
    }
    return result;
}

RunConfig load_model_from_checkpoint(const std::string& ckpt_path,
                                     std::unique_ptr<GroundedModel<float>>& model,
                                     TrainState* state_out) {
    const auto config_text = peek_checkpoint_config(ckpt_path);
    RunConfig cfg = parse_config_text(config_text);
    model = std::make_unique<GroundedModel<float>>(cfg.model, cfg.seed);
    auto partition = model->partition();
    TrainState state;
    load_checkpoint(ckpt_path, partition, state, config_text);
    if (state_out) *state_out = std::move(state);
    return cfg;
}

MetricReport run_eval_model(const GroundedModel<float>& model, bool caption_only,
                            const NoiseSchedule& sched, const std::string& data_dir,
                            const EvalOptions& opts) {
    auto ds = load_dataset(data_dir);
    size_t count = ds.records.size();
    if (opts.limit > 0) count = std::min(count, static_cast<size_t>(opts.limit));

    const auto& ucfg = model.config().unet;
    PreprocessConfig pp;
    pp.target_size = ucfg.image_size;
    pp.flip_prob = 0.0;

    const Shape latent_shape{ucfg.in_channels, ucfg.image_size, ucfg.image_size};

    std::vector<EvalInstance> instances(count);
    std::vector<std::vector<double>> gen_feats(count), real_feats(count);
    std::vector<Image> generated(count);

    if (!opts.save_images_dir.empty()) fs::create_directories(opts.save_images_dir);

    parallel_for(static_cast<int64_t>(count), opts.threads, [&](int64_t i) {
        const auto& rec = ds.records[static_cast<size_t>(i)];
        Rng layout_rng(mix_seed(opts.seed, static_cast<uint64_t>(rec.id) * 2 + 1));
        auto ex = preprocess(rec, ds.images[static_cast<size_t>(i)], pp, layout_rng);
        truncate_entities(ex.layout, model.config().cond.max_entities);
        if (caption_only) ex.layout.entities_dropped = true;

        SamplerConfig sampler;
        sampler.method = opts.method;
        sampler.steps = opts.steps;
        sampler.guidance_scale = opts.guidance;
        sampler.seed = mix_seed(opts.seed, static_cast<uint64_t>(rec.id) * 2);
        sampler.clip_x0 = true;  // pixel-space data lives in [-1, 1]
        auto img_t = sample<float>(model, ex.layout, latent_shape, sampler, sched);

        Image img = planes_to_image(img_t.data(), ucfg.image_size, ucfg.image_size);
        generated[static_cast<size_t>(i)] = img;

        EvalInstance inst;
        inst.detections = oracle_detect(img);
        for (const auto& e : ex.layout.entities)
            inst.ground_truth.push_back({e.box, e.text});
        instances[static_cast<size_t>(i)] = std::move(inst);

        gen_feats[static_cast<size_t>(i)] = feature_extract(img);
        real_feats[static_cast<size_t>(i)] = feature_extract(ds.images[static_cast<size_t>(i)]);
    });

    if (!opts.save_images_dir.empty())
        for (size_t i = 0; i < count; ++i) {
            char name[64];
            std::snprintf(name, sizeof(name), "eval_%06d.png", ds.records[i].id);
            write_png((fs::path(opts.save_images_dir) / name).string(), generated[i]);
        }

    MetricReport report;
    report.summary = compute_ap(instances, shape_vocabulary());
    report.fid_analog = frechet_distance(real_feats, gen_feats);
    return report;
}

MetricReport run_eval_checkpoint(const std::string& ckpt_path, const std::string& data_dir,
                                 const EvalOptions& opts) {
    std::unique_ptr<GroundedModel<float>> model;
    RunConfig cfg = load_model_from_checkpoint(ckpt_path, model);
    const auto sched = cfg.make_noise_schedule();
    return run_eval_model(*model, cfg.caption_only, sched, data_dir, opts);
}

}  // namespace grounddiff
