#pragma once

// Training loop: batch assembly with condition dropout, per-item parallel
// forward/backward, gradient accumulation, warmup + Adam on the trainable
// set under the freeze guard, periodic checkpoints, NaN abort.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "grounddiff/checkpoint.hpp"
#include "grounddiff/config.hpp"
#include "grounddiff/data.hpp"
#include "grounddiff/eval.hpp"

namespace grounddiff {

// Deterministic static work split; fn(i) must not touch shared mutable
// state. Results must be reduced by the caller in index order.
void parallel_for(int64_t n, int threads, const std::function<void(int64_t)>& fn);

struct LossLogEntry {
    int64_t step;
    double loss;
    double lr;
};

struct TrainResult {
    std::vector<LossLogEntry> log;
    std::string first_checkpoint;  // earliest periodic checkpoint path
    std::string final_checkpoint;
};

// Trains per the config; resume_path continues a run bit-exactly. progress
// lines go to stderr when verbose.
TrainResult run_train(const RunConfig& cfg, const std::string& resume_path = "",
                      bool verbose = true);

struct EvalOptions {
    int limit = 0;  // 0 = all records
    int steps = 50;
    double guidance = 7.5;
    SamplerMethod method = SamplerMethod::plms;
    uint64_t seed = 20240001;
    std::string save_images_dir;  // empty = do not save
    int threads = 2;
};

// Samples one image per eval layout (fixed per-record seeds), runs the
// oracle detector against the conditioning boxes and computes the Frechet
// feature distance between real and generated images.
MetricReport run_eval_model(const GroundedModel<float>& model, bool caption_only,
                            const NoiseSchedule& sched, const std::string& data_dir,
                            const EvalOptions& opts);

// Convenience: load the checkpoint (rebuilding the model from its embedded
// config) and evaluate it.
MetricReport run_eval_checkpoint(const std::string& ckpt_path, const std::string& data_dir,
                                 const EvalOptions& opts);

// Rebuilds a model + config from a checkpoint. Returns the parsed config.
RunConfig load_model_from_checkpoint(const std::string& ckpt_path,
                                     std::unique_ptr<GroundedModel<float>>& model,
                                     TrainState* state = nullptr);

}  // namespace grounddiff
