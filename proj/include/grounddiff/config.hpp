#pragma once

// Flat key=value run configuration. Unknown keys are errors; the canonical
// string of the effective config is hashed into checkpoints.

#include <string>

#include "grounddiff/diffusion.hpp"
#include "grounddiff/unet.hpp"

namespace grounddiff {

struct RunConfig {
    ModelConfig model;

    // schedule
    int timesteps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;

    // optimizer / loop
    double lr = 5e-5;
    int64_t warmup = 4000;
    int batch_size = 4;
    int grad_accum = 4;
    int64_t total_steps = 10000;
    double drop_caption = 0.1;
    double drop_entities = 0.1;
    bool caption_only = false;  // ablation: entities always dropped
    uint64_t seed = 1234;
    int64_t checkpoint_every = 1000;
    int64_t log_every = 50;
    int threads = 2;
    std::string data_dir;
    std::string out_dir;

    // sampling defaults
    std::string sampler = "plms";
    int sample_steps = 50;
    double guidance = 7.5;

    NoiseSchedule make_noise_schedule() const {
        return make_schedule(timesteps, beta_start, beta_end);
    }
};

RunConfig default_toy_config();

// Parses the key=value format ('#' comments, blank lines allowed). Unknown
// and duplicate keys are errors. Keys not present keep their defaults.
RunConfig parse_config_text(const std::string& text);
RunConfig load_config(const std::string& path);

void validate_run_config(const RunConfig& cfg);

// Fixed-order serialization of every field; equal configs produce equal
// strings. The digest of this string keys checkpoint compatibility.
std::string canonical_config_string(const RunConfig& cfg);
uint64_t config_digest(const RunConfig& cfg);

}  // namespace grounddiff
