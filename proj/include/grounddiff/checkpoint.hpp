#pragma once

// Binary checkpoint: little-endian, format-versioned, carrying the canonical
// config text, every named parameter tensor (f32), Adam moments, the global
// step and the training RNG state. Round trips are byte-exact and resuming
// reproduces an uninterrupted run bit-for-bit.

#include <string>

#include "grounddiff/optimizer.hpp"
#include "grounddiff/rng.hpp"
#include "grounddiff/unet.hpp"

namespace grounddiff {

struct TrainState {
    int64_t step = 0;  // completed optimizer steps
    Rng rng;
    AdamState<float> adam;
};

void save_checkpoint(const std::string& path, const std::string& canonical_config,
                     const ParameterPartition<float>& params, const TrainState& state);

// Returns the embedded canonical config text. If expected_config is
// non-empty the load refuses on any mismatch (digest check).
std::string load_checkpoint(const std::string& path, ParameterPartition<float>& params,
                            TrainState& state, const std::string& expected_config = "");

// Reads only the embedded config text (to rebuild the model before loading).
std::string peek_checkpoint_config(const std::string& path);

}  // namespace grounddiff
