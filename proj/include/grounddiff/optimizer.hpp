#pragma once

// Adam on the trainable parameter set, with a checksum guard asserting the
// frozen set is never touched.

#include <cmath>
#include <vector>

#include "grounddiff/errors.hpp"
#include "grounddiff/unet.hpp"

namespace grounddiff {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <class S>
struct AdamState {
    std::vector<std::vector<S>> m, v;  // aligned with partition.trainable
    int64_t step = 0;                  // completed optimizer steps

    void ensure_initialized(const ParamList<S>& trainable) {
        if (!m.empty()) return;
        for (const auto& [name, t] : trainable) {
            m.emplace_back(static_cast<size_t>(t.numel()), S(0));
            v.emplace_back(static_cast<size_t>(t.numel()), S(0));
        }
    }
};

// Snapshot of the frozen set taken at model construction; verify() fails
// hard if any frozen tensor changed since.
template <class S>
class FrozenGuard {
public:
    explicit FrozenGuard(const ParamList<S>& frozen) : sums_(checksum_params(frozen)) {}

    void verify(const ParamList<S>& frozen) const {
        const auto now = checksum_params(frozen);
        if (now.size() != sums_.size())
            throw NumericError("freeze guard: frozen tensor count changed");
        for (size_t i = 0; i < now.size(); ++i)
            if (now[i] != sums_[i])
                throw NumericError("freeze guard: frozen tensor '" + frozen[i].first +
                                   "' was mutated");
    }

private:
    std::vector<uint64_t> sums_;
};

// One checked optimizer update: Adam applied to the trainable tensors only
// (grads aligned with partition.trainable), then the frozen checksums are
// re-verified. lr is the already-warmed-up learning rate for this step.
template <class S>
void freeze_step_guard(ParameterPartition<S>& partition, AdamState<S>& state,
                       const std::vector<std::vector<S>>& grads, double lr,
                       const AdamConfig& cfg, const FrozenGuard<S>& guard) {
    if (grads.size() != partition.trainable.size())
        throw ShapeError("optimizer: gradient count " + std::to_string(grads.size()) +
                         " != trainable tensor count " +
                         std::to_string(partition.trainable.size()));
    state.ensure_initialized(partition.trainable);
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));

    for (size_t ti = 0; ti < partition.trainable.size(); ++ti) {
        auto& data = partition.trainable[ti].second.mutable_data();
        const auto& g = grads[ti];
        if (g.size() != data.size())
            throw ShapeError("optimizer: gradient size mismatch for " +
                             partition.trainable[ti].first);
        auto& m = state.m[ti];
        auto& v = state.v[ti];
        for (size_t i = 0; i < data.size(); ++i) {
            const double gi = static_cast<double>(g[i]);
            const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * gi;
            const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * gi * gi;
            m[i] = static_cast<S>(mi);
            v[i] = static_cast<S>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            data[i] = static_cast<S>(static_cast<double>(data[i]) -
                                     lr * mhat / (std::sqrt(vhat) + cfg.eps));
        }
    }
    guard.verify(partition.frozen);
}

// Linear warmup: reaches exactly base_lr at step == warmup (1-based steps).
inline double warmup_lr(double base_lr, int64_t step, int64_t warmup_steps) {
    if (warmup_steps <= 0 || step >= warmup_steps) return base_lr;
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
}

}  // namespace grounddiff
