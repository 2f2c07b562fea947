#pragma once

// DDPM forward process, grounded training loss, classifier-free guidance and
// the PLMS / ancestral DDPM samplers.

#include <cmath>
#include <deque>
#include <functional>
#include <vector>

#include "grounddiff/unet.hpp"

namespace grounddiff {

// Linear beta schedule. Tables are 1-based through the accessors: t in [1,T].
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta, alpha, alpha_bar;

    double beta_at(int t) const { return beta[static_cast<size_t>(t - 1)]; }
    double alpha_at(int t) const { return alpha[static_cast<size_t>(t - 1)]; }
    double alpha_bar_at(int t) const { return alpha_bar[static_cast<size_t>(t - 1)]; }
};

inline NoiseSchedule make_schedule(int T, double beta1, double betaT) {
    if (T < 1) throw ConfigError("schedule: T must be >= 1");
    if (!(beta1 > 0.0 && beta1 <= betaT && betaT < 1.0))
        throw ConfigError("schedule: need 0 < beta_1 <= beta_T < 1, got beta_1=" +
                          std::to_string(beta1) + " beta_T=" + std::to_string(betaT));
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(static_cast<size_t>(T));
    s.alpha.resize(static_cast<size_t>(T));
    s.alpha_bar.resize(static_cast<size_t>(T));
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        const double b =
            T == 1 ? beta1 : beta1 + (betaT - beta1) * static_cast<double>(t) / (T - 1);
        s.beta[static_cast<size_t>(t)] = b;
        s.alpha[static_cast<size_t>(t)] = 1.0 - b;
        prod *= 1.0 - b;
        s.alpha_bar[static_cast<size_t>(t)] = prod;
    }
    return s;
}

// Forward-process sample x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
template <class S>
Tensor<S> q_sample(const Tensor<S>& x0, int t, const Tensor<S>& eps, const NoiseSchedule& sched) {
    if (t < 1 || t > sched.T)
        throw ShapeError("q_sample: t=" + std::to_string(t) + " outside [1," +
                         std::to_string(sched.T) + "]");
    if (eps.shape() != x0.shape())
        throw ShapeError("q_sample: eps shape " + shape_str(eps.shape()) + " != x0 shape " +
                         shape_str(x0.shape()));
    const double ab = sched.alpha_bar_at(t);
    return add(scale(x0, static_cast<S>(std::sqrt(ab))),
               scale(eps, static_cast<S>(std::sqrt(1.0 - ab))));
}

// One training example with its noise draw already fixed.
template <class S>
struct TrainItem {
    Tensor<S> x0;
    ConditionLayout layout;  // condition dropout already applied
    int t = 1;               // schedule step in [1, T]
    Tensor<S> eps;
};

template <class S>
Tensor<S> noise_mse(const Tensor<S>& eps, const Tensor<S>& pred) {
    auto diff = sub(eps, pred);
    return mean_all(mul(diff, diff));
}

// Mean over the batch of per-item mean squared noise-prediction error.
// ModelLike needs predict(z_t, t_model, layout) -> Tensor; the network is
// conditioned on t-1 so its step index lies in [0, T).
template <class S, class ModelLike>
Tensor<S> training_loss_fixed(const ModelLike& model, const std::vector<TrainItem<S>>& batch,
                              const NoiseSchedule& sched) {
    if (batch.empty()) throw ShapeError("training_loss: empty batch");
    Tensor<S> total;
    for (const auto& item : batch) {
        auto z_t = q_sample(item.x0, item.t, item.eps, sched);
        auto pred = model.predict(z_t, item.t - 1, item.layout);
        auto l = noise_mse(item.eps, pred);
        total = total.defined() ? add(total, l) : l;
    }
    return scale(total, S(1) / static_cast<S>(batch.size()));
}

// Draws t uniformly from [1,T] and eps from a standard normal, in batch
// order, then evaluates the fixed loss.
template <class S, class ModelLike>
Tensor<S> training_loss(const ModelLike& model,
                        const std::vector<std::pair<Tensor<S>, ConditionLayout>>& batch,
                        const NoiseSchedule& sched, Rng& rng) {
    std::vector<TrainItem<S>> items;
    items.reserve(batch.size());
    for (const auto& [x0, layout] : batch) {
        TrainItem<S> it;
        it.x0 = x0;
        it.layout = layout;
        it.t = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(sched.T)));
        it.eps = Tensor<S>::randn(x0.shape(), rng);
        items.push_back(std::move(it));
    }
    return training_loss_fixed(model, items, sched);
}

// ---------------------------------------------------------------------------
// Classifier-free guidance
// ---------------------------------------------------------------------------

inline ConditionLayout unconditional_layout(const ConditionLayout& layout) {
    ConditionLayout u = layout;
    u.caption_dropped = true;
    u.entities_dropped = true;
    return u;
}

// eps_u + scale * (eps_c - eps_u); the unconditional branch nulls both the
// caption and the grounding tokens, matching the training-time dropout.
template <class S, class ModelLike>
std::vector<S> cfg_predict(const ModelLike& model, const std::vector<S>& z, const Shape& shape,
                           int t_model, const ConditionLayout& layout, double scale_) {
    if (scale_ < 0.0) throw ConfigError("cfg_predict: guidance scale must be >= 0");
    auto zt = Tensor<S>::leaf(shape, z);
    auto cond = model.predict(zt, t_model, layout);
    auto uncond = model.predict(zt, t_model, unconditional_layout(layout));
    std::vector<S> out(z.size());
    const auto& c = cond.data();
    const auto& u = uncond.data();
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<S>(u[i] + scale_ * (static_cast<double>(c[i]) - u[i]));
    return out;
}

// ---------------------------------------------------------------------------
// Samplers
// ---------------------------------------------------------------------------

enum class SamplerMethod { plms, ddpm };

struct SamplerConfig {
    SamplerMethod method = SamplerMethod::plms;
    int steps = 50;
    double guidance_scale = 7.5;
    uint64_t seed = 0;
    // When enabled, the predicted x0 is clamped to [clip_lo, clip_hi] at
    // every transfer. Pixel-space image sampling uses [-1, 1]; leave
    // disabled when the data range is unbounded.
    bool clip_x0 = false;
    double clip_lo = -1.0;
    double clip_hi = 1.0;
};

struct ClipSpec {
    bool enabled = false;
    double lo = -1.0, hi = 1.0;

    static ClipSpec from(const SamplerConfig& cfg) {
        return ClipSpec{cfg.clip_x0, cfg.clip_lo, cfg.clip_hi};
    }
};

inline SamplerMethod sampler_method_from_string(const std::string& s) {
    if (s == "plms") return SamplerMethod::plms;
    if (s == "ddpm") return SamplerMethod::ddpm;
    throw ConfigError("unknown sampler method '" + s + "' (expected plms or ddpm)");
}

// Descending model-step grid over [0, T-1], endpoints included.
inline std::vector<int> sampler_timesteps(int T, int steps) {
    if (steps < 1 || steps > T)
        throw ConfigError("sampler: steps=" + std::to_string(steps) + " outside [1,T=" +
                          std::to_string(T) + "]");
    std::vector<int> ts(static_cast<size_t>(steps));
    if (steps == 1) {
        ts[0] = T - 1;
        return ts;
    }
    for (int k = 0; k < steps; ++k)
        ts[static_cast<size_t>(k)] = static_cast<int>(
            std::lround(static_cast<double>(T - 1) * (steps - 1 - k) / (steps - 1)));
    return ts;
}

template <class S>
using EpsFn = std::function<std::vector<S>(const std::vector<S>& x, int t_model)>;

namespace detail {

// Deterministic transfer x_t -> x_prev given the (combined) eps estimate:
// x0_hat = (x - sqrt(1-abar_t) e) / sqrt(abar_t), optionally clamped to the
// data range; x_prev = sqrt(abar_prev) x0_hat + sqrt(1-abar_prev) e.
template <class S>
void ddim_transfer(std::vector<S>& x, const std::vector<S>& e, double a_t, double a_prev,
                   const ClipSpec& clip) {
    const double inv_sqrt_at = 1.0 / std::sqrt(a_t);
    const double sq_bt = std::sqrt(1.0 - a_t);
    const double sq_ap = std::sqrt(a_prev);
    const double sq_bp = std::sqrt(1.0 - a_prev);
    for (size_t i = 0; i < x.size(); ++i) {
        double x0 = (static_cast<double>(x[i]) - sq_bt * static_cast<double>(e[i])) * inv_sqrt_at;
        if (clip.enabled) x0 = std::clamp(x0, clip.lo, clip.hi);
        x[i] = static_cast<S>(sq_ap * x0 + sq_bp * static_cast<double>(e[i]));
    }
}

}  // namespace detail

// Pseudo linear multi-step sampler: each update combines the last four eps
// predictions (Adams-Bashforth weights), warm-started with Euler, 2nd and
// 3rd order steps. Deterministic given the initial noise.
template <class S>
std::vector<S> plms_sample(const EpsFn<S>& eps_fn, int64_t numel, const NoiseSchedule& sched,
                           int steps, Rng& rng, const ClipSpec& clip = {}) {
    std::vector<S> x(static_cast<size_t>(numel));
    for (auto& v : x) v = static_cast<S>(rng.normal());
    const auto ts = sampler_timesteps(sched.T, steps);

    std::deque<std::vector<S>> ets;
    std::vector<S> ebar(x.size());
    for (int k = 0; k < steps; ++k) {
        const int t = ts[static_cast<size_t>(k)];
        ets.push_back(eps_fn(x, t));
        if (ets.size() > 4) ets.pop_front();

        const size_t n = ets.size();
        for (size_t i = 0; i < x.size(); ++i) {
            double e;
            if (n == 1) {
                e = ets[0][i];
            } else if (n == 2) {
                e = (3.0 * ets[1][i] - ets[0][i]) / 2.0;
            } else if (n == 3) {
                e = (23.0 * ets[2][i] - 16.0 * ets[1][i] + 5.0 * ets[0][i]) / 12.0;
            } else {
                e = (55.0 * ets[3][i] - 59.0 * ets[2][i] + 37.0 * ets[1][i] - 9.0 * ets[0][i]) /
                    24.0;
            }
            ebar[i] = static_cast<S>(e);
        }

        const double a_t = sched.alpha_bar_at(t + 1);
        const double a_prev =
            (k + 1 < steps) ? sched.alpha_bar_at(ts[static_cast<size_t>(k + 1)] + 1) : 1.0;
        detail::ddim_transfer(x, ebar, a_t, a_prev, clip);
    }
    return x;
}

// Ancestral DDPM baseline on the same step grid; adds posterior noise at
// every step except the last.
template <class S>
std::vector<S> ddpm_sample(const EpsFn<S>& eps_fn, int64_t numel, const NoiseSchedule& sched,
                           int steps, Rng& rng, const ClipSpec& clip = {}) {
    std::vector<S> x(static_cast<size_t>(numel));
    for (auto& v : x) v = static_cast<S>(rng.normal());
    const auto ts = sampler_timesteps(sched.T, steps);

    for (int k = 0; k < steps; ++k) {
        const int t = ts[static_cast<size_t>(k)];
        const auto e = eps_fn(x, t);
        const double a_t = sched.alpha_bar_at(t + 1);
        const double a_prev =
            (k + 1 < steps) ? sched.alpha_bar_at(ts[static_cast<size_t>(k + 1)] + 1) : 1.0;
        const double a_eff = a_t / a_prev;
        const double sigma2 = (1.0 - a_prev) / (1.0 - a_t) * (1.0 - a_eff);
        const double sigma = std::sqrt(std::max(0.0, sigma2));
        // posterior mean written through the (optionally clamped) x0 estimate
        const double inv_sqrt_at = 1.0 / std::sqrt(a_t);
        const double sq_bt = std::sqrt(1.0 - a_t);
        const double coef_x0 = std::sqrt(a_prev) * (1.0 - a_eff) / (1.0 - a_t);
        const double coef_xt = std::sqrt(a_eff) * (1.0 - a_prev) / (1.0 - a_t);
        for (size_t i = 0; i < x.size(); ++i) {
            double x0 = (static_cast<double>(x[i]) - sq_bt * e[i]) * inv_sqrt_at;
            if (clip.enabled) x0 = std::clamp(x0, clip.lo, clip.hi);
            double v = coef_x0 * x0 + coef_xt * static_cast<double>(x[i]);
            if (k + 1 < steps) v += sigma * rng.normal();
            x[i] = static_cast<S>(v);
        }
    }
    return x;
}

// Samples one image for a layout with classifier-free guidance. Deterministic
// given the sampler seed.
template <class S, class ModelLike>
Tensor<S> sample(const ModelLike& model, const ConditionLayout& layout, const Shape& shape,
                 const SamplerConfig& sampler, const NoiseSchedule& sched) {
    EpsFn<S> fn = [&](const std::vector<S>& x, int t_model) {
        return cfg_predict<S>(model, x, shape, t_model, layout, sampler.guidance_scale);
    };
    Rng rng(mix_seed(sampler.seed, 0x5a3d));
    const auto clip = ClipSpec::from(sampler);
    std::vector<S> out;
    if (sampler.method == SamplerMethod::plms)
        out = plms_sample<S>(fn, shape_numel(shape), sched, sampler.steps, rng, clip);
    else
        out = ddpm_sample<S>(fn, shape_numel(shape), sched, sampler.steps, rng, clip);
    return Tensor<S>::leaf(shape, std::move(out));
}

}  // namespace grounddiff
