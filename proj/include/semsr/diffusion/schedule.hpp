#pragma once

#include <cmath>
#include <vector>

#include "semsr/core/errors.hpp"
#include "semsr/nn/var.hpp"

namespace semsr::diffusion {

// Linear beta ramp over t = 1..T. Index 0 of alphas_cumprod is the t = 0
// convention (alpha_bar = 1); index t holds alpha_bar_t.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;           // betas[t - 1] = beta_t
    std::vector<double> alphas_cumprod;  // size T + 1
    std::vector<int> spaced_steps;       // strictly decreasing, first element T

    double beta(int t) const { return betas.at(t - 1); }
    double alpha_bar(int t) const {
        if (t < 0 || t > T) throw ArgumentError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
        return alphas_cumprod[t];
    }
};

// s_i = T - floor(i * T / K) for i = 0..K-1: uniform stride, always contains T.
inline std::vector<int> spaced_timesteps(int T, int count) {
    if (count < 1 || count > T) throw ArgumentError("spacing count must lie in [1, T]");
    std::vector<int> s;
    for (int i = 0; i < count; ++i) s.push_back(T - static_cast<int>((static_cast<long>(i) * T) / count));
    return s;
}

inline NoiseSchedule make_schedule(int T = 1000, double beta_start = 1e-4, double beta_end = 0.02, int spacing = 50) {
    if (T < 1) throw ArgumentError("schedule needs T >= 1");
    if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1))
        throw ArgumentError("schedule needs 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.alphas_cumprod.push_back(1.0);
    for (int t = 1; t <= T; ++t) {
        const double b = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * (t - 1) / (T - 1);
        s.betas.push_back(b);
        s.alphas_cumprod.push_back(s.alphas_cumprod.back() * (1.0 - b));
    }
    s.spaced_steps = spaced_timesteps(T, spacing);
    return s;
}

// sqrt(a) * z0 + sqrt(1 - a) * eps for an explicit alpha_bar.
template <typename T>
nn::Var<T> mix_with_alpha(const nn::Var<T>& z0, const nn::Var<T>& eps, double alpha_bar) {
    if (z0.shape() != eps.shape()) throw ArgumentError("add_noise: z0 and eps differ in shape");
    if (alpha_bar < 0 || alpha_bar > 1) throw ArgumentError("add_noise: alpha_bar outside [0, 1]");
    const T a = static_cast<T>(std::sqrt(alpha_bar)), b = static_cast<T>(std::sqrt(1.0 - alpha_bar));
    std::vector<T> out(z0.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z0.values()[i] + b * eps.values()[i];
    return nn::Var<T>::from(z0.shape(), std::move(out));
}

// t in [0, T]; t = 0 returns z0 exactly.
template <typename T>
nn::Var<T> add_noise(const nn::Var<T>& z0, const nn::Var<T>& eps, int t, const NoiseSchedule& s) {
    if (t < 0 || t > s.T) throw ArgumentError("add_noise: timestep " + std::to_string(t) + " out of range");
    return mix_with_alpha(z0, eps, s.alpha_bar(t));
}

// Per-sample timesteps for a batch [N, ...].
template <typename T>
nn::Var<T> add_noise_batch(const nn::Var<T>& z0, const nn::Var<T>& eps, const std::vector<int>& ts,
                           const NoiseSchedule& s) {
    if (z0.shape() != eps.shape()) throw ArgumentError("add_noise: z0 and eps differ in shape");
    const int N = z0.dim(0);
    if (static_cast<int>(ts.size()) != N) throw ArgumentError("add_noise: one timestep per sample required");
    const std::size_t per = z0.size() / N;
    std::vector<T> out(z0.size());
    for (int n = 0; n < N; ++n) {
        if (ts[n] < 0 || ts[n] > s.T) throw ArgumentError("add_noise: timestep out of range");
        const double ab = s.alpha_bar(ts[n]);
        const T a = static_cast<T>(std::sqrt(ab)), b = static_cast<T>(std::sqrt(1.0 - ab));
        for (std::size_t i = n * per; i < (n + 1) * per; ++i) out[i] = a * z0.values()[i] + b * eps.values()[i];
    }
    return nn::Var<T>::from(z0.shape(), std::move(out));
}

// Reverse step between two spaced timesteps t > prev (prev = 0 at the end).
// x_prev = coef_x0 * x0_hat + coef_xt * x_t + sqrt(variance) * noise, with the
// lower-bound variance of the spaced posterior.
struct PosteriorStep {
    double coef_x0 = 0, coef_xt = 0, variance = 0;
    double sqrt_ab = 1, sqrt_one_minus_ab = 0;  // at t, for recovering x0_hat
};

inline PosteriorStep posterior_step(const NoiseSchedule& s, int t, int prev) {
    if (!(t > prev && prev >= 0 && t <= s.T)) throw ArgumentError("posterior_step: need T >= t > prev >= 0");
    const double ab_t = s.alpha_bar(t), ab_p = s.alpha_bar(prev);
    const double alpha = ab_t / ab_p, beta = 1.0 - alpha;
    PosteriorStep p;
    p.coef_x0 = std::sqrt(ab_p) * beta / (1.0 - ab_t);
    p.coef_xt = std::sqrt(alpha) * (1.0 - ab_p) / (1.0 - ab_t);
    p.variance = beta * (1.0 - ab_p) / (1.0 - ab_t);
    p.sqrt_ab = std::sqrt(ab_t);
    p.sqrt_one_minus_ab = std::sqrt(1.0 - ab_t);
    return p;
}

}  // namespace semsr::diffusion
