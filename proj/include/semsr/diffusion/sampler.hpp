#pragma once

#include "semsr/diffusion/training.hpp"

namespace semsr::diffusion {

struct SamplerConfig {
    int steps = 50;
    bool use_lre = true;
    std::uint64_t seed = 0;
    double guidance_scale = 1.0;  // 1 disables guidance
    int lre_timestep = 0;         // 0: start LRE at max(spaced_steps)

    void validate(int T) const {
        if (steps < 1 || steps > T)
            throw ArgumentError("sampler: steps must lie in [1, " + std::to_string(T) + "], got " + std::to_string(steps));
        if (lre_timestep < 0 || lre_timestep > T) throw ArgumentError("sampler: lre_timestep out of range");
        if (!(guidance_scale >= 0)) throw ArgumentError("sampler: guidance_scale must be >= 0");
    }
};

// One noise stream per sample, keyed by a stable id, so a sample's output
// does not depend on what else shares its batch.
inline std::vector<Rng> sample_streams(std::uint64_t seed, const std::vector<std::uint64_t>& ids) {
    std::vector<Rng> out;
    for (auto id : ids) out.emplace_back(derive_seed(seed, 1000 + id));
    return out;
}

inline std::vector<std::uint64_t> default_ids(int n) {
    std::vector<std::uint64_t> ids(n);
    for (int i = 0; i < n; ++i) ids[i] = static_cast<std::uint64_t>(i);
    return ids;
}

inline nn::Var<float> draw_per_sample(const nn::Shape& shape, std::vector<Rng>& streams) {
    if (static_cast<int>(streams.size()) != shape[0]) throw ArgumentError("sampler: one noise stream per sample required");
    const std::size_t per = nn::numel(shape) / shape[0];
    std::vector<float> v;
    v.reserve(nn::numel(shape));
    for (auto& r : streams)
        for (std::size_t k = 0; k < per; ++k) v.push_back(static_cast<float>(r.normal()));
    return nn::Var<float>::from(shape, std::move(v));
}

inline int lre_start(const NoiseSchedule& s, const SamplerConfig& cfg) {
    if (cfg.lre_timestep > 0) return cfg.lre_timestep;
    const auto ts = spaced_timesteps(s.T, cfg.steps);
    return *std::max_element(ts.begin(), ts.end());
}

// With LRE the start is add_noise(z_lr, eps, t_start); otherwise pure eps.
inline nn::Var<float> initial_latent(const nn::Var<float>& z_lr, const NoiseSchedule& s, const SamplerConfig& cfg,
                                     std::vector<Rng>& streams) {
    cfg.validate(s.T);
    if (z_lr.rank() != 4) throw ArgumentError("initial_latent: expected [N, C, h, w], got " + nn::to_string(z_lr.shape()));
    const auto eps = draw_per_sample(z_lr.shape(), streams);
    if (!cfg.use_lre) return eps;
    return add_noise(z_lr, eps, lre_start(s, cfg), s);
}

inline nn::Var<float> initial_latent(const nn::Var<float>& z_lr, const NoiseSchedule& s, const SamplerConfig& cfg) {
    auto streams = sample_streams(cfg.seed, default_ids(z_lr.dim(0)));
    return initial_latent(z_lr, s, cfg, streams);
}

struct SampleRequest {
    std::vector<const ImageTensor*> lr;
    std::vector<TagSet> hard;
    std::vector<nn::Var<float>> soft;  // [S, D] each; undefined entries become the null (zero) soft prompt
    std::vector<std::uint64_t> ids;    // noise stream keys; defaults to 0..N-1
    int out_h = 0, out_w = 0;
};

struct SampleResult {
    std::vector<ImageTensor> images;
    nn::Var<float> z_lr;      // VAE latent of the bicubic-upsampled LR
    nn::Var<float> z_start;   // initial latent
    nn::Var<float> z_final;
};

inline nn::Var<float> soft_batch(const std::vector<nn::Var<float>>& soft, int S, int D) {
    std::vector<float> out;
    out.reserve(soft.size() * S * D);
    for (const auto& s : soft) {
        if (!s.defined()) {
            out.insert(out.end(), static_cast<std::size_t>(S) * D, 0.0f);
            continue;
        }
        if (s.rank() != 2 || s.dim(0) != S || s.dim(1) != D)
            throw ArgumentError("sampler: soft prompt must be [" + std::to_string(S) + ", " + std::to_string(D) +
                                "], got " + nn::to_string(s.shape()));
        out.insert(out.end(), s.values().begin(), s.values().end());
    }
    return nn::Var<float>::from({static_cast<int>(soft.size()), S, D}, std::move(out));
}

// Spaced DDPM reverse process from initial_latent down the spaced steps; the
// last step returns the posterior mean. soft_tokens is the soft prompt length
// S expected by the model.
inline SampleResult sample(const ControlledUNet<float>& model, const Vae<float>& vae, const TextEncoder& text,
                           const SampleRequest& req, int soft_tokens, const NoiseSchedule& s, const SamplerConfig& cfg) {
    cfg.validate(s.T);
    const int N = static_cast<int>(req.lr.size());
    if (N == 0) return {};
    if (static_cast<int>(req.hard.size()) != N || static_cast<int>(req.soft.size()) != N)
        throw ArgumentError("sample: need one hard and one soft prompt per image");
    if (req.out_h % vae.cfg.downscale() || req.out_w % vae.cfg.downscale() || req.out_h <= 0)
        throw ArgumentError("sample: output size must be a positive multiple of the VAE downscale");
    nn::NoGradGuard ng;
    SampleResult res;
    std::vector<ImageTensor> up;
    for (const auto* im : req.lr) up.push_back(resize(*im, req.out_h, req.out_w, ResizeMode::bicubic));
    const auto lr_cond = to_batch<float>(up, -1.0f, 1.0f);
    res.z_lr = vae.normalize(vae.encode_posterior(lr_cond).mean);
    const auto ctx = text.encode<float>(req.hard);
    const auto uncond_ctx = text.encode<float>(std::vector<TagSet>(N));
    const auto soft = soft_batch(req.soft, soft_tokens, model.base.cfg.soft_dim);
    const auto uncond_soft = soft_batch(std::vector<nn::Var<float>>(N), soft_tokens, model.base.cfg.soft_dim);

    auto streams = sample_streams(cfg.seed, req.ids.empty() ? default_ids(N) : req.ids);
    if (static_cast<int>(streams.size()) != N) throw ArgumentError("sample: one id per image required");
    auto z = initial_latent(res.z_lr, s, cfg, streams);
    res.z_start = z;
    const auto ts = spaced_timesteps(s.T, cfg.steps);
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i], prev = i + 1 < ts.size() ? ts[i + 1] : 0;
        const std::vector<int> steps(N, t);
        auto eps = model.predict_noise(z, steps, lr_cond, ctx, soft);
        if (cfg.guidance_scale != 1.0) {
            const auto eu = model.predict_noise(z, steps, lr_cond, uncond_ctx, uncond_soft);
            eps = nn::weighted_sum(eu, static_cast<float>(1.0 - cfg.guidance_scale), eps,
                                   static_cast<float>(cfg.guidance_scale));
        }
        const auto p = posterior_step(s, t, prev);
        std::vector<float> next(z.size());
        const auto noise = prev > 0 ? draw_per_sample(z.shape(), streams) : nn::Var<float>{};
        for (std::size_t k = 0; k < next.size(); ++k) {
            const double zt = z.values()[k];
            const double x0 = (zt - p.sqrt_one_minus_ab * eps.values()[k]) / p.sqrt_ab;
            double v = p.coef_x0 * x0 + p.coef_xt * zt;
            if (prev > 0) v += std::sqrt(p.variance) * noise.values()[k];
            next[k] = static_cast<float>(v);
        }
        z = nn::Var<float>::from(z.shape(), std::move(next));
    }
    res.z_final = z;
    res.images = vae_decode(vae, z);
    return res;
}

}  // namespace semsr::diffusion
