#pragma once

#include <functional>

#include <json.hpp>

#include "semsr/checkpoint.hpp"
#include "semsr/image/image.hpp"
#include "semsr/nn/optim.hpp"

namespace semsr::diffusion {

// Convolutional autoencoder with a diagonal-Gaussian posterior. One level per
// entry of widths; every level after the first halves the resolution, so the
// downscale factor is 2^(levels - 1). With pixel_shortcut, the avg-pooled
// RGB image is added to latent channels 0-2 and the decoder adds the
// upsampled latent channels 0-2 back to its output, so the networks only
// learn residual detail.
struct VaeConfig {
    std::vector<int> widths{16, 32, 64};
    int latent_channels = 4;
    int groups = 8;
    bool pixel_shortcut = true;

    int downscale() const { return 1 << (static_cast<int>(widths.size()) - 1); }

    void validate() const {
        if (widths.size() < 2) throw ConfigError("vae: need at least two levels");
        for (int w : widths)
            if (w < 1) throw ConfigError("vae: widths must be positive");
        if (latent_channels < (pixel_shortcut ? 3 : 1)) throw ConfigError("vae: too few latent channels");
    }
};

inline nlohmann::json to_json(const VaeConfig& c) {
    return {{"widths", c.widths}, {"latent_channels", c.latent_channels}, {"groups", c.groups},
            {"pixel_shortcut", c.pixel_shortcut}};
}

inline VaeConfig vae_config_from_json(const nlohmann::json& j) {
    VaeConfig c;
    c.widths = j.at("widths").get<std::vector<int>>();
    c.latent_channels = j.at("latent_channels").get<int>();
    c.groups = j.at("groups").get<int>();
    c.pixel_shortcut = j.at("pixel_shortcut").get<bool>();
    c.validate();
    return c;
}

template <typename T>
struct Vae {
    VaeConfig cfg;
    // encoder
    nn::Conv2d<T> enc_in;
    std::vector<nn::ResBlock<T>> enc_blocks;
    std::vector<nn::Conv2d<T>> enc_down;
    nn::GroupNorm<T> enc_norm;
    nn::Conv2d<T> enc_out;  // -> 2 * latent (mean, logvar)
    // decoder
    nn::Conv2d<T> dec_in;
    std::vector<nn::ResBlock<T>> dec_blocks;
    std::vector<nn::Conv2d<T>> dec_up;
    nn::GroupNorm<T> dec_norm;
    nn::Conv2d<T> dec_out;
    // per-channel latent normalization fitted after training: z = (mean - shift) / scale
    nn::Var<T> latent_shift, latent_scale;

    Vae() = default;
    Vae(const VaeConfig& c, std::uint64_t seed) : cfg(c) {
        cfg.validate();
        Rng rng(seed);
        const auto& w = cfg.widths;
        const int L = static_cast<int>(w.size());
        enc_in = nn::Conv2d<T>(3, w[0], 3, 1, rng);
        for (int i = 0; i < L; ++i) {
            enc_blocks.emplace_back(w[i], w[i], 0, cfg.groups, rng);
            if (i + 1 < L) enc_down.emplace_back(w[i], w[i + 1], 3, 2, rng);
        }
        enc_norm = nn::GroupNorm<T>(w.back(), cfg.groups);
        enc_out = nn::Conv2d<T>(w.back(), 2 * cfg.latent_channels, 3, 1, rng, cfg.pixel_shortcut);
        // start with a narrow posterior so early reconstructions are not swamped by sampling noise
        for (int c = cfg.latent_channels; c < 2 * cfg.latent_channels; ++c) enc_out.bias.values()[c] = T(-6);
        dec_in = nn::Conv2d<T>(cfg.latent_channels, w.back(), 3, 1, rng);
        for (int i = L - 1; i >= 0; --i) {
            dec_blocks.emplace_back(w[i], w[i], 0, cfg.groups, rng);
            if (i > 0) dec_up.emplace_back(w[i], w[i - 1], 3, 1, rng);
        }
        dec_norm = nn::GroupNorm<T>(w[0], cfg.groups);
        dec_out = nn::Conv2d<T>(w[0], 3, 3, 1, rng, cfg.pixel_shortcut);
        latent_shift = nn::Var<T>::zeros({cfg.latent_channels});
        latent_scale = nn::Var<T>::full({cfg.latent_channels}, T(1));
    }

    bool initialized() const { return enc_in.weight.defined(); }

    struct Posterior {
        nn::Var<T> mean, logvar;  // [N, latent, h, w], unnormalized
    };

    // x: [N, 3, H, W] on [-1, 1].
    Posterior encode_posterior(const nn::Var<T>& x) const {
        if (!initialized()) throw StateError("vae is not initialized");
        const int f = cfg.downscale();
        if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) % f || x.dim(3) % f)
            throw ArgumentError("vae: image sides must be divisible by " + std::to_string(f) + ", got " +
                                nn::to_string(x.shape()));
        auto h = enc_in(x);
        for (std::size_t i = 0; i < enc_blocks.size(); ++i) {
            h = enc_blocks[i](h);
            if (i < enc_down.size()) h = enc_down[i](h);
        }
        h = enc_out(nn::silu(enc_norm(h)));
        const int C = cfg.latent_channels;
        Posterior p{nn::slice_channels(h, 0, C), nn::slice_channels(h, C, 2 * C)};
        if (cfg.pixel_shortcut) {
            auto pooled = nn::avg_pool(x, f);
            if (C > 3) {
                pooled = nn::concat_channels(
                    pooled, nn::Var<T>::zeros({x.dim(0), C - 3, pooled.dim(2), pooled.dim(3)}));
            }
            p.mean = nn::add(p.mean, pooled);
        }
        return p;
    }

    // z: unnormalized latent. Returns [-1, 1]-scale image (unclamped).
    nn::Var<T> decode_raw(const nn::Var<T>& z) const {
        if (!initialized()) throw StateError("vae is not initialized");
        if (z.rank() != 4 || z.dim(1) != cfg.latent_channels)
            throw ArgumentError("vae: latent must be [N, " + std::to_string(cfg.latent_channels) + ", h, w], got " +
                                nn::to_string(z.shape()));
        auto h = dec_in(z);
        for (std::size_t i = 0; i < dec_blocks.size(); ++i) {
            h = dec_blocks[i](h);
            if (i < dec_up.size()) h = dec_up[i](nn::upsample_nearest2x(h));
        }
        h = dec_out(nn::silu(dec_norm(h)));
        if (cfg.pixel_shortcut) {
            auto base = nn::slice_channels(z, 0, 3);
            for (int k = 1; k < cfg.downscale(); k *= 2) base = nn::upsample_nearest2x(base);
            h = nn::add(h, base);
        }
        return h;
    }

    nn::Var<T> normalize(const nn::Var<T>& mean) const { return affine(mean, true); }
    nn::Var<T> denormalize(const nn::Var<T>& z) const { return affine(z, false); }

    nn::ParamList<T> params() const {
        nn::ParamList<T> p;
        enc_in.collect("enc_in", p);
        for (std::size_t i = 0; i < enc_blocks.size(); ++i) enc_blocks[i].collect("enc_block" + std::to_string(i), p);
        for (std::size_t i = 0; i < enc_down.size(); ++i) enc_down[i].collect("enc_down" + std::to_string(i), p);
        enc_norm.collect("enc_norm", p);
        enc_out.collect("enc_out", p);
        dec_in.collect("dec_in", p);
        for (std::size_t i = 0; i < dec_blocks.size(); ++i) dec_blocks[i].collect("dec_block" + std::to_string(i), p);
        for (std::size_t i = 0; i < dec_up.size(); ++i) dec_up[i].collect("dec_up" + std::to_string(i), p);
        dec_norm.collect("dec_norm", p);
        dec_out.collect("dec_out", p);
        return p;
    }

    nn::ParamList<T> all_params() const {
        auto p = params();
        p.push_back({"latent_shift", latent_shift});
        p.push_back({"latent_scale", latent_scale});
        return p;
    }

private:
    nn::Var<T> affine(const nn::Var<T>& z, bool forward) const {
        const int N = z.dim(0), C = z.dim(1);
        const std::size_t inner = z.size() / (static_cast<std::size_t>(N) * C);
        nn::Buffer<T> out(z.values());
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const T s = latent_scale.values()[c], m = latent_shift.values()[c];
                for (std::size_t i = 0; i < inner; ++i) {
                    T& v = out[(static_cast<std::size_t>(n) * C + c) * inner + i];
                    v = forward ? (v - m) / s : v * s + m;
                }
            }
        return nn::Var<T>::from(z.shape(), std::move(out));
    }
};

// Deterministic encode (posterior mean) to the normalized latent space used by
// the diffusion model.
inline nn::Var<float> vae_encode(const Vae<float>& vae, const std::vector<const ImageTensor*>& images) {
    nn::NoGradGuard ng;
    return vae.normalize(vae.encode_posterior(to_batch<float>(images, -1.0f, 1.0f)).mean);
}

inline std::vector<ImageTensor> vae_decode(const Vae<float>& vae, const nn::Var<float>& z) {
    nn::NoGradGuard ng;
    auto images = from_batch(vae.decode_raw(vae.denormalize(z)), -1.0f, 1.0f);
    for (auto& im : images) im.clamp01();
    return images;
}

// ---------------------------------------------------------------- training

struct VaeTrainOptions {
    int steps = 1500;
    int batch = 16;
    double lr = 2e-3;
    double kl_weight = 1e-6;
    std::uint64_t seed = 0;
};

struct VaeTrainResult {
    Vae<float> vae;
    double heldout_psnr_initial = 0;
    double heldout_psnr_final = 0;
};

inline double vae_reconstruction_psnr(const Vae<float>& vae, const std::vector<ImageTensor>& images) {
    if (images.empty()) return 0;
    double total = 0;
    for (std::size_t b = 0; b < images.size(); b += 32) {
        std::vector<const ImageTensor*> chunk;
        for (std::size_t i = b; i < std::min(images.size(), b + 32); ++i) chunk.push_back(&images[i]);
        const auto rec = vae_decode(vae, vae_encode(vae, chunk));
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            double mse = 0;
            for (std::size_t k = 0; k < rec[i].size(); ++k) {
                const double d = rec[i].data[k] - chunk[i]->data[k];
                mse += d * d;
            }
            mse /= rec[i].size();
            total += mse > 0 ? std::min(100.0, 10 * std::log10(1.0 / mse)) : 100.0;
        }
    }
    return total / images.size();
}

// Fits per-channel shift/scale so the normalized posterior means have zero
// mean and unit variance over the given images.
inline void fit_latent_normalization(Vae<float>& vae, const std::vector<ImageTensor>& images) {
    const int C = vae.cfg.latent_channels;
    std::vector<double> s(C, 0), ss(C, 0);
    double count = 0;
    nn::NoGradGuard ng;
    for (std::size_t b = 0; b < images.size(); b += 32) {
        std::vector<const ImageTensor*> chunk;
        for (std::size_t i = b; i < std::min(images.size(), b + 32); ++i) chunk.push_back(&images[i]);
        const auto m = vae.encode_posterior(to_batch<float>(chunk, -1.0f, 1.0f)).mean;
        const int N = m.dim(0);
        const std::size_t inner = m.size() / (static_cast<std::size_t>(N) * C);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (std::size_t i = 0; i < inner; ++i) {
                    const double v = m.values()[(static_cast<std::size_t>(n) * C + c) * inner + i];
                    s[c] += v;
                    ss[c] += v * v;
                }
        count += static_cast<double>(N) * inner;
    }
    for (int c = 0; c < C; ++c) {
        const double mean = s[c] / count;
        const double var = std::max(ss[c] / count - mean * mean, 1e-8);
        vae.latent_shift.values()[c] = static_cast<float>(mean);
        vae.latent_scale.values()[c] = static_cast<float>(std::sqrt(var));
    }
}

inline VaeTrainResult train_vae(const std::vector<ImageTensor>& train, const std::vector<ImageTensor>& heldout,
                                const VaeConfig& cfg, const VaeTrainOptions& opt,
                                const std::function<void(const nlohmann::json&)>& log = nullptr) {
    if (train.empty()) throw ArgumentError("train_vae: empty dataset");
    VaeTrainResult r;
    r.vae = Vae<float>(cfg, derive_seed(opt.seed, 31));
    r.heldout_psnr_initial = vae_reconstruction_psnr(r.vae, heldout);
    nn::Adam<float> adam(r.vae.params(), {.lr = opt.lr, .clip_norm = 1.0});
    Rng rng(derive_seed(opt.seed, 32));
    for (int step = 0; step < opt.steps; ++step) {
        // cosine decay to 10% of the base rate
        adam.set_lr(opt.lr * (0.1 + 0.9 * 0.5 * (1 + std::cos(M_PI * step / std::max(1, opt.steps)))));
        std::vector<const ImageTensor*> batch;
        for (int b = 0; b < opt.batch; ++b) batch.push_back(&train[rng.uniform_int(0, static_cast<long>(train.size()) - 1)]);
        const auto x = to_batch<float>(batch, -1.0f, 1.0f);
        const auto post = r.vae.encode_posterior(x);
        std::vector<float> noise(post.mean.size());
        for (auto& e : noise) e = static_cast<float>(rng.normal());
        // reparameterized sample: mean + exp(logvar / 2) * noise
        auto z = nn::add(post.mean,
                         nn::mul(nn::exp(nn::scale(post.logvar, 0.5f)), nn::Var<float>::from(post.mean.shape(), noise)));
        auto rec = nn::mse_loss(r.vae.decode_raw(z), x);
        auto loss = nn::add(rec, nn::scale(nn::gaussian_kl(post.mean, post.logvar), static_cast<float>(opt.kl_weight)));
        adam.zero_grad();
        nn::backward(loss);
        adam.step();
        if (log && (step % 50 == 0 || step + 1 == opt.steps))
            log({{"stage", "vae"}, {"step", step}, {"loss", loss.item()}, {"recon_mse", rec.item()}});
    }
    fit_latent_normalization(r.vae, train);
    r.heldout_psnr_final = vae_reconstruction_psnr(r.vae, heldout);
    return r;
}

inline Checkpoint vae_checkpoint(const Vae<float>& vae) {
    Checkpoint ck;
    ck.kind = "vae";
    ck.hparams = {{"vae", to_json(vae.cfg)}};
    ck.put(vae.all_params());
    return ck;
}

inline Vae<float> load_vae(const Checkpoint& ck) {
    if (ck.kind != "vae") throw StateError("expected a vae checkpoint, got '" + ck.kind + "'");
    Vae<float> vae(vae_config_from_json(ck.hparams.at("vae")), 0);
    ck.get(vae.all_params());
    return vae;
}

}  // namespace semsr::diffusion
