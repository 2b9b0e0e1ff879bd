#pragma once

#include <functional>

#include "semsr/diffusion/schedule.hpp"
#include "semsr/diffusion/text_encoder.hpp"
#include "semsr/diffusion/unet.hpp"
#include "semsr/diffusion/vae.hpp"
#include "semsr/image/resize.hpp"
#include "semsr/nn/optim.hpp"
#include "semsr/tagging/dape.hpp"

namespace semsr::diffusion {

using LogFn = std::function<void(const nlohmann::json&)>;

// Rows idx of a [N, ...] tensor, as a fresh constant of scalar type T.
template <typename T, typename U>
nn::Var<T> gather_rows(const nn::Var<U>& all, const std::vector<int>& idx) {
    const std::size_t per = all.size() / all.dim(0);
    std::vector<T> out;
    out.reserve(idx.size() * per);
    for (int i : idx) {
        if (i < 0 || i >= all.dim(0)) throw ArgumentError("gather_rows: index out of range");
        for (std::size_t k = 0; k < per; ++k) out.push_back(static_cast<T>(all.values()[i * per + k]));
    }
    nn::Shape s = all.shape();
    s[0] = static_cast<int>(idx.size());
    return nn::Var<T>::from(std::move(s), std::move(out));
}

template <typename T>
nn::Var<T> standard_normal(const nn::Shape& shape, Rng& rng) {
    std::vector<T> v(nn::numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.normal());
    return nn::Var<T>::from(shape, std::move(v));
}

// Bicubic upsample of each LR image to (h, w), mapped to [-1, 1].
inline nn::Var<float> lr_condition(const std::vector<const ImageTensor*>& lr, int h, int w) {
    std::vector<ImageTensor> up;
    up.reserve(lr.size());
    for (const auto* im : lr) up.push_back(resize(*im, h, w, ResizeMode::bicubic));
    return to_batch<float>(up, -1.0f, 1.0f);
}

struct NoiseDraw {
    std::vector<int> steps;
    nn::Var<double> eps;  // kept in double so both scalar types see the same draw
};

inline NoiseDraw draw_noise(const nn::Shape& shape, const NoiseSchedule& s, Rng& rng) {
    NoiseDraw d;
    for (int n = 0; n < shape[0]; ++n) d.steps.push_back(static_cast<int>(rng.uniform_int(1, s.T)));
    d.eps = standard_normal<double>(shape, rng);
    return d;
}

// Noise-prediction MSE: samples t ~ U[1, T] and eps ~ N(0, I) from rng,
// builds z_t = add_noise(z0, eps, t) and compares eps with the model's
// prediction. predict(z_t, steps) supplies the model call.
template <typename T, typename Predict>
nn::Var<T> noise_prediction_loss(const Predict& predict, const nn::Var<T>& z0, const NoiseSchedule& s, Rng& rng) {
    const auto d = draw_noise(z0.shape(), s, rng);
    const auto eps = nn::Var<T>::from(z0.shape(), std::vector<T>(d.eps.values().begin(), d.eps.values().end()));
    const auto zt = add_noise_batch(z0, eps, d.steps, s);
    return nn::mse_loss(predict(zt, d.steps), eps);
}

template <typename T, typename Model>
nn::Var<T> sr_training_loss(const Model& model, const nn::Var<T>& z0, const nn::Var<T>& lr, const nn::Var<T>& text,
                            const nn::Var<T>& soft, const NoiseSchedule& s, Rng& rng) {
    return noise_prediction_loss<T>(
        [&](const nn::Var<T>& zt, const std::vector<int>& steps) { return model.predict_noise(zt, steps, lr, text, soft); },
        z0, s, rng);
}

// ---------------------------------------------------------------- base model

struct DiffusionTrainOptions {
    int steps = 3000;
    int batch = 16;
    double lr = 1e-3;
    double prompt_dropout = 0.1;  // per sample: text prompt replaced by the null prompt
    double soft_dropout = 0.1;    // SR only: soft prompt replaced by zeros
    int heldout_batches = 4;
    std::uint64_t seed = 0;

    void validate() const {
        if (steps < 0 || batch < 1 || lr <= 0) throw ConfigError("diffusion: invalid optimizer settings");
        if (prompt_dropout < 0 || prompt_dropout > 1 || soft_dropout < 0 || soft_dropout > 1)
            throw ConfigError("diffusion: dropout rates must lie in [0, 1]");
    }
};

struct LatentSet {
    nn::Var<float> z0;         // [N, C, h, w], normalized VAE latents
    nn::Var<float> text;       // [N, L, Dt]
    nn::Var<float> null_text;  // [1, L, Dt]
    nn::Var<float> lr;         // [N, 3, H, W] (SR only)
    nn::Var<float> soft;       // [N, S, Ds] (SR only)
    int size() const { return z0.defined() ? z0.dim(0) : 0; }
};

inline std::vector<int> sample_indices(int n, int batch, Rng& rng) {
    std::vector<int> idx(batch);
    for (auto& i : idx) i = static_cast<int>(rng.uniform_int(0, n - 1));
    return idx;
}

// Replaces rows of x by row 0 of fill (or zeros when fill is undefined) with
// probability rate each.
inline nn::Var<float> drop_rows(nn::Var<float> x, const nn::Var<float>& fill, double rate, Rng& rng) {
    if (rate <= 0) return x;
    const std::size_t per = x.size() / x.dim(0);
    nn::Buffer<float> v(x.values());
    for (int n = 0; n < x.dim(0); ++n)
        if (rng.bernoulli(rate))
            for (std::size_t k = 0; k < per; ++k) v[n * per + k] = fill.defined() ? fill.values()[k] : 0.0f;
    return nn::Var<float>::from(x.shape(), std::move(v));
}

inline LatentSet encode_latents(const Vae<float>& vae, const TextEncoder& text,
                                const std::vector<const ImageTensor*>& images, const std::vector<TagSet>& tags) {
    if (images.size() != tags.size()) throw ArgumentError("encode_latents: images and tags differ in count");
    if (images.empty()) throw ArgumentError("encode_latents: empty dataset");
    LatentSet set;
    std::vector<float> z;
    nn::Shape zs;
    for (std::size_t b = 0; b < images.size(); b += 64) {
        std::vector<const ImageTensor*> chunk(images.begin() + b, images.begin() + std::min(images.size(), b + 64));
        const auto zc = vae_encode(vae, chunk);
        z.insert(z.end(), zc.values().begin(), zc.values().end());
        zs = zc.shape();
    }
    zs[0] = static_cast<int>(images.size());
    set.z0 = nn::Var<float>::from(zs, std::move(z));
    set.text = text.encode<float>(tags);
    set.null_text = text.encode<float>({TagSet{}});
    return set;
}

// Held-out noise-prediction loss with a fixed draw of (t, eps), so values at
// different training steps are comparable.
template <typename Predict>
double heldout_loss(const Predict& predict, const LatentSet& set, int batches, int batch, const NoiseSchedule& s,
                    std::uint64_t seed) {
    if (set.size() == 0 || batches <= 0) return 0;
    nn::NoGradGuard ng;
    Rng rng(seed);
    double total = 0;
    for (int b = 0; b < batches; ++b) {
        std::vector<int> idx(std::min(batch, set.size()));
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>((b * idx.size() + i) % set.size());
        total += noise_prediction_loss<float>(
                     [&](const nn::Var<float>& zt, const std::vector<int>& steps) { return predict(zt, steps, idx); },
                     gather_rows<float>(set.z0, idx), s, rng)
                     .item();
    }
    return total / batches;
}

struct BaseTrainResult {
    UNet<float> unet;
    double heldout_initial = 0, heldout_final = 0;
};

inline BaseTrainResult train_base(const LatentSet& train, const LatentSet& heldout, const UNetConfig& ucfg,
                                  const NoiseSchedule& s, const DiffusionTrainOptions& opt, const LogFn& log = nullptr) {
    opt.validate();
    if (train.size() == 0) throw ArgumentError("train_base: empty dataset");
    BaseTrainResult r;
    r.unet = UNet<float>(ucfg, derive_seed(opt.seed, 41));
    auto& unet = r.unet;
    auto predict_heldout = [&](const nn::Var<float>& zt, const std::vector<int>& steps, const std::vector<int>& idx) {
        return unet.forward(zt, steps, gather_rows<float>(heldout.text, idx));
    };
    const auto eval_seed = derive_seed(opt.seed, 42);
    r.heldout_initial = heldout_loss(predict_heldout, heldout, opt.heldout_batches, opt.batch, s, eval_seed);
    nn::Adam<float> adam(unet.params(), {.lr = opt.lr, .clip_norm = 1.0});
    Rng rng(derive_seed(opt.seed, 43));
    for (int step = 0; step < opt.steps; ++step) {
        adam.set_lr(opt.lr * (0.1 + 0.9 * 0.5 * (1 + std::cos(M_PI * step / std::max(1, opt.steps)))));
        const auto idx = sample_indices(train.size(), opt.batch, rng);
        const auto text = drop_rows(gather_rows<float>(train.text, idx), train.null_text, opt.prompt_dropout, rng);
        auto loss = noise_prediction_loss<float>(
            [&](const nn::Var<float>& zt, const std::vector<int>& steps) { return unet.forward(zt, steps, text); },
            gather_rows<float>(train.z0, idx), s, rng);
        adam.zero_grad();
        nn::backward(loss);
        adam.step();
        if (log && (step % 50 == 0 || step + 1 == opt.steps))
            log({{"stage", "base"}, {"step", step}, {"loss", loss.item()}});
    }
    r.heldout_final = heldout_loss(predict_heldout, heldout, opt.heldout_batches, opt.batch, s, eval_seed);
    return r;
}

// ---------------------------------------------------------------- SR stage

// Conditioning for SR: z0 from the frozen VAE on HR, LR condition image, hard
// prompt through the frozen text encoder and soft prompt, both from the
// frozen DAPE on LR.
inline LatentSet encode_sr_set(const Vae<float>& vae, const TextEncoder& text, const tagging::TagModel<float>& dape,
                               const std::vector<const ImageTensor*>& hr, const std::vector<const ImageTensor*>& lr,
                               double threshold) {
    if (hr.size() != lr.size()) throw ArgumentError("encode_sr_set: HR and LR counts differ");
    const auto bundles = tagging::extract_prompts(dape, text.vocab, lr, threshold);
    std::vector<TagSet> hard;
    std::vector<const tagging::PromptBundle*> bp;
    for (const auto& b : bundles) {
        hard.push_back(b.hard);
        bp.push_back(&b);
    }
    auto set = encode_latents(vae, text, hr, hard);
    set.lr = lr_condition(lr, hr.front()->height, hr.front()->width);
    set.soft = tagging::stack_soft<float>(bp);
    return set;
}

struct FrozenChecksums {
    std::uint64_t base = 0, vae = 0, text = 0, dape = 0;
    bool operator==(const FrozenChecksums&) const = default;
};

inline FrozenChecksums frozen_checksums(const UNet<float>& base, const Vae<float>& vae, const TextEncoder& text,
                                        const tagging::TagModel<float>& dape) {
    return {nn::checksum(base.params()), nn::checksum(vae.all_params()), nn::checksum(text.params()),
            nn::checksum(dape.all_params())};
}

struct SrTrainResult {
    ControlledUNet<float> model;
    double heldout_initial = 0, heldout_final = 0;
    FrozenChecksums before, after;
    std::uint64_t base_in_model_before = 0, base_in_model_after = 0;
};

inline SrTrainResult train_sr(const UNet<float>& base, const Vae<float>& vae, const TextEncoder& text,
                              const tagging::TagModel<float>& dape, const LatentSet& train, const LatentSet& heldout,
                              const ControlConfig& ccfg, const NoiseSchedule& s, const DiffusionTrainOptions& opt,
                              const LogFn& log = nullptr) {
    opt.validate();
    if (!base.initialized()) throw StateError("train_sr: base unet checkpoint missing");
    if (!vae.initialized()) throw StateError("train_sr: vae checkpoint missing");
    if (!text.table.defined()) throw StateError("train_sr: text encoder missing");
    if (!dape.initialized()) throw StateError("train_sr: dape checkpoint missing");
    if (train.size() == 0 || !train.lr.defined() || !train.soft.defined())
        throw ArgumentError("train_sr: dataset lacks SR conditioning");
    SrTrainResult r;
    r.before = frozen_checksums(base, vae, text, dape);
    r.model = ControlledUNet<float>(base, ccfg, derive_seed(opt.seed, 51));
    auto& m = r.model;
    r.base_in_model_before = nn::checksum(m.base_params());
    nn::set_trainable(m.base_params(), false);

    auto predict_heldout = [&](const nn::Var<float>& zt, const std::vector<int>& steps, const std::vector<int>& idx) {
        return m.predict_noise(zt, steps, gather_rows<float>(heldout.lr, idx), gather_rows<float>(heldout.text, idx),
                               gather_rows<float>(heldout.soft, idx));
    };
    const auto eval_seed = derive_seed(opt.seed, 52);
    r.heldout_initial = heldout_loss(predict_heldout, heldout, opt.heldout_batches, opt.batch, s, eval_seed);

    nn::Adam<float> adam(m.trainable_params(), {.lr = opt.lr, .clip_norm = 1.0});
    Rng rng(derive_seed(opt.seed, 53));
    for (int step = 0; step < opt.steps; ++step) {
        adam.set_lr(opt.lr * (0.1 + 0.9 * 0.5 * (1 + std::cos(M_PI * step / std::max(1, opt.steps)))));
        const auto idx = sample_indices(train.size(), opt.batch, rng);
        const auto txt = drop_rows(gather_rows<float>(train.text, idx), train.null_text, opt.prompt_dropout, rng);
        const auto soft = drop_rows(gather_rows<float>(train.soft, idx), {}, opt.soft_dropout, rng);
        auto loss = sr_training_loss<float>(m, gather_rows<float>(train.z0, idx), gather_rows<float>(train.lr, idx), txt,
                                            soft, s, rng);
        adam.zero_grad();
        nn::backward(loss);
        adam.step();
        if (log && (step % 50 == 0 || step + 1 == opt.steps))
            log({{"stage", "sr"}, {"step", step}, {"loss", loss.item()}});
    }
    nn::set_trainable(m.base_params(), true);
    r.heldout_final = heldout_loss(predict_heldout, heldout, opt.heldout_batches, opt.batch, s, eval_seed);
    r.base_in_model_after = nn::checksum(m.base_params());
    r.after = frozen_checksums(base, vae, text, dape);
    return r;
}

}  // namespace semsr::diffusion
