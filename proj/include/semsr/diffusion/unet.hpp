#pragma once

#include <json.hpp>

#include "semsr/checkpoint.hpp"
#include "semsr/nn/layers.hpp"

namespace semsr::diffusion {

struct UNetConfig {
    std::vector<int> widths{32, 64};  // one entry per resolution level
    int latent_channels = 4;
    int time_dim = 128;
    int text_dim = 32;   // TextEncoder width
    int soft_dim = 64;   // tagger representation width
    int groups = 8;

    void validate() const {
        if (widths.empty()) throw ConfigError("unet: widths must not be empty");
        for (int w : widths)
            if (w < 1) throw ConfigError("unet: widths must be positive");
        if (latent_channels < 1 || time_dim < 2 || text_dim < 1 || soft_dim < 1 || groups < 1)
            throw ConfigError("unet: invalid dimensions");
    }
    int levels() const { return static_cast<int>(widths.size()); }
};

inline nlohmann::json to_json(const UNetConfig& c) {
    return {{"widths", c.widths},     {"latent_channels", c.latent_channels}, {"time_dim", c.time_dim},
            {"text_dim", c.text_dim}, {"soft_dim", c.soft_dim},               {"groups", c.groups}};
}

inline UNetConfig unet_config_from_json(const nlohmann::json& j) {
    UNetConfig c;
    c.widths = j.at("widths").get<std::vector<int>>();
    c.latent_channels = j.at("latent_channels").get<int>();
    c.time_dim = j.at("time_dim").get<int>();
    c.text_dim = j.at("text_dim").get<int>();
    c.soft_dim = j.at("soft_dim").get<int>();
    c.groups = j.at("groups").get<int>();
    c.validate();
    return c;
}

// Transformer block over the spatial tokens: self-attention, then text
// cross-attention (TCA), then representation cross-attention (RCA). RCA's
// output projection starts at zero, so the block is unchanged by RCA until it
// is trained. RCA is skipped entirely when no soft prompt is given.
template <typename T>
struct AttnBlock {
    nn::LayerNorm<T> ln_sa, ln_tca, ln_rca;
    nn::Attention<T> sa, tca, rca;

    AttnBlock() = default;
    AttnBlock(int channels, int text_dim, int soft_dim, Rng& rng)
        : ln_sa(channels),
          ln_tca(channels),
          ln_rca(channels),
          sa(channels, channels, channels, rng),
          tca(channels, text_dim, channels, rng),
          rca(channels, soft_dim, channels, rng, true) {}

    nn::Var<T> operator()(const nn::Var<T>& x, const nn::Var<T>& text, const nn::Var<T>& soft) const {
        auto t = nn::to_tokens(x);
        auto h = ln_sa(t);
        t = nn::add(t, sa(h, h));
        if (text.defined()) t = nn::add(t, tca(ln_tca(t), text));
        if (soft.defined()) t = nn::add(t, rca(ln_rca(t), soft));
        return nn::from_tokens(t, x.dim(2), x.dim(3));
    }

    void collect(const std::string& prefix, nn::ParamList<T>& out) const {
        ln_sa.collect(prefix + ".ln_sa", out);
        sa.collect(prefix + ".sa", out);
        ln_tca.collect(prefix + ".ln_tca", out);
        tca.collect(prefix + ".tca", out);
    }
    void collect_rca(const std::string& prefix, nn::ParamList<T>& out) const {
        ln_rca.collect(prefix + ".ln_rca", out);
        rca.collect(prefix + ".rca", out);
    }
};

template <typename T>
struct EncoderFeatures {
    std::vector<nn::Var<T>> skips;  // one per level, before downsampling
    nn::Var<T> mid;
};

// Time embedding, input conv, down path and middle block. The UNet owns one;
// the control branch owns a trainable clone.
template <typename T>
struct UNetEncoder {
    nn::Linear<T> time1, time2;
    nn::Conv2d<T> conv_in;
    std::vector<nn::ResBlock<T>> res;
    std::vector<AttnBlock<T>> attn;
    std::vector<nn::Conv2d<T>> down;
    nn::ResBlock<T> mid_res;
    AttnBlock<T> mid_attn;
    int base_width = 0;

    UNetEncoder() = default;
    UNetEncoder(const UNetConfig& c, Rng& rng) : base_width(c.widths[0]) {
        time1 = nn::Linear<T>(c.widths[0], c.time_dim, rng);
        time2 = nn::Linear<T>(c.time_dim, c.time_dim, rng);
        conv_in = nn::Conv2d<T>(c.latent_channels, c.widths[0], 3, 1, rng);
        int cur = c.widths[0];
        for (int i = 0; i < c.levels(); ++i) {
            res.emplace_back(cur, c.widths[i], c.time_dim, c.groups, rng);
            attn.emplace_back(c.widths[i], c.text_dim, c.soft_dim, rng);
            cur = c.widths[i];
            if (i + 1 < c.levels()) down.emplace_back(cur, cur, 3, 2, rng);
        }
        mid_res = nn::ResBlock<T>(cur, cur, c.time_dim, c.groups, rng);
        mid_attn = AttnBlock<T>(cur, c.text_dim, c.soft_dim, rng);
    }

    nn::Var<T> time_embedding(const std::vector<int>& steps) const {
        return time2(nn::silu(time1(nn::timestep_embedding<T>(steps, base_width))));
    }

    // h: output of conv_in (plus any control hint).
    EncoderFeatures<T> features(nn::Var<T> h, const nn::Var<T>& temb, const nn::Var<T>& text,
                                const nn::Var<T>& soft) const {
        EncoderFeatures<T> f;
        for (std::size_t i = 0; i < res.size(); ++i) {
            h = attn[i](res[i](h, temb), text, soft);
            f.skips.push_back(h);
            if (i < down.size()) h = down[i](h);
        }
        f.mid = mid_attn(mid_res(h, temb), text, soft);
        return f;
    }

    void collect(const std::string& prefix, nn::ParamList<T>& out) const {
        time1.collect(prefix + ".time1", out);
        time2.collect(prefix + ".time2", out);
        conv_in.collect(prefix + ".conv_in", out);
        for (std::size_t i = 0; i < res.size(); ++i) {
            res[i].collect(prefix + ".res" + std::to_string(i), out);
            attn[i].collect(prefix + ".attn" + std::to_string(i), out);
            if (i < down.size()) down[i].collect(prefix + ".down" + std::to_string(i), out);
        }
        mid_res.collect(prefix + ".mid_res", out);
        mid_attn.collect(prefix + ".mid_attn", out);
    }
    void collect_rca(const std::string& prefix, nn::ParamList<T>& out) const {
        for (std::size_t i = 0; i < attn.size(); ++i) attn[i].collect_rca(prefix + ".attn" + std::to_string(i), out);
        mid_attn.collect_rca(prefix + ".mid_attn", out);
    }
};

// Residuals the control branch adds to the skips and the middle output.
template <typename T>
struct ControlResiduals {
    std::vector<nn::Var<T>> skips;
    nn::Var<T> mid;
};

// Text-conditioned noise predictor on latents. Its RCA modules belong to the
// SR stage: they are not part of params() and are ignored without a soft
// prompt.
template <typename T>
struct UNet {
    UNetConfig cfg;
    UNetEncoder<T> enc;
    std::vector<nn::ResBlock<T>> dec_res;  // deepest level first
    std::vector<AttnBlock<T>> dec_attn;
    std::vector<nn::Conv2d<T>> up;
    nn::GroupNorm<T> out_norm;
    nn::Conv2d<T> conv_out;

    UNet() = default;
    UNet(const UNetConfig& c, std::uint64_t seed) : cfg(c) {
        cfg.validate();
        Rng rng(seed);
        enc = UNetEncoder<T>(cfg, rng);
        const auto& w = cfg.widths;
        int cur = w.back();
        for (int i = cfg.levels() - 1; i >= 0; --i) {
            dec_res.emplace_back(cur + w[i], w[i], cfg.time_dim, cfg.groups, rng);
            dec_attn.emplace_back(w[i], cfg.text_dim, cfg.soft_dim, rng);
            cur = w[i];
            if (i > 0) {
                up.emplace_back(cur, w[i - 1], 3, 1, rng);
                cur = w[i - 1];
            }
        }
        out_norm = nn::GroupNorm<T>(w[0], cfg.groups);
        conv_out = nn::Conv2d<T>(w[0], cfg.latent_channels, 3, 1, rng);
    }

    bool initialized() const { return conv_out.weight.defined(); }

    void check_inputs(const nn::Var<T>& z, const std::vector<int>& steps, const nn::Var<T>& text,
                      const nn::Var<T>& soft) const {
        if (!initialized()) throw StateError("unet is not initialized");
        const int f = 1 << (cfg.levels() - 1);
        if (z.rank() != 4 || z.dim(1) != cfg.latent_channels || z.dim(2) % f || z.dim(3) % f)
            throw ArgumentError("unet: latent must be [N, " + std::to_string(cfg.latent_channels) +
                                ", h, w] with sides divisible by " + std::to_string(f) + ", got " +
                                nn::to_string(z.shape()));
        const int N = z.dim(0);
        if (static_cast<int>(steps.size()) != N) throw ArgumentError("unet: need one timestep per sample");
        if (text.defined() && (text.rank() != 3 || text.dim(0) != N || text.dim(2) != cfg.text_dim))
            throw ArgumentError("unet: text context must be [N, L, " + std::to_string(cfg.text_dim) + "], got " +
                                nn::to_string(text.shape()));
        if (soft.defined() && (soft.rank() != 3 || soft.dim(0) != N || soft.dim(2) != cfg.soft_dim))
            throw ArgumentError("unet: soft prompt must be [N, S, " + std::to_string(cfg.soft_dim) + "], got " +
                                nn::to_string(soft.shape()));
    }

    nn::Var<T> forward(const nn::Var<T>& z, const std::vector<int>& steps, const nn::Var<T>& text,
                       const nn::Var<T>& soft = {}, const ControlResiduals<T>* control = nullptr) const {
        check_inputs(z, steps, text, soft);
        const auto temb = enc.time_embedding(steps);
        return decode(enc.features(enc.conv_in(z), temb, text, soft), temb, text, soft, control);
    }

    nn::Var<T> decode(EncoderFeatures<T> f, const nn::Var<T>& temb, const nn::Var<T>& text, const nn::Var<T>& soft,
                      const ControlResiduals<T>* control) const {
        auto h = f.mid;
        if (control) {
            h = nn::add(h, control->mid);
            for (std::size_t i = 0; i < f.skips.size(); ++i) f.skips[i] = nn::add(f.skips[i], control->skips[i]);
        }
        const int L = cfg.levels();
        for (int k = 0; k < L; ++k) {
            const int level = L - 1 - k;
            h = dec_attn[k](dec_res[k](nn::concat_channels(h, f.skips[level]), temb), text, soft);
            if (k < static_cast<int>(up.size())) h = up[k](nn::upsample_nearest2x(h));
        }
        return conv_out(nn::silu(out_norm(h)));
    }

    // Pretrained weights (everything except RCA).
    nn::ParamList<T> params() const {
        nn::ParamList<T> p;
        enc.collect("enc", p);
        for (std::size_t k = 0; k < dec_res.size(); ++k) {
            dec_res[k].collect("dec_res" + std::to_string(k), p);
            dec_attn[k].collect("dec_attn" + std::to_string(k), p);
            if (k < up.size()) up[k].collect("up" + std::to_string(k), p);
        }
        out_norm.collect("out_norm", p);
        conv_out.collect("conv_out", p);
        return p;
    }

    nn::ParamList<T> rca_params() const {
        nn::ParamList<T> p;
        enc.collect_rca("enc", p);
        for (std::size_t k = 0; k < dec_attn.size(); ++k) dec_attn[k].collect_rca("dec_attn" + std::to_string(k), p);
        return p;
    }
};

// Maps the bicubic-upsampled LR image ([N, 3, H, W] on [-1, 1]) to the
// latent grid; the last conv is zero-initialized.
template <typename T>
struct LrImageEncoder {
    std::vector<nn::Conv2d<T>> convs;
    nn::Conv2d<T> out;

    LrImageEncoder() = default;
    LrImageEncoder(const std::vector<int>& widths, int downscale, int out_channels, Rng& rng) {
        if (widths.empty()) throw ConfigError("lr encoder: widths must not be empty");
        int cur = 3, f = 1;
        for (std::size_t i = 0; i < widths.size(); ++i) {
            const int stride = (f < downscale) ? 2 : 1;
            f *= stride;
            convs.emplace_back(cur, widths[i], 3, stride, rng);
            cur = widths[i];
        }
        if (f != downscale) throw ConfigError("lr encoder: too few levels for downscale " + std::to_string(downscale));
        out = nn::Conv2d<T>(cur, out_channels, 3, 1, rng, true);
    }

    nn::Var<T> operator()(const nn::Var<T>& x) const {
        auto h = x;
        for (const auto& c : convs) h = nn::silu(c(h));
        return out(h);
    }

    void collect(const std::string& prefix, nn::ParamList<T>& p) const {
        for (std::size_t i = 0; i < convs.size(); ++i) convs[i].collect(prefix + ".conv" + std::to_string(i), p);
        out.collect(prefix + ".out", p);
    }
};

struct ControlConfig {
    std::vector<int> lr_encoder_widths{16, 32, 32};
    int downscale = 4;  // HR pixels per latent cell

    void validate() const {
        if (lr_encoder_widths.empty()) throw ConfigError("control: lr_encoder_widths must not be empty");
        if (downscale < 1 || (downscale & (downscale - 1))) throw ConfigError("control: downscale must be a power of two");
    }
};

inline nlohmann::json to_json(const ControlConfig& c) {
    return {{"lr_encoder_widths", c.lr_encoder_widths}, {"downscale", c.downscale}};
}

inline ControlConfig control_config_from_json(const nlohmann::json& j) {
    ControlConfig c;
    c.lr_encoder_widths = j.at("lr_encoder_widths").get<std::vector<int>>();
    c.downscale = j.at("downscale").get<int>();
    c.validate();
    return c;
}

// Frozen base UNet + trainable control branch (encoder clone fed by the LR
// image encoder, bridged through zero-initialized 1x1 convs) + trainable RCA.
template <typename T>
struct ControlledUNet {
    UNet<T> base;
    ControlConfig ccfg;
    UNetEncoder<T> control;
    LrImageEncoder<T> lr_encoder;
    std::vector<nn::Conv2d<T>> bridges;  // one per level, then one for the middle block

    ControlledUNet() = default;

    // Builds a fresh model whose base weights are copied from base_src; the
    // control encoder starts as an exact copy of the base encoder.
    template <typename U>
    ControlledUNet(const UNet<U>& base_src, const ControlConfig& cc, std::uint64_t seed) : ccfg(cc) {
        ccfg.validate();
        if (!base_src.initialized()) throw StateError("controlled unet: base model is not initialized");
        Rng rng(seed);
        base = UNet<T>(base_src.cfg, derive_seed(seed, 1));
        nn::copy_params(base_src.params(), base.params());
        control = UNetEncoder<T>(base.cfg, rng);
        nn::ParamList<T> src, dst;
        base.enc.collect("enc", src);
        base.enc.collect_rca("enc", src);
        control.collect("enc", dst);
        control.collect_rca("enc", dst);
        nn::copy_params(src, dst);
        lr_encoder = LrImageEncoder<T>(ccfg.lr_encoder_widths, ccfg.downscale, base.cfg.widths[0], rng);
        for (int w : base.cfg.widths) bridges.emplace_back(w, w, 1, 1, rng, true);
        bridges.emplace_back(base.cfg.widths.back(), base.cfg.widths.back(), 1, 1, rng, true);
    }

    bool initialized() const { return base.initialized() && !bridges.empty(); }

    // lr: [N, 3, H, W] bicubic-upsampled LR on [-1, 1], H = latent side * downscale.
    nn::Var<T> predict_noise(const nn::Var<T>& z, const std::vector<int>& steps, const nn::Var<T>& lr,
                             const nn::Var<T>& text, const nn::Var<T>& soft) const {
        if (!initialized()) throw StateError("controlled unet is not initialized");
        base.check_inputs(z, steps, text, soft);
        if (lr.rank() != 4 || lr.dim(0) != z.dim(0) || lr.dim(1) != 3 || lr.dim(2) != z.dim(2) * ccfg.downscale ||
            lr.dim(3) != z.dim(3) * ccfg.downscale)
            throw ArgumentError("predict_noise: LR condition " + nn::to_string(lr.shape()) + " does not match latent " +
                                nn::to_string(z.shape()) + " at downscale " + std::to_string(ccfg.downscale));
        const auto ctemb = control.time_embedding(steps);
        const auto cf = control.features(nn::add(control.conv_in(z), lr_encoder(lr)), ctemb, text, soft);
        ControlResiduals<T> res;
        for (std::size_t i = 0; i < cf.skips.size(); ++i) res.skips.push_back(bridges[i](cf.skips[i]));
        res.mid = bridges.back()(cf.mid);
        const auto temb = base.enc.time_embedding(steps);
        return base.decode(base.enc.features(base.enc.conv_in(z), temb, text, soft), temb, text, soft, &res);
    }

    nn::ParamList<T> base_params() const { return base.params(); }

    nn::ParamList<T> control_params() const {
        nn::ParamList<T> p;
        control.collect("control", p);
        control.collect_rca("control", p);
        lr_encoder.collect("lr_encoder", p);
        for (std::size_t i = 0; i < bridges.size(); ++i) bridges[i].collect("bridge" + std::to_string(i), p);
        return p;
    }

    // Everything SR training updates: control branch, LR encoder, RCA.
    nn::ParamList<T> trainable_params() const {
        auto p = control_params();
        for (auto& r : base.rca_params()) p.push_back({"base." + r.name, r.var});
        return p;
    }
};

inline Checkpoint unet_checkpoint(const UNet<float>& unet) {
    Checkpoint ck;
    ck.kind = "base_unet";
    ck.hparams = {{"unet", to_json(unet.cfg)}};
    ck.put(unet.params());
    return ck;
}

inline UNet<float> load_unet(const Checkpoint& ck) {
    if (ck.kind != "base_unet") throw StateError("expected a base_unet checkpoint, got '" + ck.kind + "'");
    UNet<float> u(unet_config_from_json(ck.hparams.at("unet")), 0);
    ck.get(u.params());
    return u;
}

// Stores only the SR-trained parts plus the checksum of the base they were
// trained against.
inline Checkpoint sr_checkpoint(const ControlledUNet<float>& m) {
    Checkpoint ck;
    ck.kind = "sr_control";
    ck.hparams = {{"unet", to_json(m.base.cfg)}, {"control", to_json(m.ccfg)}};
    ck.extra = {{"base_checksum", std::to_string(nn::checksum(m.base_params()))}};
    ck.put(m.trainable_params());
    return ck;
}

inline ControlledUNet<float> load_sr(const Checkpoint& ck, const UNet<float>& base) {
    if (ck.kind != "sr_control") throw StateError("expected an sr_control checkpoint, got '" + ck.kind + "'");
    if (unet_config_from_json(ck.hparams.at("unet")).widths != base.cfg.widths)
        throw StateError("sr checkpoint was trained against a different base architecture");
    const auto expected = ck.extra.value("base_checksum", std::string());
    if (!expected.empty() && expected != std::to_string(nn::checksum(base.params())))
        throw StateError("sr checkpoint was trained against a different base model");
    ControlledUNet<float> m(base, control_config_from_json(ck.hparams.at("control")), 0);
    ck.get(m.trainable_params());
    return m;
}

}  // namespace semsr::diffusion
