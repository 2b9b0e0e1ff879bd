#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "semsr/core/rng.hpp"
#include "semsr/image/image.hpp"
#include "semsr/image/jpeg.hpp"
#include "semsr/image/resize.hpp"

// Randomized two-stage degradation chain (blur -> resize -> noise -> JPEG,
// twice) followed by a terminal downscale, used to synthesize LR/HR pairs.
namespace semsr::degradation {

struct Range {
    double min = 0.0;
    double max = 0.0;
    bool valid() const { return min <= max; }
    double sample(Rng& rng) const { return min == max ? min : rng.uniform(min, max); }
};

enum class NoiseKind { gaussian, poisson };

inline std::string to_string(NoiseKind k) { return k == NoiseKind::gaussian ? "gaussian" : "poisson"; }

struct Kernel2D {
    int size = 1;
    std::vector<double> weights{1.0};

    double at(int i, int j) const { return weights[static_cast<std::size_t>(i) * size + j]; }
    bool operator==(const Kernel2D&) const = default;
};

struct DegradationConfig {
    std::vector<int> kernel_sizes{7, 9, 11, 13, 15, 17, 19, 21};
    Range blur_sigma1{0.2, 3.0};
    Range blur_sigma2{0.2, 1.5};
    Range resize1{0.5, 1.5};
    Range resize2{0.3, 1.2};
    std::vector<ResizeMode> resize_modes{ResizeMode::bicubic, ResizeMode::bilinear, ResizeMode::area};
    Range gaussian_sigma{0.0, 0.1};
    Range poisson_scale{50.0, 1000.0};  // photon count L at full intensity
    double poisson_prob = 0.5;
    Range jpeg_quality{30, 95};
    bool jpeg_enabled = true;
    double second_stage_skip_prob = 0.2;
    int final_scale = 4;
    ResizeMode final_resize_mode = ResizeMode::bicubic;

    void validate() const {
        auto check = [](const Range& r, const char* name) {
            if (!r.valid())
                throw ConfigError(std::string("degradation.") + name + ": min " + std::to_string(r.min) + " > max " +
                                  std::to_string(r.max));
        };
        check(blur_sigma1, "blur_sigma1");
        check(blur_sigma2, "blur_sigma2");
        check(resize1, "resize1");
        check(resize2, "resize2");
        check(gaussian_sigma, "gaussian_sigma");
        check(poisson_scale, "poisson_scale");
        check(jpeg_quality, "jpeg_quality");
        if (kernel_sizes.empty()) throw ConfigError("degradation.kernel_sizes: empty");
        for (int k : kernel_sizes)
            if (k < 1 || k % 2 == 0) throw ConfigError("degradation.kernel_sizes: sizes must be odd and positive");
        if (resize_modes.empty()) throw ConfigError("degradation.resize_modes: empty");
        if (blur_sigma1.min <= 0 || blur_sigma2.min <= 0) throw ConfigError("degradation: blur sigma must be > 0");
        if (resize1.min <= 0 || resize2.min <= 0) throw ConfigError("degradation: resize factors must be > 0");
        if (gaussian_sigma.min < 0) throw ConfigError("degradation.gaussian_sigma: must be >= 0");
        if (poisson_scale.min <= 0) throw ConfigError("degradation.poisson_scale: must be > 0");
        if (jpeg_quality.min < 30 || jpeg_quality.max > 95)
            throw ConfigError("degradation.jpeg_quality: must lie within [30, 95]");
        if (poisson_prob < 0 || poisson_prob > 1 || second_stage_skip_prob < 0 || second_stage_skip_prob > 1)
            throw ConfigError("degradation: probabilities must lie in [0, 1]");
        if (final_scale < 1) throw ConfigError("degradation.final_scale: must be >= 1");
    }
};

struct StageEntry {
    Kernel2D blur_kernel;
    double blur_sigma = 0.0;  // 0 marks a delta kernel
    ResizeMode resize_mode = ResizeMode::bicubic;
    double resize_factor = 1.0;
    NoiseKind noise_kind = NoiseKind::gaussian;
    double noise_level = 0.0;  // sigma for gaussian, L for poisson
    std::optional<int> jpeg_quality;
    std::uint64_t noise_seed = 0;

    bool operator==(const StageEntry&) const = default;
};

struct DegradationRecipe {
    StageEntry stage1;
    std::optional<StageEntry> stage2;  // empty when the second stage was skipped
    int final_scale = 4;
    ResizeMode final_resize_mode = ResizeMode::bicubic;
    std::uint64_t rng_seed = 0;

    bool operator==(const DegradationRecipe&) const = default;
};

// ---------------------------------------------------------------- kernels

inline Kernel2D gaussian_blur_kernel(int size, double sigma) {
    if (size < 3 || size % 2 == 0) throw ArgumentError("gaussian_blur_kernel: size must be odd and >= 3");
    if (!(sigma > 0)) throw ArgumentError("gaussian_blur_kernel: sigma must be > 0");
    Kernel2D k;
    k.size = size;
    k.weights.assign(static_cast<std::size_t>(size) * size, 0.0);
    const int r = size / 2;
    double total = 0;
    for (int i = -r; i <= r; ++i)
        for (int j = -r; j <= r; ++j) {
            const double v = std::exp(-(i * i + j * j) / (2.0 * sigma * sigma));
            k.weights[static_cast<std::size_t>(i + r) * size + (j + r)] = v;
            total += v;
        }
    for (auto& v : k.weights) v /= total;
    return k;
}

inline Kernel2D delta_kernel() { return Kernel2D{}; }

// 2-D filtering with edge replication.
inline ImageTensor blur(const ImageTensor& img, const Kernel2D& k) {
    if (k.size == 1 && k.weights[0] == 1.0) return img;
    const int r = k.size / 2;
    ImageTensor out(img.height, img.width, img.channels);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) {
                double s = 0;
                for (int i = -r; i <= r; ++i) {
                    const int yy = std::clamp(y + i, 0, img.height - 1);
                    for (int j = -r; j <= r; ++j) {
                        const int xx = std::clamp(x + j, 0, img.width - 1);
                        s += k.at(i + r, j + r) * img.at(yy, xx, c);
                    }
                }
                out.at(y, x, c) = static_cast<float>(s);
            }
    return out;
}

// ---------------------------------------------------------------- noise

inline void add_gaussian_noise(ImageTensor& img, double sigma, Rng& rng) {
    if (sigma <= 0) return;
    for (auto& v : img.data) v = static_cast<float>(v + sigma * rng.normal());
}

// x -> Poisson(x * L) / L
inline void add_poisson_noise(ImageTensor& img, double level, Rng& rng) {
    for (auto& v : img.data) {
        const double lam = std::max(0.0, static_cast<double>(v)) * level;
        v = static_cast<float>(static_cast<double>(rng.poisson(lam)) / level);
    }
}

// ---------------------------------------------------------------- recipe sampling

namespace detail {

inline StageEntry sample_stage(const DegradationConfig& cfg, Rng& rng, const Range& sigma_range, const Range& resize_range) {
    StageEntry e;
    const int ksize = cfg.kernel_sizes[rng.uniform_int(0, static_cast<std::int64_t>(cfg.kernel_sizes.size()) - 1)];
    e.blur_sigma = sigma_range.sample(rng);
    e.blur_kernel = ksize >= 3 ? gaussian_blur_kernel(ksize, e.blur_sigma) : delta_kernel();
    e.resize_mode = cfg.resize_modes[rng.uniform_int(0, static_cast<std::int64_t>(cfg.resize_modes.size()) - 1)];
    e.resize_factor = resize_range.sample(rng);
    if (rng.bernoulli(cfg.poisson_prob)) {
        e.noise_kind = NoiseKind::poisson;
        e.noise_level = cfg.poisson_scale.sample(rng);
    } else {
        e.noise_kind = NoiseKind::gaussian;
        e.noise_level = cfg.gaussian_sigma.sample(rng);
    }
    if (cfg.jpeg_enabled) {
        e.jpeg_quality = static_cast<int>(
            rng.uniform_int(static_cast<std::int64_t>(std::ceil(cfg.jpeg_quality.min)),
                            static_cast<std::int64_t>(std::floor(cfg.jpeg_quality.max))));
    }
    e.noise_seed = rng.next_u64();
    return e;
}

}  // namespace detail

inline DegradationRecipe sample_recipe(const DegradationConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    DegradationRecipe r;
    r.rng_seed = seed;
    r.final_scale = cfg.final_scale;
    r.final_resize_mode = cfg.final_resize_mode;
    r.stage1 = detail::sample_stage(cfg, rng, cfg.blur_sigma1, cfg.resize1);
    const bool skip = rng.bernoulli(cfg.second_stage_skip_prob);
    auto s2 = detail::sample_stage(cfg, rng, cfg.blur_sigma2, cfg.resize2);
    if (!skip) r.stage2 = s2;
    return r;
}

// Stage entry that leaves an image untouched (apart from optional JPEG).
inline StageEntry identity_stage(std::optional<int> jpeg_quality = std::nullopt) {
    StageEntry e;
    e.jpeg_quality = jpeg_quality;
    return e;
}

inline DegradationRecipe identity_recipe(int final_scale = 4) {
    DegradationRecipe r;
    r.stage1 = identity_stage();
    r.stage2 = identity_stage();
    r.final_scale = final_scale;
    return r;
}

// ---------------------------------------------------------------- application

inline ImageTensor apply_stage(const ImageTensor& image, const StageEntry& e) {
    validate_image(image, 1);
    ImageTensor out = blur(image, e.blur_kernel);
    out.clamp01();
    const int nh = static_cast<int>(std::lround(image.height * e.resize_factor));
    const int nw = static_cast<int>(std::lround(image.width * e.resize_factor));
    if (nh < 8 || nw < 8)
        throw DegradationError("resize by " + std::to_string(e.resize_factor) + " gives " + std::to_string(nh) + "x" +
                               std::to_string(nw) + ", below the 8x8 minimum");
    if (nh != out.height || nw != out.width) {
        out = resize(out, nh, nw, e.resize_mode);
        out.clamp01();
    }
    Rng noise_rng(e.noise_seed);
    if (e.noise_kind == NoiseKind::gaussian)
        add_gaussian_noise(out, e.noise_level, noise_rng);
    else
        add_poisson_noise(out, e.noise_level, noise_rng);
    out.clamp01();
    if (e.jpeg_quality) out = jpeg_roundtrip(out, *e.jpeg_quality);
    out.clamp01();
    return out;
}

inline ImageTensor replay(const ImageTensor& hr, const DegradationRecipe& r) {
    validate_image(hr);
    if (hr.height % r.final_scale || hr.width % r.final_scale)
        throw ArgumentError("HR size " + std::to_string(hr.height) + "x" + std::to_string(hr.width) +
                            " is not divisible by scale " + std::to_string(r.final_scale));
    ImageTensor x = apply_stage(hr, r.stage1);
    if (r.stage2) x = apply_stage(x, *r.stage2);
    ImageTensor lr = resize(x, hr.height / r.final_scale, hr.width / r.final_scale, r.final_resize_mode);
    lr.clamp01();
    return lr;
}

struct Pair {
    ImageTensor lr;
    DegradationRecipe recipe;
};

inline Pair synthesize_pair(const ImageTensor& hr, const DegradationConfig& cfg, std::uint64_t seed) {
    if (hr.height % cfg.final_scale || hr.width % cfg.final_scale)
        throw ArgumentError("HR size not divisible by final_scale " + std::to_string(cfg.final_scale));
    auto recipe = sample_recipe(cfg, seed);
    auto lr = replay(hr, recipe);
    return {std::move(lr), std::move(recipe)};
}

// ---------------------------------------------------------------- serialization

inline nlohmann::json stage_to_json(const StageEntry& e) {
    nlohmann::json j;
    j["blur_kernel_size"] = e.blur_kernel.size;
    j["blur_kernel"] = e.blur_kernel.weights;
    j["blur_sigma"] = e.blur_sigma;
    j["resize_mode"] = to_string(e.resize_mode);
    j["resize_factor"] = e.resize_factor;
    j["noise_kind"] = to_string(e.noise_kind);
    j["noise_level"] = e.noise_level;
    j["jpeg_quality"] = e.jpeg_quality ? nlohmann::json(*e.jpeg_quality) : nlohmann::json(nullptr);
    j["noise_seed"] = e.noise_seed;
    return j;
}

inline StageEntry stage_from_json(const nlohmann::json& j) {
    StageEntry e;
    e.blur_kernel.size = j.at("blur_kernel_size").get<int>();
    e.blur_kernel.weights = j.at("blur_kernel").get<std::vector<double>>();
    e.blur_sigma = j.at("blur_sigma").get<double>();
    e.resize_mode = parse_resize_mode(j.at("resize_mode").get<std::string>());
    e.resize_factor = j.at("resize_factor").get<double>();
    const auto nk = j.at("noise_kind").get<std::string>();
    if (nk != "gaussian" && nk != "poisson") throw ConfigError("unknown noise kind '" + nk + "'");
    e.noise_kind = nk == "gaussian" ? NoiseKind::gaussian : NoiseKind::poisson;
    e.noise_level = j.at("noise_level").get<double>();
    if (!j.at("jpeg_quality").is_null()) e.jpeg_quality = j.at("jpeg_quality").get<int>();
    e.noise_seed = j.at("noise_seed").get<std::uint64_t>();
    return e;
}

inline nlohmann::json recipe_to_json(const DegradationRecipe& r) {
    nlohmann::json j;
    j["stage1"] = stage_to_json(r.stage1);
    j["stage2"] = r.stage2 ? stage_to_json(*r.stage2) : nlohmann::json(nullptr);
    j["final_scale"] = r.final_scale;
    j["final_resize_mode"] = to_string(r.final_resize_mode);
    j["final_resize_placement"] = "terminal";
    j["rng_seed"] = r.rng_seed;
    return j;
}

inline DegradationRecipe recipe_from_json(const nlohmann::json& j) {
    DegradationRecipe r;
    r.stage1 = stage_from_json(j.at("stage1"));
    if (!j.at("stage2").is_null()) r.stage2 = stage_from_json(j.at("stage2"));
    r.final_scale = j.at("final_scale").get<int>();
    r.final_resize_mode = parse_resize_mode(j.at("final_resize_mode").get<std::string>());
    r.rng_seed = j.at("rng_seed").get<std::uint64_t>();
    return r;
}

}  // namespace semsr::degradation
