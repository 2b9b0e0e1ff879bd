#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <json.hpp>

#include "semsr/degradation.hpp"
#include "semsr/diffusion/sampler.hpp"
#include "semsr/tagging/dape.hpp"
#include "semsr/toy_scenes.hpp"

namespace semsr {

struct DataConfig {
    toy::SceneConfig scenes;  // scenes.size is the HR side
    int train_count = 512;
    int heldout_count = 64;
    int test_count = 64;
};

struct TeacherSection {
    tagging::TaggerConfig arch;
    tagging::TeacherTrainOptions train;
};

struct VaeSection {
    diffusion::VaeConfig arch;
    diffusion::VaeTrainOptions train;
};

struct DiffusionSection {
    int T = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    int text_dim = 32;
    diffusion::UNetConfig unet;  // latent_channels, text_dim and soft_dim are filled from the other sections
    diffusion::ControlConfig control;
    diffusion::DiffusionTrainOptions base{.steps = 3000, .batch = 16, .lr = 1e-3, .prompt_dropout = 0.1,
                                          .soft_dropout = 0.0};
    diffusion::DiffusionTrainOptions sr{.steps = 3000, .batch = 16, .lr = 1e-3, .prompt_dropout = 0.1,
                                        .soft_dropout = 0.1};
};

struct EvalSection {
    bool y_channel = true;
    double flat_percentile = 50.0;  // flat region: GT local variance below this percentile
    int flat_window = 3;
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string out_dir = "runs/toy";
    DataConfig data;
    degradation::DegradationConfig degradation;
    TeacherSection teacher;
    tagging::DapeTrainConfig dape;
    VaeSection vae;
    DiffusionSection diffusion;
    diffusion::SamplerConfig sampler;
    EvalSection eval;

    // Architecture fields derived from other sections.
    diffusion::UNetConfig unet_config() const {
        auto u = diffusion.unet;
        u.latent_channels = vae.arch.latent_channels;
        u.text_dim = diffusion.text_dim;
        u.soft_dim = teacher.arch.dim();
        return u;
    }
    diffusion::ControlConfig control_config() const {
        auto c = diffusion.control;
        c.downscale = vae.arch.downscale();
        return c;
    }
    diffusion::NoiseSchedule schedule() const {
        return diffusion::make_schedule(diffusion.T, diffusion.beta_start, diffusion.beta_end, sampler.steps);
    }
    int lr_size() const { return data.scenes.size / degradation.final_scale; }

    void validate() const;
};

namespace config_detail {

// Every section is described once by a visit() overload; the same
// description drives parsing, serialization and unknown-key detection.
struct Reader {
    const nlohmann::json& j;
    std::string section;
    std::set<std::string> seen;

    template <typename T>
    void operator()(const char* key, T& value) {
        seen.insert(key);
        if (!j.contains(key)) return;
        try {
            read(j.at(key), value);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config: bad value for '" + section + "." + key + "': " + e.what());
        }
    }

    template <typename T>
    static void read(const nlohmann::json& v, T& out) {
        v.get_to(out);
    }
    static void read(const nlohmann::json& v, degradation::Range& r) {
        if (!v.is_array() || v.size() != 2) throw ConfigError("expected [min, max]");
        r = {v[0].get<double>(), v[1].get<double>()};
    }
    static void read(const nlohmann::json& v, ResizeMode& m) { m = parse_resize_mode(v.get<std::string>()); }
    static void read(const nlohmann::json& v, std::vector<ResizeMode>& ms) {
        ms.clear();
        for (const auto& e : v) ms.push_back(parse_resize_mode(e.get<std::string>()));
    }

    void finish() const {
        if (!j.is_object()) throw ConfigError("config: section '" + section + "' must be an object");
        for (const auto& [k, _] : j.items())
            if (!seen.count(k)) throw ConfigError("config: unknown key '" + section + (section.empty() ? "" : ".") + k + "'");
    }
};

struct Writer {
    nlohmann::json j = nlohmann::json::object();

    template <typename T>
    void operator()(const char* key, const T& value) {
        j[key] = value;
    }
    void operator()(const char* key, const degradation::Range& r) { j[key] = {r.min, r.max}; }
    void operator()(const char* key, const ResizeMode& m) { j[key] = to_string(m); }
    void operator()(const char* key, const std::vector<ResizeMode>& ms) {
        auto a = nlohmann::json::array();
        for (auto m : ms) a.push_back(to_string(m));
        j[key] = a;
    }
};

template <typename V, typename C>
void visit_data(V& v, C& c) {
    v("hr_size", c.scenes.size);
    v("min_shapes", c.scenes.min_shapes);
    v("max_shapes", c.scenes.max_shapes);
    v("striped_prob", c.scenes.striped_prob);
    v("min_radius", c.scenes.min_radius);
    v("max_radius", c.scenes.max_radius);
    v("supersample", c.scenes.supersample);
    v("train_count", c.train_count);
    v("heldout_count", c.heldout_count);
    v("test_count", c.test_count);
}

template <typename V, typename C>
void visit_degradation(V& v, C& c) {
    v("kernel_sizes", c.kernel_sizes);
    v("blur_sigma1", c.blur_sigma1);
    v("blur_sigma2", c.blur_sigma2);
    v("resize1", c.resize1);
    v("resize2", c.resize2);
    v("resize_modes", c.resize_modes);
    v("gaussian_sigma", c.gaussian_sigma);
    v("poisson_scale", c.poisson_scale);
    v("poisson_prob", c.poisson_prob);
    v("jpeg_quality", c.jpeg_quality);
    v("jpeg_enabled", c.jpeg_enabled);
    v("second_stage_skip_prob", c.second_stage_skip_prob);
    v("final_scale", c.final_scale);
    v("final_resize_mode", c.final_resize_mode);
}

template <typename V, typename C>
void visit_teacher(V& v, C& c) {
    v("input_size", c.arch.input_size);
    v("tokens_side", c.arch.tokens_side);
    v("widths", c.arch.widths);
    v("mlp_hidden", c.arch.mlp_hidden);
    v("steps", c.train.steps);
    v("batch", c.train.batch);
    v("lr", c.train.lr);
    v("holdout_fraction", c.train.holdout_fraction);
    v("augment", c.train.augment);
}

template <typename V, typename C>
void visit_dape(V& v, C& c) {
    v("lambda", c.lambda);
    v("lora_rank", c.lora_rank);
    v("lora_alpha", c.lora_alpha);
    v("learning_rate", c.learning_rate);
    v("batch_size", c.batch_size);
    v("iterations", c.iterations);
    v("threshold", c.threshold);
    v("tune_head", c.tune_head);
    v("heldout", c.heldout);
}

template <typename V, typename C>
void visit_vae(V& v, C& c) {
    v("widths", c.arch.widths);
    v("latent_channels", c.arch.latent_channels);
    v("groups", c.arch.groups);
    v("pixel_shortcut", c.arch.pixel_shortcut);
    v("steps", c.train.steps);
    v("batch", c.train.batch);
    v("lr", c.train.lr);
    v("kl_weight", c.train.kl_weight);
}

template <typename V, typename C>
void visit_diffusion(V& v, C& c) {
    v("T", c.T);
    v("beta_start", c.beta_start);
    v("beta_end", c.beta_end);
    v("text_dim", c.text_dim);
    v("unet_widths", c.unet.widths);
    v("time_dim", c.unet.time_dim);
    v("groups", c.unet.groups);
    v("lr_encoder_widths", c.control.lr_encoder_widths);
    v("base_steps", c.base.steps);
    v("base_batch", c.base.batch);
    v("base_lr", c.base.lr);
    v("base_prompt_dropout", c.base.prompt_dropout);
    v("sr_steps", c.sr.steps);
    v("sr_batch", c.sr.batch);
    v("sr_lr", c.sr.lr);
    v("sr_prompt_dropout", c.sr.prompt_dropout);
    v("sr_soft_dropout", c.sr.soft_dropout);
    v("heldout_batches", c.sr.heldout_batches);
}

template <typename V, typename C>
void visit_sampler(V& v, C& c) {
    v("steps", c.steps);
    v("use_lre", c.use_lre);
    v("seed", c.seed);
    v("guidance_scale", c.guidance_scale);
    v("lre_timestep", c.lre_timestep);
}

template <typename V, typename C>
void visit_eval(V& v, C& c) {
    v("y_channel", c.y_channel);
    v("flat_percentile", c.flat_percentile);
    v("flat_window", c.flat_window);
}

}  // namespace config_detail

inline void RunConfig::validate() const {
    if (data.scenes.size < 16) throw ConfigError("data.hr_size must be >= 16");
    if (data.train_count < 1 || data.heldout_count < 1 || data.test_count < 1)
        throw ConfigError("data: train/heldout/test counts must be >= 1");
    if (data.scenes.min_shapes < 1 || data.scenes.max_shapes < data.scenes.min_shapes)
        throw ConfigError("data: invalid shape counts");
    degradation.validate();
    if (data.scenes.size % degradation.final_scale)
        throw ConfigError("data.hr_size must be divisible by degradation.final_scale");
    teacher.arch.validate();
    dape.validate();
    vae.arch.validate();
    if (data.scenes.size % vae.arch.downscale()) throw ConfigError("data.hr_size must be divisible by the VAE downscale");
    unet_config().validate();
    control_config().validate();
    diffusion.base.validate();
    diffusion.sr.validate();
    if (!(diffusion.beta_start > 0 && diffusion.beta_start <= diffusion.beta_end && diffusion.beta_end < 1))
        throw ConfigError("diffusion: need 0 < beta_start <= beta_end < 1");
    try {
        sampler.validate(diffusion.T);
    } catch (const ArgumentError& e) {
        throw ConfigError(e.what());
    }
    if (!(eval.flat_percentile > 0 && eval.flat_percentile <= 100)) throw ConfigError("eval.flat_percentile must lie in (0, 100]");
    if (eval.flat_window < 1 || eval.flat_window % 2 == 0) throw ConfigError("eval.flat_window must be odd and positive");
    if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
    if (std::filesystem::exists(out_dir) && !std::filesystem::is_directory(out_dir))
        throw ConfigError("out_dir '" + out_dir + "' exists and is not a directory");
}

inline nlohmann::json to_json(const RunConfig& c) {
    using namespace config_detail;
    nlohmann::json j;
    j["seed"] = c.seed;
    j["out_dir"] = c.out_dir;
    auto section = [&](const char* name, auto visit, const auto& value) {
        Writer w;
        visit(w, value);
        j[name] = w.j;
    };
    section("data", [](auto& v, const auto& x) { visit_data(v, x); }, c.data);
    section("degradation", [](auto& v, const auto& x) { visit_degradation(v, x); }, c.degradation);
    section("teacher", [](auto& v, const auto& x) { visit_teacher(v, x); }, c.teacher);
    section("dape", [](auto& v, const auto& x) { visit_dape(v, x); }, c.dape);
    section("vae", [](auto& v, const auto& x) { visit_vae(v, x); }, c.vae);
    section("diffusion", [](auto& v, const auto& x) { visit_diffusion(v, x); }, c.diffusion);
    section("sampler", [](auto& v, const auto& x) { visit_sampler(v, x); }, c.sampler);
    section("eval", [](auto& v, const auto& x) { visit_eval(v, x); }, c.eval);
    return j;
}

// Missing keys keep their defaults; unknown keys are errors.
inline RunConfig config_from_json(const nlohmann::json& j) {
    using namespace config_detail;
    if (!j.is_object()) throw ConfigError("config: top level must be an object");
    static const std::set<std::string> top{"seed", "out_dir", "data", "degradation", "teacher", "dape",
                                           "vae", "diffusion", "sampler", "eval"};
    for (const auto& [k, _] : j.items())
        if (!top.count(k)) throw ConfigError("config: unknown key '" + k + "'");
    RunConfig c;
    try {
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: bad top-level value: ") + e.what());
    }
    auto section = [&](const char* name, auto visit, auto& value) {
        if (!j.contains(name)) return;
        Reader r{j.at(name), name, {}};
        if (!r.j.is_object()) throw ConfigError("config: section '" + std::string(name) + "' must be an object");
        visit(r, value);
        r.finish();
    };
    section("data", [](auto& v, auto& x) { visit_data(v, x); }, c.data);
    section("degradation", [](auto& v, auto& x) { visit_degradation(v, x); }, c.degradation);
    section("teacher", [](auto& v, auto& x) { visit_teacher(v, x); }, c.teacher);
    section("dape", [](auto& v, auto& x) { visit_dape(v, x); }, c.dape);
    section("vae", [](auto& v, auto& x) { visit_vae(v, x); }, c.vae);
    section("diffusion", [](auto& v, auto& x) { visit_diffusion(v, x); }, c.diffusion);
    section("sampler", [](auto& v, auto& x) { visit_sampler(v, x); }, c.sampler);
    section("eval", [](auto& v, auto& x) { visit_eval(v, x); }, c.eval);
    c.validate();
    return c;
}

inline RunConfig parse_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in, nullptr, true, true);  // comments allowed
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config: parse error in '" + path + "': " + e.what());
    }
    return config_from_json(j);
}

inline std::string serialize_config(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

// FNV-1a of the canonical serialization, as 16 hex digits.
inline std::string config_hash(const RunConfig& c) {
    const auto s = to_json(c).dump();
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    std::ostringstream o;
    o << std::hex << std::setw(16) << std::setfill('0') << h;
    return o.str();
}

}  // namespace semsr
