#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>

#include "semsr/config.hpp"
#include "semsr/eval/report.hpp"

#ifndef SEMSR_VERSION
#define SEMSR_VERSION "semsr-0.1.0"
#endif

// Command implementations behind the CLI. Every command reads and writes
// under one run directory:
//   dataset/{hr,lr}/<id>.png, dataset/dataset.json
//   checkpoints/<component>.ckpt
//   logs/<command>.jsonl
//   manifests/<command>.json
//   infer[-no-lre]/<id>.png + <id>.json, eval/<name>.json, ablate/*
namespace semsr::pipeline {

namespace fs = std::filesystem;

inline std::string version_string() { return SEMSR_VERSION; }

struct RunPaths {
    fs::path root;

    explicit RunPaths(fs::path r) : root(std::move(r)) {}
    fs::path dataset_dir() const { return root / "dataset"; }
    fs::path dataset_index() const { return dataset_dir() / "dataset.json"; }
    fs::path checkpoint(const std::string& component) const { return root / "checkpoints" / (component + ".ckpt"); }
    fs::path log(const std::string& command) const { return root / "logs" / (command + ".jsonl"); }
    fs::path manifest(const std::string& command) const { return root / "manifests" / (command + ".json"); }
    fs::path eval_dir() const { return root / "eval"; }
    fs::path ablate_dir() const { return root / "ablate"; }

    std::string rel(const fs::path& p) const { return fs::relative(p, root).generic_string(); }
};

// Command-line overrides; unset fields leave the config untouched.
struct CommandOptions {
    std::optional<int> steps;
    bool no_lre = false;
    std::optional<double> threshold;
    std::optional<std::string> prompt_override;
    std::optional<std::string> input;
};

inline std::string hex64(std::uint64_t h) {
    std::ostringstream o;
    o << std::hex << std::setw(16) << std::setfill('0') << h;
    return o.str();
}

inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string file_hash(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw IoError("cannot read " + p.string());
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return hex64(fnv1a(bytes.data(), bytes.size()));
}

inline void write_text(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary);
    if (!f) throw IoError("cannot write " + p.string());
    f << text;
    if (!f) throw IoError("failed writing " + p.string());
}

inline nlohmann::json read_json(const fs::path& p) {
    std::ifstream f(p);
    if (!f) throw IoError("cannot read " + p.string());
    try {
        return nlohmann::json::parse(f);
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError("malformed JSON in " + p.string() + ": " + e.what());
    }
}

// Line-delimited JSON training log.
class JsonlLog {
public:
    explicit JsonlLog(const fs::path& p) {
        fs::create_directories(p.parent_path());
        f_.open(p, std::ios::trunc);
        if (!f_) throw IoError("cannot write log " + p.string());
    }
    void operator()(const nlohmann::json& j) { f_ << j.dump() << '\n' << std::flush; }
    tagging::LogFn fn() {
        return [this](const nlohmann::json& j) { (*this)(j); };
    }

private:
    std::ofstream f_;
};

// Collects what one command read and wrote, then writes its manifest.
struct Manifest {
    std::string command;
    nlohmann::json flags = nlohmann::json::object();
    nlohmann::json inputs = nlohmann::json::array();
    std::vector<std::string> outputs;
    nlohmann::json results = nlohmann::json::object();
};

class CommandScope {
public:
    CommandScope(const RunConfig& cfg, const RunPaths& paths, std::string command, std::string manifest_name = "")
        : cfg_(cfg), paths_(paths), start_(std::chrono::steady_clock::now()) {
        m.command = std::move(command);
        manifest_name_ = manifest_name.empty() ? m.command : std::move(manifest_name);
        fs::create_directories(paths_.root);
    }

    Manifest m;

    void input(const fs::path& p) { m.inputs.push_back({{"path", paths_.rel(p)}, {"hash", file_hash(p)}}); }
    void output(const fs::path& p) { m.outputs.push_back(paths_.rel(p)); }
    fs::path log_path() const { return paths_.log(manifest_name_); }

    nlohmann::json finish() {
        const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        nlohmann::json j;
        j["command"] = m.command;
        j["version"] = version_string();
        j["config_hash"] = config_hash(cfg_);
        j["seed"] = cfg_.seed;
        j["flags"] = m.flags;
        j["inputs"] = m.inputs;
        j["outputs"] = m.outputs;
        j["results"] = m.results;
        j["wall_time_s"] = wall;
        write_text(paths_.manifest(manifest_name_), j.dump(2) + "\n");
        return j;
    }

private:
    const RunConfig& cfg_;
    const RunPaths& paths_;
    std::chrono::steady_clock::time_point start_;
    std::string manifest_name_;
};

inline void require_artifact(const fs::path& p, const std::string& command, const std::string& producer) {
    if (!fs::exists(p))
        throw StateError(command + " needs " + p.string() + ", which is missing; run `semsr " + producer +
                         "` first");
}

// ---------------------------------------------------------------- dataset

struct DatasetEntry {
    std::string id;
    std::string split;
    std::vector<std::string> tags;
    ImageTensor hr, lr;
};

struct Dataset {
    TagVocabulary vocab;
    std::vector<DatasetEntry> train, heldout, test;

    const std::vector<DatasetEntry>& split(const std::string& name) const {
        if (name == "train") return train;
        if (name == "heldout") return heldout;
        if (name == "test") return test;
        throw ArgumentError("unknown split '" + name + "'");
    }
    const DatasetEntry* find(const std::string& id) const {
        for (const auto* s : {&train, &heldout, &test})
            for (const auto& e : *s)
                if (e.id == id) return &e;
        return nullptr;
    }
};

inline std::vector<const ImageTensor*> hr_ptrs(const std::vector<DatasetEntry>& v) {
    std::vector<const ImageTensor*> out;
    for (const auto& e : v) out.push_back(&e.hr);
    return out;
}

inline std::vector<const ImageTensor*> lr_ptrs(const std::vector<DatasetEntry>& v) {
    std::vector<const ImageTensor*> out;
    for (const auto& e : v) out.push_back(&e.lr);
    return out;
}

inline nlohmann::json make_dataset(const RunConfig& cfg, const CommandOptions& = {}) {
    const RunPaths paths(cfg.out_dir);
    CommandScope scope(cfg, paths, "make-dataset");
    const TagVocabulary vocab(toy::default_vocabulary());
    nlohmann::json index;
    index["vocabulary"] = vocab.classes();
    index["hr_size"] = cfg.data.scenes.size;
    index["lr_size"] = cfg.lr_size();
    auto& entries = index["entries"] = nlohmann::json::array();
    const std::pair<const char*, int> splits[] = {
        {"train", cfg.data.train_count}, {"heldout", cfg.data.heldout_count}, {"test", cfg.data.test_count}};
    std::uint64_t salt = 1;
    for (const auto& [split, count] : splits) {
        const auto scenes = toy::generate_scenes(cfg.data.scenes, count, derive_seed(cfg.seed, salt));
        for (int i = 0; i < count; ++i) {
            const std::string id = std::string(split) + "_" + std::to_string(i);
            const auto deg_seed = derive_seed(cfg.seed, salt * 1000003 + i);
            const auto pair = degradation::synthesize_pair(scenes[i].image, cfg.degradation, deg_seed);
            const auto hr_path = paths.dataset_dir() / "hr" / (id + ".png");
            const auto lr_path = paths.dataset_dir() / "lr" / (id + ".png");
            fs::create_directories(hr_path.parent_path());
            fs::create_directories(lr_path.parent_path());
            write_png(hr_path.string(), scenes[i].image);
            write_png(lr_path.string(), pair.lr);
            scope.output(hr_path);
            scope.output(lr_path);
            entries.push_back({{"id", id},
                               {"split", split},
                               {"tags", scenes[i].tags},
                               {"hr", paths.rel(hr_path)},
                               {"lr", paths.rel(lr_path)},
                               {"degradation_seed", deg_seed},
                               {"recipe", degradation::recipe_to_json(pair.recipe)}});
        }
        ++salt;
    }
    write_text(paths.dataset_index(), index.dump(1) + "\n");
    scope.output(paths.dataset_index());
    scope.m.results = {{"train", cfg.data.train_count}, {"heldout", cfg.data.heldout_count}, {"test", cfg.data.test_count}};
    return scope.finish();
}

inline Dataset load_dataset(const RunPaths& paths, const std::string& command) {
    require_artifact(paths.dataset_index(), command, "make-dataset");
    const auto index = read_json(paths.dataset_index());
    Dataset d;
    d.vocab = TagVocabulary(index.at("vocabulary").get<std::vector<std::string>>());
    for (const auto& e : index.at("entries")) {
        DatasetEntry de;
        de.id = e.at("id").get<std::string>();
        de.split = e.at("split").get<std::string>();
        de.tags = e.at("tags").get<std::vector<std::string>>();
        de.hr = read_png((paths.root / e.at("hr").get<std::string>()).string());
        de.lr = read_png((paths.root / e.at("lr").get<std::string>()).string());
        if (de.split == "train")
            d.train.push_back(std::move(de));
        else if (de.split == "heldout")
            d.heldout.push_back(std::move(de));
        else if (de.split == "test")
            d.test.push_back(std::move(de));
        else
            throw IoError("dataset.json: unknown split '" + de.split + "'");
    }
    return d;
}

// ---------------------------------------------------------------- components

inline Checkpoint stamp(Checkpoint ck, const RunConfig& cfg, long step, nlohmann::json extra = {}) {
    ck.step = step;
    ck.config_hash = config_hash(cfg);
    if (!extra.is_null())
        for (auto& [k, v] : extra.items()) ck.extra[k] = v;
    return ck;
}

inline void save(CommandScope& scope, const fs::path& p, const Checkpoint& ck) {
    fs::create_directories(p.parent_path());
    save_checkpoint(p.string(), ck);
    scope.output(p);
}

inline Checkpoint load_input(CommandScope& scope, const RunPaths& paths, const std::string& component,
                             const std::string& producer) {
    const auto p = paths.checkpoint(component);
    require_artifact(p, scope.m.command, producer);
    scope.input(p);
    return load_checkpoint(p.string());
}

inline tagging::TagModel<float> load_tagger_input(CommandScope& scope, const RunPaths& paths, const std::string& component,
                                                  const std::string& producer) {
    return tagging::load_tagger(load_input(scope, paths, component, producer)).model;
}

inline diffusion::TextEncoder make_text_encoder(const RunConfig& cfg, const TagVocabulary& vocab) {
    return diffusion::TextEncoder(vocab, cfg.diffusion.text_dim, derive_seed(cfg.seed, 401));
}

// Per-image class probabilities from a tagger.
inline std::vector<std::vector<double>> tag_probabilities(const tagging::TagModel<float>& model,
                                                          const std::vector<const ImageTensor*>& images) {
    auto rows = tagging::logits_rows(tagging::encode_images(model, images).logits);
    for (auto& r : rows)
        for (auto& v : r) v = sigmoid(v);
    return rows;
}

inline double mean_jaccard(const std::vector<tagging::PromptBundle>& pred, const std::vector<DatasetEntry>& truth,
                           const TagVocabulary& vocab) {
    double s = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) s += jaccard(pred[i].hard, make_tagset(truth[i].tags, vocab));
    return pred.empty() ? 0 : s / static_cast<double>(pred.size());
}

inline double effective_threshold(const RunConfig& cfg, const CommandOptions& opt) {
    const double t = opt.threshold.value_or(cfg.dape.threshold);
    if (!(t > 0 && t < 1)) throw ConfigError("--threshold must lie in (0, 1)");
    return t;
}

inline int override_steps(int configured, const CommandOptions& opt) {
    if (!opt.steps) return configured;
    if (*opt.steps < 0) throw ConfigError("--steps must be >= 0");
    return *opt.steps;
}

// ---------------------------------------------------------------- training commands

inline nlohmann::json train_teacher(const RunConfig& cfg, const CommandOptions& opt = {}) {
    const RunPaths paths(cfg.out_dir);
    CommandScope scope(cfg, paths, "train-teacher");
    const auto data = load_dataset(paths, scope.m.command);
    scope.input(paths.dataset_index());
    std::vector<tagging::LabeledImage> labeled;
    for (const auto& e : data.train) labeled.push_back({e.hr, e.tags});
    auto topt = cfg.teacher.train;
    topt.steps = override_steps(topt.steps, opt);
    topt.seed = derive_seed(cfg.seed, 201);
    JsonlLog log(scope.log_path());
    const auto r = tagging::train_teacher(labeled, data.vocab, cfg.teacher.arch, topt, log.fn());
    scope.output(scope.log_path());

    std::vector<tagging::LabeledImage> held;
    for (const auto& e : data.heldout) held.push_back({e.hr, e.tags});
    std::vector<const tagging::LabeledImage*> hp;
    for (const auto& h : held) hp.push_back(&h);
    const auto stats = tagging::evaluate_tagger(r.model, hp, data.vocab);
    scope.m.flags = {{"steps", topt.steps}};
    scope.m.results = {{"internal_holdout_bce_initial", r.heldout_bce_initial},
                       {"internal_holdout_bce_final", r.heldout_bce_final},
                       {"heldout_bce", stats.bce},
                       {"heldout_exact_match", stats.exact_match},
                       {"checksum", hex64(nn::checksum(r.model.all_params()))}};
    save(scope, paths.checkpoint("teacher"),
         stamp(tagging::tagger_checkpoint(r.model, data.vocab, "tag_teacher"), cfg, topt.steps, scope.m.results));
    return scope.finish();
}

inline nlohmann::json train_vae(const RunConfig& cfg, const CommandOptions& opt = {}) {
    const RunPaths paths(cfg.out_dir);
    CommandScope scope(cfg, paths, "train-vae");
    const auto data = load_dataset(paths, scope.m.command);
    scope.input(paths.dataset_index());
    std::vector<ImageTensor> train, held;
    for (const auto& e : data.train) train.push_back(e.hr);
    for (const auto& e : data.heldout) held.push_back(e.hr);
    auto vopt = cfg.vae.train;
    vopt.steps = override_steps(vopt.steps, opt);
    vopt.seed = derive_seed(cfg.seed, 301);
    JsonlLog log(scope.log_path());
    const auto r = diffusion::train_vae(train, held, cfg.vae.arch, vopt, log.fn());
    scope.output(scope.log_path());
    scope.m.flags = {{"steps", vopt.steps}};
    scope.m.results = {{"heldout_psnr_initial", r.heldout_psnr_initial},
                       {"heldout_psnr_final", r.heldout_psnr_final},
                       {"checksum", hex64(nn::checksum(r.vae.all_params()))}};
    save(scope, paths.checkpoint("vae"), stamp(diffusion::vae_checkpoint(r.vae), cfg, vopt.steps, scope.m.results));
    return scope.finish();
}

// Also writes the frozen text encoder the base model is trained against.
inline nlohmann::json train_base(const RunConfig& cfg, const CommandOptions& opt = {}) {
    const RunPaths paths(cfg.out_dir);
    CommandScope scope(cfg, paths, "train-base");
    const auto data = load_dataset(paths, scope.m.command);
    scope.input(paths.dataset_index());
    const auto vae = diffusion::load_vae(load_input(scope, paths, "vae", "train-vae"));
    const auto text = make_text_encoder(cfg, data.vocab);
    save(scope, paths.checkpoint("text_encoder"), stamp(text.to_checkpoint(), cfg, 0));

    auto tagsets = [&](const std::vector<DatasetEntry>& v) {
        std::vector<TagSet> out;
        for (const auto& e : v) out.push_back(make_tagset(e.tags, data.vocab));
        return out;
    };
    const auto train = diffusion::encode_latents(vae, text, hr_ptrs(data.train), tagsets(data.train));
    const auto held = diffusion::encode_latents(vae, text, hr_ptrs(data.heldout), tagsets(data.heldout));
    auto bopt = cfg.diffusion.base;
    bopt.steps = override_steps(bopt.steps, opt);
    bopt.seed = derive_seed(cfg.seed, 402);
    JsonlLog log(scope.log_path());
    const auto r = diffusion::train_base(train, held, cfg.unet_config(), cfg.schedule(), bopt, log.fn());
    scope.output(scope.log_path());
    scope.m.flags = {{"steps", bopt.steps}};
    scope.m.results = {{"heldout_loss_initial", r.heldout_initial},
                       {"heldout_loss_final", r.heldout_final},
                       {"checksum", hex64(nn::checksum(r.unet.params()))},
                       {"text_encoder_checksum", hex64(nn::checksum(text.params()))}};
    save(scope, paths.checkpoint("base_unet"), stamp(diffusion::unet_checkpoint(r.unet), cfg, bopt.steps, scope.m.results));
    return scope.finish();
}

inline nlohmann::json train_dape(const RunConfig& cfg, const CommandOptions& opt = {}) {
    const RunPaths paths(cfg.out_dir);
    CommandScope scope(cfg, paths, "train-dape");
    const auto data = load_dataset(paths, scope.m.command);
    scope.input(paths.dataset_index());
    const auto teacher_file_before = paths.checkpoint("teacher");
    const auto teacher = load_tagger_input(scope, paths, "teacher", "train-teacher");
    const auto teacher_hash_before = file_hash(teacher_file_before);

    std::vector<ImageTensor> hr;
    for (const auto& e : data.train) hr.push_back(e.hr);
    std::vector<tagging::HeldoutPair> held;
    const std::size_t n_held = std::min<std::size_t>(data.heldout.size(), static_cast<std::size_t>(cfg.dape.heldout));
    const std::vector<DatasetEntry> held_entries(data.heldout.begin(), data.heldout.begin() + n_held);
    for (const auto& e : held_entries) held.push_back({e.hr, e.lr, e.tags});

    auto dcfg = cfg.dape;
    dcfg.iterations = override_steps(dcfg.iterations, opt);
    dcfg.threshold = effective_threshold(cfg, opt);
    JsonlLog log(scope.log_path());
    const auto r = tagging::train_dape(teacher, hr, held, cfg.degradation, dcfg, derive_seed(cfg.seed, 211), log.fn());
    scope.output(scope.log_path());

    const auto lr = lr_ptrs(held_entries);
    const double jt = mean_jaccard(tagging::extract_prompts(teacher, data.vocab, lr, dcfg.threshold), held_entries, data.vocab);
    const double jd = mean_jaccard(tagging::extract_prompts(r.student, data.vocab, lr, dcfg.threshold), held_entries, data.vocab);
    const double drop = r.initial.rep_term > 0 ? 1.0 - r.final_.rep_term / r.initial.rep_term : 0.0;
    scope.m.flags = {{"iterations", dcfg.iterations}, {"threshold", dcfg.threshold}};
    scope.m.results = {{"heldout_images", held.size()},
                       {"rep_mse_initial", r.initial.rep_term},
                       {"rep_mse_final", r.final_.rep_term},
                       {"rep_mse_drop", drop},
                       {"logits_bce_initial", r.initial.logits_term},
                       {"logits_bce_final", r.final_.logits_term},
                       {"jaccard_teacher_on_lr", jt},
                       {"jaccard_dape_on_lr", jd},
                       {"teacher_checksum_before", hex64(r.teacher_checksum_before)},
                       {"teacher_checksum_after", hex64(r.teacher_checksum_after)},
                       {"teacher_encoder_checksum", hex64(r.base_checksum_teacher)},
                       {"student_base_encoder_checksum", hex64(r.base_checksum_student)}};
    save(scope, paths.checkpoint("dape"),
         stamp(tagging::tagger_checkpoint(r.student, data.vocab, "dape"), cfg, dcfg.iterations, scope.m.results));
    scope.m.results["teacher_file_unchanged"] = file_hash(teacher_file_before) == teacher_hash_before;
    return scope.finish();
}

struct FrozenStack {
    diffusion::Vae<float> vae;
    diffusion::TextEncoder text;
    diffusion::UNet<float> base;
    tagging::TagModel<float> dape;
};

inline FrozenStack load_frozen_stack(CommandScope& scope, const RunPaths& paths) {
    FrozenStack s;
    s.vae = diffusion::load_vae(load_input(scope, paths, "vae", "train-vae"));
    s.text = diffusion::TextEncoder::from_checkpoint(load_input(scope, paths, "text_encoder", "train-base"));
    s.base = diffusion::load_unet(load_input(scope, paths, "base_unet", "train-base"));
    s.dape = load_tagger_input(scope, paths, "dape", "train-dape");
    return s;
}

inline nlohmann::json checksums_json(const diffusion::FrozenChecksums& c) {
    return {{"base_unet", hex64(c.base)}, {"vae", hex64(c.vae)}, {"text_encoder", hex64(c.text)}, {"dape", hex64(c.dape)}};
}

inline nlohmann::json train_sr(const RunConfig& cfg, const CommandOptions& opt = {}) {
    const RunPaths paths(cfg.out_dir);
    CommandScope scope(cfg, paths, "train-sr");
    const auto data = load_dataset(paths, scope.m.command);
    scope.input(paths.dataset_index());
    const auto stack = load_frozen_stack(scope, paths);
    const double threshold = effective_threshold(cfg, opt);
    const auto train = diffusion::encode_sr_set(stack.vae, stack.text, stack.dape, hr_ptrs(data.train),
                                                lr_ptrs(data.train), threshold);
    const auto held = diffusion::encode_sr_set(stack.vae, stack.text, stack.dape, hr_ptrs(data.heldout),
                                               lr_ptrs(data.heldout), threshold);
    auto sopt = cfg.diffusion.sr;
    sopt.steps = override_steps(sopt.steps, opt);
    sopt.seed = derive_seed(cfg.seed, 502);
    JsonlLog log(scope.log_path());
    const auto r = diffusion::train_sr(stack.base, stack.vae, stack.text, stack.dape, train, held, cfg.control_config(),
                                       cfg.schedule(), sopt, log.fn());
    scope.output(scope.log_path());
    scope.m.flags = {{"steps", sopt.steps}, {"threshold", threshold}};
    scope.m.results = {{"heldout_loss_initial", r.heldout_initial},
                       {"heldout_loss_final", r.heldout_final},
                       {"frozen_before", checksums_json(r.before)},
                       {"frozen_after", checksums_json(r.after)},
                       {"frozen_unchanged", r.before == r.after},
                       {"base_in_model_before", hex64(r.base_in_model_before)},
                       {"base_in_model_after", hex64(r.base_in_model_after)}};
    save(scope, paths.checkpoint("sr"), stamp(diffusion::sr_checkpoint(r.model), cfg, sopt.steps, scope.m.results));
    return scope.finish();
}

// ---------------------------------------------------------------- inference

struct InferInput {
    std::string id;
    std::string source;  // dataset id or file path
    ImageTensor lr;
    std::uint64_t stream_id = 0;
};

struct InferSettings {
    diffusion::SamplerConfig sampler;
    double threshold = 0.5;
    int scale = 4;
};

inline diffusion::SamplerConfig sampler_settings(const RunConfig& cfg, const CommandOptions& opt) {
    auto s = cfg.sampler;
    if (opt.steps) s.steps = *opt.steps;
    if (opt.no_lre) s.use_lre = false;
    s.seed = derive_seed(cfg.seed, 600 + cfg.sampler.seed);
    try {
        s.validate(cfg.diffusion.T);
    } catch (const ArgumentError& e) {
        throw ConfigError(e.what());
    }
    return s;
}

struct SrModel {
    FrozenStack stack;
    diffusion::ControlledUNet<float> sr;
    diffusion::NoiseSchedule schedule;
    int soft_tokens = 0;
};

inline SrModel load_sr_model(CommandScope& scope, const RunPaths& paths, const RunConfig& cfg, int sampler_steps) {
    SrModel m;
    m.stack = load_frozen_stack(scope, paths);
    m.sr = diffusion::load_sr(load_input(scope, paths, "sr", "train-sr"), m.stack.base);
    m.schedule = diffusion::make_schedule(cfg.diffusion.T, cfg.diffusion.beta_start, cfg.diffusion.beta_end, sampler_steps);
    m.soft_tokens = m.stack.dape.cfg.tokens();
    return m;
}

// How an arm or an infer run builds its prompts.
struct PromptPlan {
    bool use_hard = true;
    bool use_soft = true;
    const tagging::TagModel<float>* tagger = nullptr;  // source of prompts
    std::optional<TagSet> hard_override;
};

struct InferOutput {
    std::vector<ImageTensor> images;
    std::vector<TagSet> hard;                       // prompts actually fed to the model
    std::vector<TagSet> predicted;                  // tagger decisions on the LR input
    std::vector<std::vector<double>> probabilities; // tagger class probabilities
};

inline InferOutput run_inference(const SrModel& m, const std::vector<InferInput>& inputs, const PromptPlan& plan,
                                 const InferSettings& st, const TagVocabulary& vocab, int batch = 16) {
    InferOutput out;
    for (std::size_t b = 0; b < inputs.size(); b += batch) {
        const std::size_t e = std::min(inputs.size(), b + batch);
        diffusion::SampleRequest req;
        for (std::size_t i = b; i < e; ++i) {
            req.lr.push_back(&inputs[i].lr);
            req.ids.push_back(inputs[i].stream_id);
        }
        const auto bundles = tagging::extract_prompts(*plan.tagger, vocab, req.lr, st.threshold);
        const auto probs = tag_probabilities(*plan.tagger, req.lr);
        for (std::size_t i = 0; i < bundles.size(); ++i) {
            TagSet hard;
            if (plan.use_hard) hard = plan.hard_override ? *plan.hard_override : bundles[i].hard;
            req.hard.push_back(hard);
            req.soft.push_back(plan.use_soft ? bundles[i].soft : nn::Var<float>{});
            out.hard.push_back(hard);
            out.predicted.push_back(bundles[i].hard);
            out.probabilities.push_back(probs[i]);
        }
        req.out_h = inputs[b].lr.height * st.scale;
        req.out_w = inputs[b].lr.width * st.scale;
        for (std::size_t i = b; i < e; ++i)
            if (inputs[i].lr.height != inputs[b].lr.height || inputs[i].lr.width != inputs[b].lr.width)
                throw ArgumentError("infer: inputs in one batch must share a size");
        auto res = diffusion::sample(m.sr, m.stack.vae, m.stack.text, req, m.soft_tokens, m.schedule, st.sampler);
        for (auto& im : res.images) out.images.push_back(std::move(im));
    }
    return out;
}

inline std::vector<InferInput> dataset_inputs(const std::vector<DatasetEntry>& split) {
    std::vector<InferInput> v;
    for (std::size_t i = 0; i < split.size(); ++i)
        v.push_back({split[i].id, split[i].id, split[i].lr, static_cast<std::uint64_t>(i)});
    return v;
}

// --input: one PNG, or every PNG in a directory (sorted by name).
inline std::vector<InferInput> file_inputs(const std::string& input) {
    std::vector<fs::path> files;
    if (fs::is_directory(input)) {
        for (const auto& e : fs::directory_iterator(input))
            if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
        std::sort(files.begin(), files.end());
    } else if (fs::exists(input)) {
        files.push_back(input);
    } else {
        throw ArgumentError("--input '" + input + "' does not exist");
    }
    if (files.empty()) throw ArgumentError("--input '" + input + "' holds no PNG files");
    std::vector<InferInput> v;
    for (std::size_t i = 0; i < files.size(); ++i) {
        auto im = read_png(files[i].string());
        if (im.channels != 3) throw ArgumentError("--input: " + files[i].string() + " is not RGB");
        v.push_back({files[i].stem().string(), files[i].string(), std::move(im), static_cast<std::uint64_t>(i)});
    }
    return v;
}

inline std::string infer_name(const diffusion::SamplerConfig& s) { return s.use_lre ? "infer" : "infer-no-lre"; }

inline nlohmann::json infer(const RunConfig& cfg, const CommandOptions& opt = {}) {
    const RunPaths paths(cfg.out_dir);
    InferSettings st;
    st.sampler = sampler_settings(cfg, opt);
    st.threshold = effective_threshold(cfg, opt);
    st.scale = cfg.degradation.final_scale;
    const auto name = infer_name(st.sampler);
    CommandScope scope(cfg, paths, "infer", name);
    std::vector<InferInput> inputs;
    if (opt.input) {
        inputs = file_inputs(*opt.input);
    } else {
        const auto data = load_dataset(paths, "infer");
        scope.input(paths.dataset_index());
        inputs = dataset_inputs(data.test);
    }
    const auto model = load_sr_model(scope, paths, cfg, st.sampler.steps);
    const TagVocabulary& vocab = model.stack.text.vocab;
    PromptPlan plan{.tagger = &model.stack.dape};
    if (opt.prompt_override) plan.hard_override = make_tagset(split_prompt(*opt.prompt_override), vocab);
    JsonlLog log(scope.log_path());
    const auto out = run_inference(model, inputs, plan, st, vocab);
    const auto dir = paths.root / name;
    fs::create_directories(dir);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const auto png = dir / (inputs[i].id + ".png");
        write_png(png.string(), out.images[i]);
        const nlohmann::json side = {{"id", inputs[i].id},
                                     {"source", inputs[i].source},
                                     {"hard_prompt", prompt_text(out.hard[i])},
                                     {"tags", out.hard[i].tags},
                                     {"predicted_tags", out.predicted[i].tags},
                                     {"class_probabilities", out.probabilities[i]},
                                     {"soft_prompt_shape", {model.soft_tokens, model.stack.dape.cfg.dim()}},
                                     {"prompt_override", opt.prompt_override ? nlohmann::json(*opt.prompt_override) : nlohmann::json(nullptr)},
                                     {"seed", st.sampler.seed},
                                     {"stream_id", inputs[i].stream_id},
                                     {"use_lre", st.sampler.use_lre},
                                     {"steps", st.sampler.steps},
                                     {"lre_start", st.sampler.use_lre ? diffusion::lre_start(model.schedule, st.sampler) : 0},
                                     {"threshold", st.threshold}};
        const auto js = dir / (inputs[i].id + ".json");
        write_text(js, side.dump(2) + "\n");
        scope.output(png);
        scope.output(js);
        log({{"stage", "infer"}, {"id", inputs[i].id}, {"hard_prompt", prompt_text(out.hard[i])}});
    }
    scope.output(scope.log_path());
    scope.m.flags = {{"use_lre", st.sampler.use_lre},
                     {"no_lre", opt.no_lre},
                     {"steps", st.sampler.steps},
                     {"threshold", st.threshold},
                     {"prompt_override", opt.prompt_override ? nlohmann::json(*opt.prompt_override) : nlohmann::json(nullptr)},
                     {"input", opt.input ? nlohmann::json(*opt.input) : nlohmann::json(nullptr)}};
    scope.m.results = {{"images", inputs.size()}, {"output_dir", paths.rel(dir)}};
    return scope.finish();
}

// ---------------------------------------------------------------- evaluation

inline nlohmann::json checkpoint_ids(const RunPaths& paths) {
    nlohmann::json j = nlohmann::json::object();
    for (const char* c : {"teacher", "dape", "vae", "text_encoder", "base_unet", "sr"}) {
        const auto p = paths.checkpoint(c);
        if (fs::exists(p)) j[c] = file_hash(p);
    }
    return j;
}

// PSNR/SSIM on Y plus the flat-region deviation from the bicubic upsample.
inline eval::MetricsReport score_outputs(const std::string& name, const RunConfig& cfg, const std::vector<std::string>& ids,
                                         const std::vector<ImageTensor>& outputs, const std::vector<const DatasetEntry*>& gt) {
    std::vector<ImageTensor> refs;
    for (const auto* e : gt) refs.push_back(e->hr);
    auto r = eval::evaluate_images(name, ids, outputs, refs);
    for (std::size_t i = 0; i < outputs.size(); ++i) {
        const auto bic = resize(gt[i]->lr, gt[i]->hr.height, gt[i]->hr.width, ResizeMode::bicubic);
        r.images[i].extra["flat_dev_bicubic"] =
            eval::flat_region_deviation(gt[i]->hr, outputs[i], bic, cfg.eval.flat_window, cfg.eval.flat_percentile);
    }
    r.aggregate();
    r.metadata["flat_region"] = {{"window", cfg.eval.flat_window}, {"percentile", cfg.eval.flat_percentile}};
    return r;
}

inline nlohmann::json evaluate(const RunConfig& cfg, const CommandOptions& opt = {}) {
    const RunPaths paths(cfg.out_dir);
    const fs::path dir = opt.input ? fs::path(*opt.input) : paths.root / "infer";
    const auto name = dir.filename().string();
    CommandScope scope(cfg, paths, "evaluate", "evaluate-" + name);
    if (!fs::is_directory(dir))
        throw StateError("evaluate needs inference outputs in " + dir.string() + "; run `semsr infer` first");
    const auto data = load_dataset(paths, scope.m.command);
    scope.input(paths.dataset_index());
    std::vector<fs::path> sidecars;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".json") sidecars.push_back(e.path());
    std::sort(sidecars.begin(), sidecars.end());
    if (sidecars.empty()) throw StateError("evaluate: no inference sidecars in " + dir.string());

    std::vector<std::string> ids;
    std::vector<ImageTensor> outputs;
    std::vector<const DatasetEntry*> gt;
    std::vector<TagSet> predicted, truths;
    std::vector<std::vector<double>> probs;
    nlohmann::json settings;
    for (const auto& s : sidecars) {
        const auto side = read_json(s);
        const auto id = side.at("id").get<std::string>();
        const auto* e = data.find(id);
        if (!e) throw StateError("evaluate: no ground truth for '" + id + "'; evaluate only runs on dataset inputs");
        const auto png = dir / (id + ".png");
        scope.input(png);
        ids.push_back(id);
        outputs.push_back(read_png(png.string()));
        gt.push_back(e);
        predicted.push_back(make_tagset(side.at("predicted_tags").get<std::vector<std::string>>(), data.vocab));
        probs.push_back(side.at("class_probabilities").get<std::vector<double>>());
        truths.push_back(make_tagset(e->tags, data.vocab));
        settings = {{"use_lre", side.at("use_lre")}, {"steps", side.at("steps")}, {"seed", side.at("seed")},
                    {"threshold", side.at("threshold")}};
    }
    auto report = score_outputs(name, cfg, ids, outputs, gt);
    eval::attach_tagging(report, predicted, probs, truths, data.vocab);
    report.metadata["config_hash"] = config_hash(cfg);
    report.metadata["sampler"] = settings;
    report.metadata["checkpoints"] = checkpoint_ids(paths);
    report.metadata["source"] = dir.string();
    const auto path = paths.eval_dir() / (name + ".json");
    write_text(path, eval::to_json(report).dump(2) + "\n");
    scope.output(path);
    scope.m.flags = {{"input", dir.string()}};
    scope.m.results = {{"images", report.image_count()},
                       {"psnr_y", report.psnr_mean},
                       {"ssim_y", report.ssim_mean},
                       {"flat_dev_bicubic", report.extra_means["flat_dev_bicubic"]},
                       {"op", eval::optional_json(report.op)},
                       {"or", eval::optional_json(report.or_)},
                       {"ap", eval::optional_json(report.ap)}};
    return scope.finish();
}

// ---------------------------------------------------------------- ablation

struct ArmSpec {
    std::string name;
    bool use_hard, use_soft, teacher, use_lre;
};

// Prompt ablations run with the configured LRE setting; the last two arms
// toggle LRE on the full model.
inline std::vector<ArmSpec> ablation_arms(bool configured_lre) {
    return {{"no_prompts", false, false, false, configured_lre},
            {"teacher_prompts", true, true, true, configured_lre},
            {"hard_only", true, false, false, configured_lre},
            {"soft_only", false, true, false, configured_lre},
            {"full", true, true, false, configured_lre},
            {"lre_on", true, true, false, true},
            {"lre_off", true, true, false, false}};
}

inline std::string inputs_hash(const std::vector<InferInput>& inputs) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& in : inputs) {
        h = fnv1a(in.id.data(), in.id.size(), h);
        h = fnv1a(&in.stream_id, sizeof in.stream_id, h);
        h = fnv1a(in.lr.data.data(), in.lr.data.size() * sizeof(float), h);
    }
    return hex64(h);
}

inline nlohmann::json ablate(const RunConfig& cfg, const CommandOptions& opt = {}) {
    const RunPaths paths(cfg.out_dir);
    CommandScope scope(cfg, paths, "ablate");
    const auto data = load_dataset(paths, scope.m.command);
    scope.input(paths.dataset_index());
    const auto base_sampler = sampler_settings(cfg, opt);
    auto model = load_sr_model(scope, paths, cfg, base_sampler.steps);
    const auto teacher = load_tagger_input(scope, paths, "teacher", "train-teacher");
    const TagVocabulary& vocab = model.stack.text.vocab;
    const double threshold = effective_threshold(cfg, opt);

    JsonlLog log(scope.log_path());
    std::vector<eval::MetricsReport> reports;
    nlohmann::json hashes = nlohmann::json::object();
    struct Cached {
        std::string arm;
        InferOutput out;
        double seconds = 0;
    };
    std::map<std::string, Cached> cache;  // settings key -> first arm that ran them
    for (const auto& arm : ablation_arms(base_sampler.use_lre)) {
        // each arm rebuilds its inputs from the dataset; parity is checked on the hashes below
        const auto inputs = dataset_inputs(data.test);
        hashes[arm.name] = inputs_hash(inputs);
        InferSettings st{base_sampler, threshold, cfg.degradation.final_scale};
        st.sampler.use_lre = arm.use_lre;
        PromptPlan plan{arm.use_hard, arm.use_soft, arm.teacher ? &teacher : &model.stack.dape, std::nullopt};
        const std::string key = std::to_string(arm.use_hard) + std::to_string(arm.use_soft) +
                                std::to_string(arm.teacher) + std::to_string(arm.use_lre) + hashes[arm.name].get<std::string>();
        auto it = cache.find(key);
        std::string shared;
        if (it == cache.end()) {
            const auto t0 = std::chrono::steady_clock::now();
            auto out = run_inference(model, inputs, plan, st, vocab);
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            it = cache.emplace(key, Cached{arm.name, std::move(out), secs}).first;
        } else {
            shared = it->second.arm;
        }
        const auto& out = it->second.out;
        const double secs = it->second.seconds;
        std::vector<std::string> ids;
        std::vector<const DatasetEntry*> gt;
        std::vector<TagSet> truths;
        for (const auto& in : inputs) {
            ids.push_back(in.id);
            gt.push_back(data.find(in.id));
            truths.push_back(make_tagset(gt.back()->tags, vocab));
        }
        // score the 8-bit images `infer` would write, so arms match `evaluate`
        std::vector<ImageTensor> saved;
        for (const auto& im : out.images) saved.push_back(from8(quantize8(im).data(), im.height, im.width, im.channels));
        auto report = score_outputs(arm.name, cfg, ids, saved, gt);
        // tagging metrics describe the hard prompt the arm conditioned on
        eval::attach_tagging(report, out.hard, arm.use_hard ? out.probabilities : std::vector<std::vector<double>>{},
                             truths, vocab);
        report.metadata["arm"] = {{"use_hard", arm.use_hard},
                                  {"use_soft", arm.use_soft},
                                  {"prompt_source", arm.teacher ? "teacher" : "dape"},
                                  {"use_lre", arm.use_lre},
                                  {"steps", st.sampler.steps},
                                  {"seed", st.sampler.seed},
                                  {"inputs_hash", hashes[arm.name]}};
        if (!shared.empty()) report.metadata["outputs_shared_with"] = shared;
        report.metadata["config_hash"] = config_hash(cfg);
        report.metadata["checkpoints"] = checkpoint_ids(paths);
        report.metadata["inference_seconds"] = secs;
        log({{"stage", "ablate"}, {"arm", arm.name}, {"psnr_y", report.psnr_mean}, {"inference_seconds", secs}});
        const auto p = paths.ablate_dir() / (arm.name + ".json");
        write_text(p, eval::to_json(report).dump(2) + "\n");
        scope.output(p);
        reports.push_back(std::move(report));
    }
    bool parity = true;
    for (const auto& [k, v] : hashes.items()) parity = parity && v == hashes.begin().value();
    if (!parity) throw StateError("ablate: arms received different inputs");

    const auto csv = paths.ablate_dir() / "table.csv";
    const auto txt = paths.ablate_dir() / "table.txt";
    write_text(csv, eval::to_csv(reports));
    write_text(txt, eval::to_text_table(reports));
    scope.output(csv);
    scope.output(txt);
    scope.output(scope.log_path());

    nlohmann::json arms = nlohmann::json::object();
    for (const auto& r : reports)
        arms[r.name] = {{"psnr_y", r.psnr_mean},
                        {"ssim_y", r.ssim_mean},
                        {"flat_dev_bicubic", r.extra_means.at("flat_dev_bicubic")},
                        {"op", eval::optional_json(r.op)},
                        {"or", eval::optional_json(r.or_)},
                        {"images", r.image_count()},
                        {"inference_seconds", r.metadata.at("inference_seconds")}};
    scope.m.flags = {{"steps", base_sampler.steps}, {"threshold", threshold}};
    scope.m.results = {{"arm_count", reports.size()}, {"input_parity", parity}, {"inputs_hash", hashes.begin().value()},
                       {"arms", arms}};
    return scope.finish();
}

inline const std::vector<std::string>& command_names() {
    static const std::vector<std::string> v{"make-dataset", "train-teacher", "train-vae", "train-base", "train-dape",
                                            "train-sr",     "infer",         "evaluate",  "ablate"};
    return v;
}

inline nlohmann::json run_command(const std::string& command, const RunConfig& cfg, const CommandOptions& opt) {
    if (command == "make-dataset") return make_dataset(cfg, opt);
    if (command == "train-teacher") return train_teacher(cfg, opt);
    if (command == "train-vae") return train_vae(cfg, opt);
    if (command == "train-base") return train_base(cfg, opt);
    if (command == "train-dape") return train_dape(cfg, opt);
    if (command == "train-sr") return train_sr(cfg, opt);
    if (command == "infer") return infer(cfg, opt);
    if (command == "evaluate") return evaluate(cfg, opt);
    if (command == "ablate") return ablate(cfg, opt);
    throw ArgumentError("unknown command '" + command + "'");
}

}  // namespace semsr::pipeline
