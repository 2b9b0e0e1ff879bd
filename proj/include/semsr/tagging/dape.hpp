#pragma once

#include "semsr/degradation.hpp"
#include "semsr/tagging/tagger.hpp"

namespace semsr::tagging {

template <typename T>
struct DapeLossTerms {
    nn::Var<T> total;
    T rep_term = 0;
    T logits_term = 0;
};

// rep term: MSE over all S x D entries; logits term: BCE of student logits
// against sigmoid(teacher logits), averaged over classes. Teacher outputs are
// treated as constants.
template <typename T>
DapeLossTerms<T> dape_loss(const nn::Var<T>& student_rep, const nn::Var<T>& student_logits, const nn::Var<T>& teacher_rep,
                           const nn::Var<T>& teacher_logits, double lambda) {
    if (!(lambda >= 0)) throw ArgumentError("dape_loss: lambda must be >= 0");
    if (student_rep.shape() != teacher_rep.shape() || student_logits.shape() != teacher_logits.shape())
        throw ArgumentError("dape_loss: student/teacher shape mismatch (" + nn::to_string(student_rep.shape()) + " vs " +
                            nn::to_string(teacher_rep.shape()) + ", " + nn::to_string(student_logits.shape()) + " vs " +
                            nn::to_string(teacher_logits.shape()) + ")");
    for (const auto* v : {&student_rep, &student_logits, &teacher_rep, &teacher_logits})
        for (T x : v->values())
            if (!std::isfinite(x)) throw NumericError("dape_loss: non-finite input");
    std::vector<T> soft(teacher_logits.size());
    for (std::size_t i = 0; i < soft.size(); ++i) soft[i] = T(1) / (T(1) + std::exp(-teacher_logits.values()[i]));
    auto rep = nn::mse_loss(student_rep, teacher_rep.detach());
    auto lg = nn::bce_with_logits(student_logits, nn::Var<T>::from(teacher_logits.shape(), std::move(soft)));
    DapeLossTerms<T> out;
    out.rep_term = rep.item();
    out.logits_term = lg.item();
    out.total = nn::add(rep, nn::scale(lg, static_cast<T>(lambda)));
    return out;
}

struct DapeTrainConfig {
    double lambda = 1.0;
    int lora_rank = 8;
    double lora_alpha = 8.0;
    double learning_rate = 1e-3;
    int batch_size = 16;
    int iterations = 1000;
    double threshold = 0.5;
    bool tune_head = true;  // false: the head stays frozen with the encoder
    int heldout = 64;

    void validate() const {
        if (!(lambda >= 0)) throw ConfigError("dape.lambda must be >= 0");
        if (lora_rank < 1) throw ConfigError("dape.lora_rank must be >= 1");
        if (learning_rate <= 0 || batch_size < 1 || iterations < 0) throw ConfigError("dape: invalid optimizer settings");
        if (!(threshold > 0 && threshold < 1)) throw ConfigError("dape.threshold must lie in (0, 1)");
    }
};

// Student = teacher copy + LoRA adapters on the encoder. Base weights are
// frozen; adapters (and the head when tune_head) are trainable.
template <typename T>
TagModel<T> make_student(const TagModel<float>& teacher, int rank, double alpha, std::uint64_t seed) {
    TagModel<T> s(teacher.cfg, teacher.classes, 0);
    nn::copy_params(teacher.base_params(), s.base_params());
    Rng rng(seed);
    s.add_lora(rank, alpha, rng);
    return s;
}

struct HeldoutPair {
    ImageTensor hr;
    ImageTensor lr;
    std::vector<std::string> tags;
};

struct DapeEval {
    double rep_term = 0;
    double logits_term = 0;
    double total = 0;
};

inline DapeEval evaluate_dape(const TagModel<float>& student, const TagModel<float>& teacher,
                              const std::vector<HeldoutPair>& set, double lambda) {
    DapeEval e;
    if (set.empty()) return e;
    nn::NoGradGuard ng;
    for (std::size_t b = 0; b < set.size(); b += 64) {
        std::vector<const ImageTensor*> hr, lr;
        for (std::size_t i = b; i < std::min(set.size(), b + 64); ++i) {
            hr.push_back(&set[i].hr);
            lr.push_back(&set[i].lr);
        }
        const auto t = teacher.forward(tagger_input<float>(hr, teacher.cfg.input_size));
        const auto s = student.forward(tagger_input<float>(lr, student.cfg.input_size));
        const auto terms = dape_loss(s.rep, s.logits, t.rep, t.logits, lambda);
        e.rep_term += terms.rep_term * hr.size();
        e.logits_term += terms.logits_term * hr.size();
    }
    e.rep_term /= set.size();
    e.logits_term /= set.size();
    e.total = e.rep_term + lambda * e.logits_term;
    return e;
}

struct DapeTrainResult {
    TagModel<float> student;
    DapeEval initial, final_;
    std::uint64_t teacher_checksum_before = 0, teacher_checksum_after = 0;
    std::uint64_t base_checksum_teacher = 0, base_checksum_student = 0;  // encoder weights
};

// LR inputs are synthesized on the fly from the HR images with fresh seeds.
inline DapeTrainResult train_dape(const TagModel<float>& teacher, const std::vector<ImageTensor>& hr_images,
                                  const std::vector<HeldoutPair>& heldout, const degradation::DegradationConfig& deg,
                                  const DapeTrainConfig& cfg, std::uint64_t seed, const LogFn& log = nullptr) {
    cfg.validate();
    if (!teacher.initialized()) throw StateError("train_dape: teacher is not initialized");
    if (teacher.lora_rank != 0) throw StateError("train_dape: teacher already carries adapters");
    if (hr_images.empty()) throw ArgumentError("train_dape: empty dataset");
    DapeTrainResult r;
    r.teacher_checksum_before = nn::checksum(teacher.all_params());
    r.student = make_student<float>(teacher, cfg.lora_rank, cfg.lora_alpha, derive_seed(seed, 21));
    if (r.student.cfg.dim() != teacher.cfg.dim() || r.student.classes != teacher.classes)
        throw StateError("train_dape: student/teacher architecture mismatch");
    r.initial = evaluate_dape(r.student, teacher, heldout, cfg.lambda);

    nn::set_trainable(r.student.encoder_params(), false);
    nn::set_trainable(r.student.head_params(), cfg.tune_head);
    auto trainable = r.student.lora_params();
    if (cfg.tune_head)
        for (auto& p : r.student.head_params()) trainable.push_back(p);
    nn::Adam<float> adam(trainable, {.lr = cfg.learning_rate, .clip_norm = 1.0});

    Rng rng(derive_seed(seed, 22));
    for (int it = 0; it < cfg.iterations; ++it) {
        adam.set_lr(cfg.learning_rate * (0.1 + 0.9 * 0.5 * (1 + std::cos(M_PI * it / std::max(1, cfg.iterations)))));
        std::vector<ImageTensor> lr_store;
        std::vector<const ImageTensor*> hr, lr;
        lr_store.reserve(cfg.batch_size);
        for (int b = 0; b < cfg.batch_size; ++b) {
            const auto& im = hr_images[rng.uniform_int(0, static_cast<long>(hr_images.size()) - 1)];
            hr.push_back(&im);
            lr_store.push_back(degradation::synthesize_pair(im, deg, rng.next_u64()).lr);
        }
        for (const auto& l : lr_store) lr.push_back(&l);
        TagOutput<float> t;
        {
            nn::NoGradGuard ng;
            t = teacher.forward(tagger_input<float>(hr, teacher.cfg.input_size));
        }
        const auto s = r.student.forward(tagger_input<float>(lr, r.student.cfg.input_size));
        auto terms = dape_loss(s.rep, s.logits, t.rep, t.logits, cfg.lambda);
        adam.zero_grad();
        nn::backward(terms.total);
        adam.step();
        if (log && (it % 50 == 0 || it + 1 == cfg.iterations))
            log({{"stage", "dape"}, {"step", it}, {"loss", terms.total.item()}, {"rep", terms.rep_term},
                 {"logits", terms.logits_term}});
    }
    nn::set_trainable(r.student.encoder_params(), true);
    nn::set_trainable(r.student.head_params(), true);
    r.final_ = evaluate_dape(r.student, teacher, heldout, cfg.lambda);
    r.teacher_checksum_after = nn::checksum(teacher.all_params());
    r.base_checksum_teacher = nn::checksum(teacher.encoder_params());
    r.base_checksum_student = nn::checksum(r.student.encoder_params());
    return r;
}

// Hard prompt (decoded tags) plus soft prompt (representation sequence).
struct PromptBundle {
    TagSet hard;
    nn::Var<float> soft;  // [S, D]
};

inline std::vector<PromptBundle> extract_prompts(const TagModel<float>& model, const TagVocabulary& vocab,
                                                 const std::vector<const ImageTensor*>& images, double threshold) {
    if (images.empty()) return {};
    const auto out = encode_images(model, images);
    const auto rows = logits_rows(out.logits);
    const int S = out.rep.dim(1), D = out.rep.dim(2);
    std::vector<PromptBundle> bundles;
    for (std::size_t n = 0; n < images.size(); ++n) {
        PromptBundle b;
        b.hard = decode_tags(rows[n], vocab, threshold);
        std::vector<float> v(out.rep.values().begin() + n * S * D, out.rep.values().begin() + (n + 1) * S * D);
        b.soft = nn::Var<float>::from({S, D}, std::move(v));
        bundles.push_back(std::move(b));
    }
    return bundles;
}

// Stacks soft prompts into [N, S, D].
template <typename T>
nn::Var<T> stack_soft(const std::vector<const PromptBundle*>& bundles) {
    if (bundles.empty()) throw ArgumentError("stack_soft: empty batch");
    const auto shape = bundles.front()->soft.shape();
    std::vector<T> out;
    for (const auto* b : bundles) {
        if (b->soft.shape() != shape) throw ArgumentError("stack_soft: soft prompts differ in shape");
        out.insert(out.end(), b->soft.values().begin(), b->soft.values().end());
    }
    return nn::Var<T>::from({static_cast<int>(bundles.size()), shape[0], shape[1]}, std::move(out));
}

inline nlohmann::json bundle_to_json(const PromptBundle& b) {
    return {{"hard_prompt", prompt_text(b.hard)},
            {"tags", b.hard.tags},
            {"scores", b.hard.scores},
            {"soft_prompt_shape", b.soft.defined() ? b.soft.shape() : nn::Shape{}}};
}

}  // namespace semsr::tagging
