#pragma once

#include <functional>

#include <json.hpp>

#include "semsr/checkpoint.hpp"
#include "semsr/image/resize.hpp"
#include "semsr/nn/optim.hpp"
#include "semsr/tags.hpp"

namespace semsr::tagging {

// Convolutional stem down to a tokens_side x tokens_side map of width dim,
// one pre-norm transformer block over the S = tokens_side^2 tokens, and a
// linear tagging head on the mean token.
struct TaggerConfig {
    int input_size = 32;
    int tokens_side = 4;
    std::vector<int> widths{16, 32, 64, 64};  // stem width, then one per stride-2 stage
    int mlp_hidden = 128;

    int dim() const { return widths.back(); }
    int tokens() const { return tokens_side * tokens_side; }

    void validate() const {
        if (input_size < 1 || tokens_side < 1 || input_size % tokens_side)
            throw ConfigError("tagger: input_size must be a multiple of tokens_side");
        int downs = 0;
        for (int r = input_size / tokens_side; r > 1; r /= 2) {
            if (r % 2) throw ConfigError("tagger: input_size / tokens_side must be a power of two");
            ++downs;
        }
        if (static_cast<int>(widths.size()) != downs + 1)
            throw ConfigError("tagger: expected " + std::to_string(downs + 1) + " widths");
        for (int w : widths)
            if (w < 1) throw ConfigError("tagger: widths must be positive");
        if (mlp_hidden < 1) throw ConfigError("tagger: mlp_hidden must be positive");
    }
};

inline nlohmann::json to_json(const TaggerConfig& c) {
    return {{"input_size", c.input_size}, {"tokens_side", c.tokens_side}, {"widths", c.widths}, {"mlp_hidden", c.mlp_hidden}};
}

inline TaggerConfig tagger_config_from_json(const nlohmann::json& j) {
    TaggerConfig c;
    c.input_size = j.at("input_size").get<int>();
    c.tokens_side = j.at("tokens_side").get<int>();
    c.widths = j.at("widths").get<std::vector<int>>();
    c.mlp_hidden = j.at("mlp_hidden").get<int>();
    c.validate();
    return c;
}

template <typename T>
struct TagOutput {
    nn::Var<T> rep;     // [N, S, D]
    nn::Var<T> logits;  // [N, C]
};

template <typename T>
struct TagModel {
    TaggerConfig cfg;
    int classes = 0;
    std::vector<nn::Conv2d<T>> convs;
    nn::Var<T> pos;  // [S, D]
    nn::LayerNorm<T> ln1, ln2, ln_out;
    nn::Attention<T> attn;
    nn::Linear<T> mlp1, mlp2;
    nn::Linear<T> head;
    int lora_rank = 0;
    double lora_alpha = 0;

    TagModel() = default;
    TagModel(const TaggerConfig& c, int num_classes, std::uint64_t seed) : cfg(c), classes(num_classes) {
        cfg.validate();
        if (classes < 2) throw ArgumentError("tagger needs at least two classes");
        Rng rng(seed);
        const int D = cfg.dim();
        convs.emplace_back(3, cfg.widths[0], 3, 1, rng);
        for (std::size_t i = 1; i < cfg.widths.size(); ++i) convs.emplace_back(cfg.widths[i - 1], cfg.widths[i], 3, 2, rng);
        pos = nn::randn_param<T>({cfg.tokens(), D}, rng, 0.1);
        ln1 = nn::LayerNorm<T>(D);
        ln2 = nn::LayerNorm<T>(D);
        ln_out = nn::LayerNorm<T>(D);
        attn = nn::Attention<T>(D, D, D, rng);
        mlp1 = nn::Linear<T>(D, cfg.mlp_hidden, rng);
        mlp2 = nn::Linear<T>(cfg.mlp_hidden, D, rng);
        head = nn::Linear<T>(D, classes, rng);
    }

    bool initialized() const { return !convs.empty(); }

    // x: [N, 3, input_size, input_size] on the [-1, 1] scale.
    TagOutput<T> forward(const nn::Var<T>& x) const {
        if (!initialized()) throw StateError("tagger is not initialized");
        if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != cfg.input_size || x.dim(3) != cfg.input_size)
            throw ArgumentError("tagger: expected [N, 3, " + std::to_string(cfg.input_size) + ", " +
                                std::to_string(cfg.input_size) + "] input, got " + nn::to_string(x.shape()));
        nn::Var<T> h = x;
        for (const auto& c : convs) h = nn::silu(c(h));
        auto tok = nn::add_broadcast(nn::to_tokens(h), pos);
        const auto a = ln1(tok);
        tok = nn::add(tok, attn(a, a));
        tok = nn::add(tok, mlp2(nn::silu(mlp1(ln2(tok)))));
        TagOutput<T> out;
        out.rep = ln_out(tok);
        out.logits = head(nn::mean_tokens(out.rep));
        return out;
    }

    // Encoder parameters (everything but the head).
    nn::ParamList<T> encoder_params() const {
        nn::ParamList<T> p;
        for (std::size_t i = 0; i < convs.size(); ++i) convs[i].collect("conv" + std::to_string(i), p);
        p.push_back({"pos", pos});
        ln1.collect("ln1", p);
        attn.collect("attn", p);
        ln2.collect("ln2", p);
        mlp1.collect("mlp1", p);
        mlp2.collect("mlp2", p);
        ln_out.collect("ln_out", p);
        return p;
    }

    nn::ParamList<T> head_params() const {
        nn::ParamList<T> p;
        head.collect("head", p);
        return p;
    }

    nn::ParamList<T> base_params() const {
        auto p = encoder_params();
        for (auto& h : head_params()) p.push_back(h);
        return p;
    }

    // LoRA on every conv and linear projection of the encoder.
    void add_lora(int rank, double alpha, Rng& rng) {
        if (rank < 1) throw ConfigError("lora rank must be >= 1");
        for (auto& c : convs) c.add_lora(rank, alpha, rng);
        attn.add_lora(rank, alpha, rng);
        mlp1.add_lora(rank, alpha, rng);
        mlp2.add_lora(rank, alpha, rng);
        lora_rank = rank;
        lora_alpha = alpha;
    }

    nn::ParamList<T> lora_params() const {
        nn::ParamList<T> p;
        for (std::size_t i = 0; i < convs.size(); ++i) convs[i].collect_lora("conv" + std::to_string(i), p);
        attn.collect_lora("attn", p);
        mlp1.collect_lora("mlp1", p);
        mlp2.collect_lora("mlp2", p);
        return p;
    }

    nn::ParamList<T> all_params() const {
        auto p = base_params();
        for (auto& l : lora_params()) p.push_back(l);
        return p;
    }
};

// Resizes to the model resolution (bicubic) and stacks on the [-1, 1] scale.
template <typename T>
nn::Var<T> tagger_input(const std::vector<const ImageTensor*>& images, int input_size) {
    std::vector<ImageTensor> resized;
    resized.reserve(images.size());
    for (const auto* im : images) {
        if (im->channels != 3) throw ArgumentError("tagger expects RGB images");
        resized.push_back(resize(*im, input_size, input_size, ResizeMode::bicubic));
    }
    return to_batch<T>(resized, -1.0f, 1.0f);
}

template <typename T>
TagOutput<T> encode_images(const TagModel<T>& model, const std::vector<const ImageTensor*>& images) {
    nn::NoGradGuard ng;
    return model.forward(tagger_input<T>(images, model.cfg.input_size));
}

// Per-image logits as doubles.
template <typename T>
std::vector<std::vector<double>> logits_rows(const nn::Var<T>& logits) {
    const int N = logits.dim(0), C = logits.dim(1);
    std::vector<std::vector<double>> out(N, std::vector<double>(C));
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) out[n][c] = logits.values()[n * C + c];
    return out;
}

// ---------------------------------------------------------------- checkpoints

inline Checkpoint tagger_checkpoint(const TagModel<float>& m, const TagVocabulary& vocab, const std::string& kind) {
    Checkpoint ck;
    ck.kind = kind;
    ck.hparams = {{"tagger", to_json(m.cfg)}, {"vocabulary", vocab.classes()}, {"lora_rank", m.lora_rank},
                  {"lora_alpha", m.lora_alpha}};
    ck.put(m.all_params());
    return ck;
}

struct LoadedTagger {
    TagModel<float> model;
    TagVocabulary vocab;
};

inline LoadedTagger load_tagger(const Checkpoint& ck) {
    if (ck.kind != "tag_teacher" && ck.kind != "dape")
        throw StateError("expected a tagger checkpoint, got '" + ck.kind + "'");
    LoadedTagger out;
    out.vocab = TagVocabulary(ck.hparams.at("vocabulary").get<std::vector<std::string>>());
    out.model = TagModel<float>(tagger_config_from_json(ck.hparams.at("tagger")), out.vocab.size(), 0);
    const int rank = ck.hparams.value("lora_rank", 0);
    if (rank > 0) {
        Rng rng(0);
        out.model.add_lora(rank, ck.hparams.at("lora_alpha").get<double>(), rng);
    }
    ck.get(out.model.all_params());
    return out;
}

// ---------------------------------------------------------------- training

struct LabeledImage {
    ImageTensor image;
    std::vector<std::string> tags;
};

struct TeacherTrainOptions {
    int steps = 1500;
    int batch = 16;
    double lr = 1e-3;
    double holdout_fraction = 0.15;
    bool augment = true;  // random flips and quarter turns; the toy tags are invariant to them
    std::uint64_t seed = 0;
};

struct TeacherTrainResult {
    TagModel<float> model;
    double heldout_bce_initial = 0;
    double heldout_bce_final = 0;
    double heldout_exact_match = 0;
};

inline std::vector<float> tag_targets(const std::vector<const LabeledImage*>& batch, const TagVocabulary& vocab) {
    std::vector<float> y(batch.size() * vocab.size(), 0.0f);
    for (std::size_t n = 0; n < batch.size(); ++n)
        for (const auto& t : batch[n]->tags) y[n * vocab.size() + vocab.index(t)] = 1.0f;
    return y;
}

struct HeldoutTagStats {
    double bce = 0;
    double exact_match = 0;
};

inline HeldoutTagStats evaluate_tagger(const TagModel<float>& m, const std::vector<const LabeledImage*>& set,
                                       const TagVocabulary& vocab, double threshold = 0.5) {
    HeldoutTagStats s;
    if (set.empty()) return s;
    nn::NoGradGuard ng;
    for (std::size_t b = 0; b < set.size(); b += 64) {
        std::vector<const LabeledImage*> chunk(set.begin() + b, set.begin() + std::min(set.size(), b + 64));
        std::vector<const ImageTensor*> ims;
        for (auto* e : chunk) ims.push_back(&e->image);
        const auto out = m.forward(tagger_input<float>(ims, m.cfg.input_size));
        const auto y = tag_targets(chunk, vocab);
        s.bce += nn::bce_with_logits(out.logits, nn::Var<float>::from(out.logits.shape(), y)).item() * chunk.size();
        const auto rows = logits_rows(out.logits);
        for (std::size_t n = 0; n < chunk.size(); ++n) {
            const auto pred = decode_tags(rows[n], vocab, threshold);
            s.exact_match += pred.tags == chunk[n]->tags;
        }
    }
    s.bce /= set.size();
    s.exact_match /= set.size();
    return s;
}

using LogFn = std::function<void(const nlohmann::json&)>;

// Multi-label BCE on ground-truth tags. Samples' tags must be in vocabulary
// order (as produced by make_tagset / the scene generator).
inline TeacherTrainResult train_teacher(const std::vector<LabeledImage>& data, const TagVocabulary& vocab,
                                        const TaggerConfig& cfg, const TeacherTrainOptions& opt,
                                        const LogFn& log = nullptr) {
    if (data.empty()) throw ArgumentError("train_teacher: empty dataset");
    for (const auto& d : data) {
        const auto canon = make_tagset(d.tags, vocab).tags;
        if (canon != d.tags) throw ArgumentError("train_teacher: sample tags must be unique and in vocabulary order");
    }
    const std::size_t n_hold = std::min(data.size() - 1, static_cast<std::size_t>(data.size() * opt.holdout_fraction));
    std::vector<const LabeledImage*> train, hold;
    for (std::size_t i = 0; i < data.size(); ++i) (i < data.size() - n_hold ? train : hold).push_back(&data[i]);

    TeacherTrainResult r;
    r.model = TagModel<float>(cfg, vocab.size(), derive_seed(opt.seed, 11));
    r.heldout_bce_initial = evaluate_tagger(r.model, hold, vocab).bce;
    nn::Adam<float> adam(r.model.base_params(), {.lr = opt.lr, .clip_norm = 1.0});
    Rng rng(derive_seed(opt.seed, 12));
    for (int step = 0; step < opt.steps; ++step) {
        std::vector<const LabeledImage*> batch;
        std::vector<ImageTensor> store;
        std::vector<const ImageTensor*> ims;
        store.reserve(opt.batch);
        for (int b = 0; b < opt.batch; ++b) {
            batch.push_back(train[rng.uniform_int(0, static_cast<long>(train.size()) - 1)]);
            if (opt.augment) {
                store.push_back(dihedral(batch.back()->image, static_cast<int>(rng.uniform_int(0, 7))));
                ims.push_back(&store.back());
            } else {
                ims.push_back(&batch.back()->image);
            }
        }
        const auto out = r.model.forward(tagger_input<float>(ims, cfg.input_size));
        auto loss = nn::bce_with_logits(out.logits, nn::Var<float>::from(out.logits.shape(), tag_targets(batch, vocab)));
        adam.zero_grad();
        nn::backward(loss);
        adam.step();
        if (log && (step % 50 == 0 || step + 1 == opt.steps))
            log({{"stage", "teacher"}, {"step", step}, {"loss", loss.item()}});
    }
    const auto fin = evaluate_tagger(r.model, hold, vocab);
    r.heldout_bce_final = fin.bce;
    r.heldout_exact_match = fin.exact_match;
    return r;
}

}  // namespace semsr::tagging
