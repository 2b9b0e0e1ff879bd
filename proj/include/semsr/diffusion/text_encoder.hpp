#pragma once

#include <cmath>

#include "semsr/checkpoint.hpp"
#include "semsr/nn/layers.hpp"
#include "semsr/tags.hpp"

namespace semsr::diffusion {

// Frozen stand-in for a text encoder: tag tokens (vocabulary order, separated
// by a separator token, right-padded) looked up in a fixed random table plus a
// sinusoidal position code. Token ids: tags 0..C-1, separator C, pad C+1.
struct TextEncoder {
    TagVocabulary vocab;
    int dim = 32;
    nn::Var<float> table;  // [C + 2, dim]

    TextEncoder() = default;
    TextEncoder(TagVocabulary v, int d, std::uint64_t seed) : vocab(std::move(v)), dim(d) {
        Rng rng(seed);
        std::vector<float> t(static_cast<std::size_t>(vocab.size() + 2) * dim);
        for (auto& x : t) x = static_cast<float>(rng.normal());
        table = nn::Var<float>::from({vocab.size() + 2, dim}, std::move(t));
    }

    int separator() const { return vocab.size(); }
    int pad() const { return vocab.size() + 1; }
    int context_length() const { return 2 * vocab.size() - 1; }

    std::vector<int> tokenize(const TagSet& tags) const {
        std::vector<int> idx;
        for (const auto& t : tags.tags) idx.push_back(vocab.index(t));
        std::sort(idx.begin(), idx.end());
        idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
        std::vector<int> tok;
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (i) tok.push_back(separator());
            tok.push_back(idx[i]);
        }
        tok.resize(context_length(), pad());
        return tok;
    }

    // Returns [N, context_length, dim] in the requested scalar type.
    template <typename T>
    nn::Var<T> encode(const std::vector<TagSet>& batch) const {
        if (!table.defined()) throw StateError("text encoder is not initialized");
        const int L = context_length();
        std::vector<T> out(batch.size() * L * dim);
        for (std::size_t n = 0; n < batch.size(); ++n) {
            const auto tok = tokenize(batch[n]);
            for (int l = 0; l < L; ++l)
                for (int d = 0; d < dim; ++d) {
                    const int i = d / 2;
                    const double freq = std::exp(-std::log(100.0) * 2.0 * i / dim);
                    const double pos = d % 2 ? std::cos(l * freq) : std::sin(l * freq);
                    out[(n * L + l) * dim + d] = static_cast<T>(table.values()[tok[l] * dim + d] + 0.5 * pos);
                }
        }
        return nn::Var<T>::from({static_cast<int>(batch.size()), L, dim}, std::move(out));
    }

    nn::ParamList<float> params() const { return {{"text.table", table}}; }

    Checkpoint to_checkpoint() const {
        Checkpoint ck;
        ck.kind = "text_encoder";
        ck.hparams = {{"vocabulary", vocab.classes()}, {"dim", dim}};
        ck.put(params());
        return ck;
    }

    static TextEncoder from_checkpoint(const Checkpoint& ck) {
        if (ck.kind != "text_encoder") throw StateError("expected a text_encoder checkpoint, got '" + ck.kind + "'");
        TextEncoder enc;
        enc.vocab = TagVocabulary(ck.hparams.at("vocabulary").get<std::vector<std::string>>());
        enc.dim = ck.hparams.at("dim").get<int>();
        enc.table = nn::Var<float>::zeros({enc.vocab.size() + 2, enc.dim});
        ck.get(enc.params());
        return enc;
    }
};

}  // namespace semsr::diffusion
