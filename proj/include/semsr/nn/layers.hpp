#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "semsr/core/rng.hpp"
#include "semsr/nn/ops.hpp"

namespace semsr::nn {

template <typename T>
struct ParamRef {
    std::string name;
    Var<T> var;
};

template <typename T>
using ParamList = std::vector<ParamRef<T>>;

template <typename T>
Var<T> randn_param(Shape shape, Rng& rng, double stddev) {
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.normal() * stddev);
    return Var<T>::from(std::move(shape), std::move(v), true);
}

template <typename T>
Var<T> const_param(Shape shape, T value) {
    auto v = Var<T>::full(std::move(shape), value);
    v.set_requires_grad(true);
    return v;
}

template <typename T>
void set_trainable(const ParamList<T>& params, bool trainable) {
    for (const auto& p : params) {
        auto v = p.var;
        v.set_requires_grad(trainable);
        if (!trainable) v.zero_grad();
    }
}

// Copies values by name; every name in dst must exist in src with equal size.
template <typename T, typename U>
void copy_params(const ParamList<U>& src, const ParamList<T>& dst) {
    std::map<std::string, const Var<U>*> index;
    for (const auto& p : src) index[p.name] = &p.var;
    for (const auto& p : dst) {
        auto it = index.find(p.name);
        if (it == index.end()) throw StateError("copy_params: missing tensor '" + p.name + "'");
        const auto& s = it->second->values();
        auto dv = p.var;
        if (s.size() != dv.size()) throw StateError("copy_params: size mismatch for '" + p.name + "'");
        for (std::size_t i = 0; i < s.size(); ++i) dv.values()[i] = static_cast<T>(s[i]);
    }
}

template <typename T>
std::size_t count_params(const ParamList<T>& params) {
    std::size_t n = 0;
    for (const auto& p : params) n += p.var.size();
    return n;
}

// FNV-1a over the raw parameter bytes, in list order. Used for freeze checks.
template <typename T>
std::uint64_t checksum(const ParamList<T>& params) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mixin = [&h](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ULL;
        }
    };
    for (const auto& p : params) {
        mixin(p.name.data(), p.name.size());
        mixin(p.var.values().data(), p.var.size() * sizeof(T));
    }
    return h;
}

// Low-rank weight update: W_eff = W + (alpha / rank) * up * down.
template <typename T>
struct LoraAdapter {
    Var<T> down;  // [rank, in]
    Var<T> up;    // [out, rank], zero at init
    T scaling = T(1);

    LoraAdapter() = default;
    LoraAdapter(int out_features, int in_features, int rank, double alpha, Rng& rng)
        : down(randn_param<T>({rank, in_features}, rng, 1.0 / std::sqrt(static_cast<double>(in_features)))),
          up(const_param<T>({out_features, rank}, T(0))),
          scaling(static_cast<T>(alpha / rank)) {}

    Var<T> apply(const Var<T>& weight) const { return add(weight, scale(matmul(up, down), scaling)); }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.push_back({prefix + ".lora_down", down});
        out.push_back({prefix + ".lora_up", up});
    }
};

template <typename T>
struct Linear {
    Var<T> weight;  // [out, in]
    Var<T> bias;    // [out]
    std::optional<LoraAdapter<T>> lora;

    Linear() = default;
    Linear(int in, int out, Rng& rng, bool with_bias = true, bool zero_init = false)
        : weight(zero_init ? const_param<T>({out, in}, T(0))
                           : randn_param<T>({out, in}, rng, 1.0 / std::sqrt(static_cast<double>(in)))) {
        if (with_bias) bias = const_param<T>({out}, T(0));
    }

    int in_features() const { return weight.dim(1); }
    int out_features() const { return weight.dim(0); }

    void add_lora(int rank, double alpha, Rng& rng) { lora.emplace(out_features(), in_features(), rank, alpha, rng); }

    Var<T> effective_weight() const { return lora ? lora->apply(weight) : weight; }

    Var<T> operator()(const Var<T>& x) const { return linear(x, effective_weight(), bias); }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.push_back({prefix + ".weight", weight});
        if (bias.defined()) out.push_back({prefix + ".bias", bias});
    }
    void collect_lora(const std::string& prefix, ParamList<T>& out) const {
        if (lora) lora->collect(prefix, out);
    }
};

template <typename T>
struct Conv2d {
    Var<T> weight;  // [out, in * k * k]
    Var<T> bias;
    int kernel = 3, stride = 1, pad = 1;
    std::optional<LoraAdapter<T>> lora;

    Conv2d() = default;
    Conv2d(int in, int out, int k, int s, Rng& rng, bool zero_init = false)
        : weight(zero_init ? const_param<T>({out, in * k * k}, T(0))
                           : randn_param<T>({out, in * k * k}, rng, 1.0 / std::sqrt(static_cast<double>(in * k * k)))),
          bias(const_param<T>({out}, T(0))),
          kernel(k),
          stride(s),
          pad(k / 2) {}

    int in_channels() const { return weight.dim(1) / (kernel * kernel); }
    int out_channels() const { return weight.dim(0); }

    void add_lora(int rank, double alpha, Rng& rng) { lora.emplace(out_channels(), weight.dim(1), rank, alpha, rng); }

    Var<T> operator()(const Var<T>& x) const {
        return conv2d(x, lora ? lora->apply(weight) : weight, bias, kernel, stride, pad);
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.push_back({prefix + ".weight", weight});
        out.push_back({prefix + ".bias", bias});
    }
    void collect_lora(const std::string& prefix, ParamList<T>& out) const {
        if (lora) lora->collect(prefix, out);
    }
};

template <typename T>
struct GroupNorm {
    Var<T> gamma, beta;
    int groups = 8;

    GroupNorm() = default;
    GroupNorm(int channels, int g)
        : gamma(const_param<T>({channels}, T(1))), beta(const_param<T>({channels}, T(0))), groups(std::min(g, channels)) {
        while (channels % groups) --groups;
    }

    Var<T> operator()(const Var<T>& x) const { return group_norm(x, groups, gamma, beta); }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.push_back({prefix + ".gamma", gamma});
        out.push_back({prefix + ".beta", beta});
    }
};

template <typename T>
struct LayerNorm {
    Var<T> gamma, beta;

    LayerNorm() = default;
    explicit LayerNorm(int dim) : gamma(const_param<T>({dim}, T(1))), beta(const_param<T>({dim}, T(0))) {}

    Var<T> operator()(const Var<T>& x) const { return layer_norm(x, gamma, beta); }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.push_back({prefix + ".gamma", gamma});
        out.push_back({prefix + ".beta", beta});
    }
};

// Single-head attention with separate query/key/value/output projections.
// Self-attention when context is the query sequence itself.
template <typename T>
struct Attention {
    Linear<T> to_q, to_k, to_v, to_out;

    Attention() = default;
    Attention(int query_dim, int context_dim, int inner_dim, Rng& rng, bool zero_out = false)
        : to_q(query_dim, inner_dim, rng, false),
          to_k(context_dim, inner_dim, rng, false),
          to_v(context_dim, inner_dim, rng, false),
          to_out(inner_dim, query_dim, rng, true, zero_out) {}

    Var<T> operator()(const Var<T>& x, const Var<T>& context) const {
        return to_out(attention(to_q(x), to_k(context), to_v(context)));
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        to_q.collect(prefix + ".q", out);
        to_k.collect(prefix + ".k", out);
        to_v.collect(prefix + ".v", out);
        to_out.collect(prefix + ".out", out);
    }

    void add_lora(int rank, double alpha, Rng& rng) {
        to_q.add_lora(rank, alpha, rng);
        to_k.add_lora(rank, alpha, rng);
        to_v.add_lora(rank, alpha, rng);
        to_out.add_lora(rank, alpha, rng);
    }
    void collect_lora(const std::string& prefix, ParamList<T>& out) const {
        to_q.collect_lora(prefix + ".q", out);
        to_k.collect_lora(prefix + ".k", out);
        to_v.collect_lora(prefix + ".v", out);
        to_out.collect_lora(prefix + ".out", out);
    }
};

// Pre-norm residual conv block with an optional per-channel conditioning
// vector (timestep embedding) injected between the two convolutions.
template <typename T>
struct ResBlock {
    GroupNorm<T> norm1, norm2;
    Conv2d<T> conv1, conv2;
    std::optional<Linear<T>> cond_proj;
    std::optional<Conv2d<T>> skip;

    ResBlock() = default;
    ResBlock(int in, int out, int cond_dim, int groups, Rng& rng)
        : norm1(in, groups), norm2(out, groups), conv1(in, out, 3, 1, rng), conv2(out, out, 3, 1, rng) {
        if (cond_dim > 0) cond_proj.emplace(cond_dim, out, rng);
        if (in != out) skip.emplace(in, out, 1, 1, rng);
    }

    Var<T> operator()(const Var<T>& x, const Var<T>& cond = {}) const {
        Var<T> h = conv1(silu(norm1(x)));
        if (cond_proj && cond.defined()) h = add_channel(h, (*cond_proj)(silu(cond)));
        h = conv2(silu(norm2(h)));
        return add(skip ? (*skip)(x) : x, h);
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        norm1.collect(prefix + ".norm1", out);
        conv1.collect(prefix + ".conv1", out);
        if (cond_proj) cond_proj->collect(prefix + ".cond", out);
        norm2.collect(prefix + ".norm2", out);
        conv2.collect(prefix + ".conv2", out);
        if (skip) skip->collect(prefix + ".skip", out);
    }
};

// Sinusoidal embedding of integer timesteps; returns [N, dim].
template <typename T>
Var<T> timestep_embedding(const std::vector<int>& steps, int dim, double max_period = 10000.0) {
    const int half = dim / 2;
    std::vector<T> out(steps.size() * dim, T(0));
    for (std::size_t n = 0; n < steps.size(); ++n)
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(max_period) * i / half);
            const double a = steps[n] * freq;
            out[n * dim + i] = static_cast<T>(std::cos(a));
            out[n * dim + half + i] = static_cast<T>(std::sin(a));
        }
    return Var<T>::from({static_cast<int>(steps.size()), dim}, std::move(out));
}

}  // namespace semsr::nn
