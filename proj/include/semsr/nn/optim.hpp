#pragma once

#include <cmath>
#include <vector>

#include "semsr/nn/layers.hpp"

namespace semsr::nn {

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double clip_norm = 0.0;  // global gradient-norm clip; 0 disables
};

template <typename T>
class Adam {
public:
    Adam(ParamList<T> params, AdamOptions opts) : params_(std::move(params)), opts_(opts) {
        for (const auto& p : params_) {
            m_.emplace_back(p.var.size(), 0.0);
            v_.emplace_back(p.var.size(), 0.0);
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.var.zero_grad();
    }

    double grad_norm() const {
        double s = 0;
        for (const auto& p : params_)
            for (T g : p.var.grad()) s += static_cast<double>(g) * g;
        return std::sqrt(s);
    }

    void step() {
        ++t_;
        double clip = 1.0;
        if (opts_.clip_norm > 0) {
            const double gn = grad_norm();
            if (gn > opts_.clip_norm) clip = opts_.clip_norm / gn;
        }
        const double bc1 = 1.0 - std::pow(opts_.beta1, t_);
        const double bc2 = 1.0 - std::pow(opts_.beta2, t_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto var = params_[i].var;
            if (!var.has_grad()) continue;
            auto g = var.grad();
            auto& w = var.values();
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t k = 0; k < w.size(); ++k) {
                const double gk = g[k] * clip;
                m[k] = opts_.beta1 * m[k] + (1 - opts_.beta1) * gk;
                v[k] = opts_.beta2 * v[k] + (1 - opts_.beta2) * gk * gk;
                double upd = (m[k] / bc1) / (std::sqrt(v[k] / bc2) + opts_.eps);
                if (opts_.weight_decay > 0) upd += opts_.weight_decay * w[k];
                w[k] = static_cast<T>(w[k] - opts_.lr * upd);
            }
        }
    }

    void set_lr(double lr) { opts_.lr = lr; }
    long steps() const { return t_; }
    const ParamList<T>& params() const { return params_; }

private:
    ParamList<T> params_;
    AdamOptions opts_;
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
};

}  // namespace semsr::nn
