#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "semsr/core/rng.hpp"
#include "semsr/nn/var.hpp"

namespace semsr::testing {

struct GradCheckResult {
    double max_rel_error = 0.0;
    int checked = 0;
};

inline double relative_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

// Central finite differences of a scalar loss with respect to `samples`
// entries of `param`, compared against the gradient left in param by a
// backward pass. `loss_fn` must rebuild the graph on each call. The default
// step keeps round-off (about 1e-16 * |loss| / eps) well below 1e-3 of the
// small gradient entries; truncation error at this step is O(eps^2).
inline GradCheckResult gradcheck(const std::function<nn::Var<double>()>& loss_fn, nn::Var<double> param,
                                 int samples, std::uint64_t seed, double eps = 1e-4) {
    param.zero_grad();
    auto loss = loss_fn();
    nn::backward(loss);
    std::vector<double> analytic(param.grad().begin(), param.grad().end());
    Rng rng(seed);
    GradCheckResult r;
    const int n = static_cast<int>(param.size());
    for (int s = 0; s < std::min(samples, n); ++s) {
        const auto idx = samples >= n ? static_cast<std::size_t>(s) : static_cast<std::size_t>(rng.uniform_int(0, n - 1));
        const double orig = param.values()[idx];
        double plus = 0, minus = 0;
        {
            nn::NoGradGuard ng;
            param.values()[idx] = orig + eps;
            plus = loss_fn().item();
            param.values()[idx] = orig - eps;
            minus = loss_fn().item();
            param.values()[idx] = orig;
        }
        const double numeric = (plus - minus) / (2 * eps);
        r.max_rel_error = std::max(r.max_rel_error, relative_error(analytic[idx], numeric));
        ++r.checked;
    }
    return r;
}

inline nn::Var<double> random_var(nn::Shape shape, Rng& rng, bool requires_grad = true, double scale = 1.0) {
    std::vector<double> v(nn::numel(shape));
    for (auto& x : v) x = rng.normal() * scale;
    return nn::Var<double>::from(std::move(shape), std::move(v), requires_grad);
}

}  // namespace semsr::testing
