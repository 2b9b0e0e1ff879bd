#include <gtest/gtest.h>

#include "semsr/nn/layers.hpp"
#include "semsr/nn/optim.hpp"
#include "support/gradcheck.hpp"

using namespace semsr;
using namespace semsr::nn;
using semsr::testing::gradcheck;
using semsr::testing::random_var;

namespace {

// Projects an op output to a scalar with fixed random weights so every output
// entry contributes a distinct gradient.
Var<double> project(const Var<double>& y, std::uint64_t seed) {
    Rng rng(seed);
    auto w = random_var(y.shape(), rng, false);
    return mean(mul(y, w));
}

void expect_grad_ok(const std::function<Var<double>()>& f, const Var<double>& p, const char* what) {
    auto r = gradcheck(f, p, 12, 17);
    EXPECT_LT(r.max_rel_error, 1e-5) << what;
}

}  // namespace

TEST(NnOps, ConvGradients) {
    Rng rng(1);
    auto x = random_var({2, 3, 7, 6}, rng);
    auto w = random_var({4, 3 * 9}, rng);
    auto b = random_var({4}, rng);
    for (int stride : {1, 2}) {
        auto f = [&] { return project(conv2d(x, w, b, 3, stride, 1), 5); };
        expect_grad_ok(f, x, "conv x");
        expect_grad_ok(f, w, "conv w");
        expect_grad_ok(f, b, "conv b");
    }
    auto w1 = random_var({5, 3}, rng);
    auto f1 = [&] { return project(conv2d(x, w1, Var<double>{}, 1, 1, 0), 6); };
    expect_grad_ok(f1, x, "pointwise x");
    expect_grad_ok(f1, w1, "pointwise w");
}

TEST(NnOps, ConvMatchesDirectSum) {
    Rng rng(2);
    struct Case {
        int h, w, k, stride, pad;
    };
    for (const Case cs : {Case{5, 5, 3, 2, 1}, Case{7, 6, 3, 1, 1}, Case{6, 7, 3, 2, 1}, Case{5, 4, 3, 3, 2},
                          Case{4, 4, 1, 2, 0}, Case{6, 5, 5, 1, 2}, Case{3, 8, 3, 1, 0}, Case{2, 2, 3, 1, 1}}) {
        const int C = 2, O = 3, k = cs.k;
        auto x = random_var({2, C, cs.h, cs.w}, rng, false);
        auto w = random_var({O, C * k * k}, rng, false);
        auto y = conv2d(x, w, Var<double>{}, k, cs.stride, cs.pad);
        const int oh = (cs.h + 2 * cs.pad - k) / cs.stride + 1, ow = (cs.w + 2 * cs.pad - k) / cs.stride + 1;
        ASSERT_EQ(y.shape(), (Shape{2, O, oh, ow}));
        for (int n = 0; n < 2; ++n)
            for (int o = 0; o < O; ++o)
                for (int i = 0; i < oh; ++i)
                    for (int j = 0; j < ow; ++j) {
                        double s = 0;
                        for (int c = 0; c < C; ++c)
                            for (int ki = 0; ki < k; ++ki)
                                for (int kj = 0; kj < k; ++kj) {
                                    const int yy = cs.stride * i - cs.pad + ki, xx = cs.stride * j - cs.pad + kj;
                                    if (yy < 0 || yy >= cs.h || xx < 0 || xx >= cs.w) continue;
                                    s += w.values()[(o * C + c) * k * k + ki * k + kj] *
                                         x.values()[((n * C + c) * cs.h + yy) * cs.w + xx];
                                }
                        EXPECT_NEAR(y.values()[((n * O + o) * oh + i) * ow + j], s, 1e-12);
                    }
        // col2im must scatter back through the same clipped borders
        auto xg = random_var({1, C, cs.h, cs.w}, rng, true);
        auto f = [&] { return project(conv2d(xg, w, Var<double>{}, k, cs.stride, cs.pad), 9); };
        expect_grad_ok(f, xg, "conv adjoint");
    }
}

TEST(NnOps, NormGradients) {
    Rng rng(3);
    auto x = random_var({2, 4, 3, 3}, rng);
    auto g = random_var({4}, rng);
    auto b = random_var({4}, rng);
    auto f = [&] { return project(group_norm(x, 2, g, b), 7); };
    expect_grad_ok(f, x, "gn x");
    expect_grad_ok(f, g, "gn gamma");
    expect_grad_ok(f, b, "gn beta");

    auto t = random_var({2, 5, 6}, rng);
    auto lg = random_var({6}, rng);
    auto lb = random_var({6}, rng);
    auto fl = [&] { return project(layer_norm(t, lg, lb), 8); };
    expect_grad_ok(fl, t, "ln x");
    expect_grad_ok(fl, lg, "ln gamma");
    expect_grad_ok(fl, lb, "ln beta");
}

TEST(NnOps, AttentionGradients) {
    Rng rng(4);
    auto q = random_var({2, 5, 4}, rng);
    auto k = random_var({2, 3, 4}, rng);
    auto v = random_var({2, 3, 6}, rng);
    auto f = [&] { return project(attention(q, k, v), 9); };
    expect_grad_ok(f, q, "attn q");
    expect_grad_ok(f, k, "attn k");
    expect_grad_ok(f, v, "attn v");
}

TEST(NnOps, LayoutAndElementwiseGradients) {
    Rng rng(5);
    auto x = random_var({2, 3, 4, 4}, rng);
    auto y = random_var({2, 2, 4, 4}, rng);
    auto c = random_var({2, 3}, rng);
    auto f = [&] {
        auto t = to_tokens(silu(x));
        auto back = from_tokens(t, 4, 4);
        auto cat = concat_channels(add_channel(back, c), y);
        auto up = upsample_nearest2x(slice_channels(cat, 1, 4));
        return project(avg_pool(up, 2), 11);
    };
    expect_grad_ok(f, x, "layout x");
    expect_grad_ok(f, y, "layout y");
    expect_grad_ok(f, c, "layout c");
}

TEST(NnOps, LinearMatmulLossGradients) {
    Rng rng(6);
    auto x = random_var({3, 4, 5}, rng);
    auto w = random_var({2, 5}, rng);
    auto b = random_var({2}, rng);
    auto a = random_var({2, 3}, rng);
    auto m = random_var({3, 5}, rng);
    auto tgt = random_var({3, 2}, rng, false);
    auto f = [&] {
        auto h = mean_tokens(linear(x, add(w, matmul(a, m)), b));  // [3, 2]
        auto probs = sigmoid(tgt);
        return add(mse_loss(h, tgt), add(bce_with_logits(h, probs), gaussian_kl(h, scale(h, 0.3))));
    };
    expect_grad_ok(f, x, "linear x");
    expect_grad_ok(f, w, "linear w");
    expect_grad_ok(f, b, "linear b");
    expect_grad_ok(f, a, "matmul a");
    expect_grad_ok(f, m, "matmul b");
}

TEST(NnOps, NoGradSkipsGraph) {
    Rng rng(7);
    auto x = random_var({2, 3}, rng);
    NoGradGuard ng;
    auto y = silu(x);
    EXPECT_FALSE(y.requires_grad());
}

TEST(NnOps, BceMatchesClosedForm) {
    // target sigma(4), logit 0 -> ln 2 regardless of target
    auto z = Var<double>::from({1}, {0.0}, true);
    auto t = Var<double>::from({1}, {1.0 / (1.0 + std::exp(-4.0))});
    EXPECT_NEAR(bce_with_logits(z, t).item(), std::log(2.0), 1e-12);
}

TEST(NnOps, AdamReducesQuadratic) {
    Rng rng(8);
    auto w = random_var({10}, rng);
    auto target = Var<double>::zeros({10});
    Adam<double> opt({{"w", w}}, AdamOptions{.lr = 0.05});
    const double start = mse_loss(w, target).item();
    for (int i = 0; i < 200; ++i) {
        opt.zero_grad();
        auto l = mse_loss(w, target);
        backward(l);
        opt.step();
    }
    EXPECT_LT(mse_loss(w, target).item(), start * 1e-2);
}

TEST(NnOps, LoraStartsAsIdentityUpdate) {
    Rng rng(9);
    Linear<double> lin(6, 4, rng);
    auto x = random_var({3, 6}, rng, false);
    auto before = lin(x).values();
    lin.add_lora(2, 2.0, rng);
    EXPECT_EQ(lin(x).values(), before);
}
