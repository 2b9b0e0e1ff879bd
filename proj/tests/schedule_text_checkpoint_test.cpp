#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "semsr/checkpoint.hpp"
#include "semsr/diffusion/schedule.hpp"
#include "semsr/diffusion/text_encoder.hpp"
#include "semsr/toy_scenes.hpp"
#include "support/gradcheck.hpp"

using namespace semsr;
using namespace semsr::diffusion;
using semsr::testing::random_var;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("semsr_" + name)).string();
}

}  // namespace

TEST(Schedule, FiftySpacedStepsFromThousand) {
    auto s = make_schedule(1000, 1e-4, 0.02, 50);
    ASSERT_EQ(s.spaced_steps.size(), 50u);
    EXPECT_EQ(s.spaced_steps.front(), 1000);
    EXPECT_EQ(*std::max_element(s.spaced_steps.begin(), s.spaced_steps.end()), 1000);
    for (std::size_t i = 1; i < s.spaced_steps.size(); ++i) EXPECT_LT(s.spaced_steps[i], s.spaced_steps[i - 1]);
    EXPECT_GE(s.spaced_steps.back(), 1);
}

TEST(Schedule, FullSpacingIsEveryStep) {
    auto s = make_schedule(4, 1e-4, 0.02, 4);
    EXPECT_EQ(s.spaced_steps, (std::vector<int>{4, 3, 2, 1}));
}

TEST(Schedule, TerminalAlphaBarMatchesDirectProduct) {
    auto s = make_schedule(1000, 1e-4, 0.02, 50);
    // independent evaluation in log space
    double log_prod = 0;
    for (int t = 0; t < 1000; ++t) log_prod += std::log1p(-(1e-4 + (0.02 - 1e-4) * t / 999.0));
    EXPECT_NEAR(s.alpha_bar(1000), std::exp(log_prod), 1e-12);
    EXPECT_LT(s.alpha_bar(1000), 1e-4);
    EXPECT_EQ(s.alpha_bar(0), 1.0);
    for (int t = 0; t < 1000; ++t) EXPECT_LT(s.alpha_bar(t + 1), s.alpha_bar(t));
}

TEST(Schedule, InvalidBoundsRejected) {
    EXPECT_THROW(make_schedule(1000, 0.0, 0.02, 50), ArgumentError);
    EXPECT_THROW(make_schedule(1000, 0.03, 0.02, 50), ArgumentError);
    EXPECT_THROW(make_schedule(1000, 1e-4, 1.0, 50), ArgumentError);
    EXPECT_THROW(make_schedule(10, 1e-4, 0.02, 11), ArgumentError);
}

TEST(AddNoise, EndpointsAreExact) {
    Rng rng(1);
    auto z0 = random_var({2, 4, 8, 8}, rng, false);
    auto eps = random_var({2, 4, 8, 8}, rng, false);
    EXPECT_EQ(mix_with_alpha(z0, eps, 1.0).values(), z0.values());
    EXPECT_EQ(mix_with_alpha(z0, eps, 0.0).values(), eps.values());
    auto s = make_schedule(1000, 1e-4, 0.02, 50);
    EXPECT_EQ(add_noise(z0, eps, 0, s).values(), z0.values());
    EXPECT_THROW(add_noise(z0, eps, 1001, s), ArgumentError);
    EXPECT_THROW(add_noise(z0, eps, -1, s), ArgumentError);
}

TEST(AddNoise, PreservesUnitVariance) {
    Rng rng(2);
    auto s = make_schedule(1000, 1e-4, 0.02, 50);
    for (int t : {1, 250, 500, 1000}) {
        auto z0 = random_var({100000}, rng, false);
        auto eps = random_var({100000}, rng, false);
        auto x = add_noise(z0, eps, t, s);
        double m = 0, v = 0;
        for (double a : x.values()) m += a;
        m /= x.size();
        for (double a : x.values()) v += (a - m) * (a - m);
        v /= x.size() - 1;
        EXPECT_NEAR(v, 1.0, 0.05) << "t=" << t;
    }
}

TEST(AddNoise, LinearInScalar) {
    Rng rng(3);
    auto s = make_schedule(100, 1e-4, 0.02, 10);
    auto z0 = random_var({64}, rng, false);
    auto eps = random_var({64}, rng, false);
    const double a = 1.7;
    auto lhs = add_noise(nn::scale(z0, a), nn::scale(eps, a), 37, s);
    auto rhs = nn::scale(add_noise(z0, eps, 37, s), a);
    for (std::size_t i = 0; i < 64; ++i) EXPECT_NEAR(lhs.values()[i], rhs.values()[i], 1e-12);
}

TEST(AddNoise, BatchMatchesPerSample) {
    Rng rng(4);
    auto s = make_schedule(100, 1e-4, 0.02, 10);
    auto z0 = random_var({3, 5}, rng, false);
    auto eps = random_var({3, 5}, rng, false);
    auto b = add_noise_batch(z0, eps, {1, 50, 100}, s);
    const int ts[] = {1, 50, 100};
    for (int n = 0; n < 3; ++n)
        for (int i = 0; i < 5; ++i) {
            const double ab = s.alpha_bar(ts[n]);
            EXPECT_NEAR(b.values()[n * 5 + i],
                        std::sqrt(ab) * z0.values()[n * 5 + i] + std::sqrt(1 - ab) * eps.values()[n * 5 + i], 1e-14);
        }
}

TEST(Posterior, ConsecutiveStepsMatchDdpmClosedForm) {
    auto s = make_schedule(50, 1e-3, 0.05, 50);
    for (int t = 2; t <= 50; ++t) {
        const auto p = posterior_step(s, t, t - 1);
        const double b = s.beta(t), ab = s.alpha_bar(t), abp = s.alpha_bar(t - 1);
        EXPECT_NEAR(p.coef_x0, b * std::sqrt(abp) / (1 - ab), 1e-12);
        EXPECT_NEAR(p.coef_xt, (1 - abp) * std::sqrt(1 - b) / (1 - ab), 1e-12);
        EXPECT_NEAR(p.variance, (1 - abp) / (1 - ab) * b, 1e-12);
    }
    // final step to t = 0 is deterministic
    EXPECT_NEAR(posterior_step(s, 1, 0).variance, 0.0, 1e-15);
    EXPECT_NEAR(posterior_step(s, 1, 0).coef_x0, 1.0, 1e-12);
}

TEST(Posterior, SpacedStepRecoversCleanSignalInExpectation) {
    // With x0_hat = x0 exact and x_t = sqrt(ab_t) x0, the posterior mean of
    // a noiseless trajectory is sqrt(ab_prev) x0.
    auto s = make_schedule(1000, 1e-4, 0.02, 50);
    for (std::size_t i = 0; i + 1 < s.spaced_steps.size(); ++i) {
        const int t = s.spaced_steps[i], prev = s.spaced_steps[i + 1];
        const auto p = posterior_step(s, t, prev);
        EXPECT_NEAR(p.coef_x0 + p.coef_xt * std::sqrt(s.alpha_bar(t)), std::sqrt(s.alpha_bar(prev)), 1e-12);
    }
}

TEST(TextEncoder, NullPromptAndOrdering) {
    TagVocabulary v(toy::default_vocabulary());
    TextEncoder enc(v, 16, 7);
    EXPECT_EQ(enc.context_length(), 2 * v.size() - 1);
    auto null1 = enc.encode<double>({TagSet{}});
    auto null2 = enc.encode<double>({TagSet{}});
    EXPECT_EQ(null1.values(), null2.values());
    for (int tok : enc.tokenize(TagSet{})) EXPECT_EQ(tok, enc.pad());

    TagSet ab{{"red", "circle"}, {1.0, 1.0}};
    TagSet ba{{"circle", "red"}, {1.0, 1.0}};
    EXPECT_EQ(enc.encode<float>({ab}).values(), enc.encode<float>({ba}).values());
    EXPECT_EQ(enc.tokenize(ab), (std::vector<int>{0, enc.separator(), 3, enc.pad(), enc.pad(), enc.pad(), enc.pad(),
                                                   enc.pad(), enc.pad(), enc.pad(), enc.pad(), enc.pad(), enc.pad(),
                                                   enc.pad(), enc.pad()}));

    auto all = make_tagset(v.classes(), v);
    EXPECT_EQ(enc.encode<float>({all}).shape(), (nn::Shape{1, enc.context_length(), 16}));
    EXPECT_EQ(enc.encode<float>({TagSet{}, ab, all}).shape(), (nn::Shape{3, enc.context_length(), 16}));
    EXPECT_NE(enc.encode<float>({ab}).values(), enc.encode<float>({TagSet{}}).values());
    TagSet bad{{"zebra"}, {1.0}};
    EXPECT_THROW(enc.encode<float>({bad}), VocabularyError);
}

TEST(TextEncoder, CheckpointRoundTrip) {
    TagVocabulary v(toy::default_vocabulary());
    TextEncoder enc(v, 16, 7);
    const auto path = temp_path("text.ckpt");
    save_checkpoint(path, enc.to_checkpoint());
    auto back = TextEncoder::from_checkpoint(load_checkpoint(path, "text_encoder"));
    EXPECT_EQ(nn::checksum(back.params()), nn::checksum(enc.params()));
    EXPECT_EQ(back.vocab, v);
    std::remove(path.c_str());
}

TEST(Checkpoint, RoundTripKindAndVersion) {
    Rng rng(5);
    nn::ParamList<float> params{{"a", nn::randn_param<float>({3, 4}, rng, 1.0)},
                                {"b", nn::randn_param<float>({5}, rng, 1.0)}};
    Checkpoint ck;
    ck.kind = "toy";
    ck.hparams = {{"width", 4}};
    ck.step = 42;
    ck.config_hash = "abc";
    ck.put(params);
    const auto path = temp_path("rt.ckpt");
    save_checkpoint(path, ck);

    auto back = load_checkpoint(path, "toy");
    EXPECT_EQ(back.step, 42);
    EXPECT_EQ(back.hparams, ck.hparams);
    nn::ParamList<float> fresh{{"a", nn::Var<float>::zeros({3, 4})}, {"b", nn::Var<float>::zeros({5})}};
    back.get(fresh);
    EXPECT_EQ(nn::checksum(fresh), nn::checksum(params));

    EXPECT_THROW(load_checkpoint(path, "vae"), StateError);
    nn::ParamList<float> wrong{{"a", nn::Var<float>::zeros({4, 3})}};
    EXPECT_THROW(back.get(wrong), StateError);
    nn::ParamList<float> missing{{"c", nn::Var<float>::zeros({1})}};
    EXPECT_THROW(back.get(missing), StateError);

    // bump the version field past what this build understands
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(8);
        const std::uint32_t v = kCheckpointVersion + 1;
        f.write(reinterpret_cast<const char*>(&v), sizeof v);
    }
    EXPECT_THROW(load_checkpoint(path), IoError);
    std::remove(path.c_str());
    EXPECT_THROW(load_checkpoint(path), StateError);
}
