#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "semsr/diffusion/sampler.hpp"
#include "semsr/toy_scenes.hpp"
#include "support/gradcheck.hpp"

using namespace semsr;
using namespace semsr::diffusion;
using semsr::testing::gradcheck;
using semsr::testing::random_var;

namespace {

UNetConfig tiny_unet() {
    UNetConfig c;
    c.widths = {4, 6};
    c.latent_channels = 2;
    c.time_dim = 4;
    c.text_dim = 4;
    c.soft_dim = 4;
    c.groups = 2;
    return c;
}

ControlConfig tiny_control() {
    ControlConfig c;
    c.lr_encoder_widths = {4};
    c.downscale = 2;
    return c;
}

UNetConfig small_unet() {
    UNetConfig c;
    c.widths = {16, 32};
    c.latent_channels = 4;
    c.time_dim = 32;
    c.text_dim = 8;
    c.soft_dim = 12;
    c.groups = 4;
    return c;
}

ControlConfig small_control() {
    ControlConfig c;
    c.lr_encoder_widths = {8, 16, 16};
    c.downscale = 4;
    return c;
}

// Fills every zero-initialized tensor with random values so that all
// gradient paths are exercised.
template <typename T>
void randomize(const nn::ParamList<T>& params, std::uint64_t seed, double scale = 0.3) {
    Rng rng(seed);
    for (const auto& p : params) {
        auto v = p.var;
        for (auto& x : v.values()) x = static_cast<T>(x + rng.normal() * scale);
    }
}

template <typename T>
nn::Var<T> randn(nn::Shape shape, Rng& rng) {
    std::vector<T> v(nn::numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.normal());
    return nn::Var<T>::from(std::move(shape), std::move(v));
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("semsr_" + name)).string();
}

}  // namespace

TEST(UNet, OutputShapeAndInputChecks) {
    UNet<float> u(small_unet(), 1);
    Rng rng(2);
    auto z = randn<float>({3, 4, 8, 8}, rng);
    auto text = randn<float>({3, 5, 8}, rng);
    auto y = u.forward(z, {1, 500, 1000}, text);
    EXPECT_EQ(y.shape(), z.shape());
    for (float v : y.values()) EXPECT_TRUE(std::isfinite(v));
    EXPECT_THROW(u.forward(z, {1, 2}, text), ArgumentError);
    EXPECT_THROW(u.forward(randn<float>({3, 3, 8, 8}, rng), {1, 2, 3}, text), ArgumentError);
    EXPECT_THROW(u.forward(randn<float>({3, 4, 7, 8}, rng), {1, 2, 3}, text), ArgumentError);
    EXPECT_THROW(u.forward(z, {1, 2, 3}, randn<float>({3, 5, 7}, rng)), ArgumentError);
    EXPECT_THROW(UNet<float>().forward(z, {1, 2, 3}, text), StateError);
}

TEST(ControlledUNet, ZeroInitMatchesBaseExactly) {
    UNet<float> base(small_unet(), 3);
    randomize(base.params(), 4, 0.05);  // a base that is not at its own init
    ControlledUNet<float> m(base, small_control(), 5);
    Rng rng(6);
    for (int probe = 0; probe < 20; ++probe) {
        const int N = 1 + probe % 3;
        auto z = randn<float>({N, 4, 8, 8}, rng);
        std::vector<int> steps;
        for (int n = 0; n < N; ++n) steps.push_back(static_cast<int>(rng.uniform_int(1, 1000)));
        auto text = randn<float>({N, 5, 8}, rng);
        auto lr = randn<float>({N, 3, 32, 32}, rng);
        auto soft = randn<float>({N, 6, 12}, rng);
        const auto expected = base.forward(z, steps, text);
        EXPECT_EQ(m.predict_noise(z, steps, lr, text, soft).values(), expected.values()) << "probe " << probe;
        // any LR image and any soft prompt give the same output at init
        auto lr2 = randn<float>({N, 3, 32, 32}, rng);
        EXPECT_EQ(m.predict_noise(z, steps, lr2, text, nn::scale(soft, 3.0f)).values(), expected.values());
    }
}

TEST(ControlledUNet, BatchMatchesSingleExactly) {
    UNet<float> base(small_unet(), 7);
    ControlledUNet<float> m(base, small_control(), 8);
    randomize(m.trainable_params(), 9, 0.1);
    Rng rng(10);
    auto z = randn<float>({3, 4, 8, 8}, rng);
    auto text = randn<float>({3, 5, 8}, rng);
    auto lr = randn<float>({3, 3, 32, 32}, rng);
    auto soft = randn<float>({3, 6, 12}, rng);
    const std::vector<int> steps{10, 400, 999};
    const auto all = m.predict_noise(z, steps, lr, text, soft);
    const std::size_t per = all.size() / 3;
    for (int n = 0; n < 3; ++n) {
        const auto one = m.predict_noise(gather_rows<float>(z, {n}), {steps[n]}, gather_rows<float>(lr, {n}),
                                         gather_rows<float>(text, {n}), gather_rows<float>(soft, {n}));
        EXPECT_TRUE(std::equal(one.values().begin(), one.values().end(), all.values().begin() + n * per)) << n;
    }
}

TEST(ControlledUNet, TrainedSoftPromptChangesOutput) {
    UNet<float> base(small_unet(), 11);
    ControlledUNet<float> m(base, small_control(), 12);
    randomize(m.base.rca_params(), 13, 0.2);
    Rng rng(14);
    auto z = randn<float>({1, 4, 8, 8}, rng);
    auto text = randn<float>({1, 5, 8}, rng);
    auto lr = randn<float>({1, 3, 32, 32}, rng);
    auto soft = randn<float>({1, 6, 12}, rng);
    EXPECT_NE(m.predict_noise(z, {300}, lr, text, soft).values(),
              m.predict_noise(z, {300}, lr, text, nn::scale(soft, -1.0f)).values());
    EXPECT_THROW(m.predict_noise(z, {300}, randn<float>({1, 3, 16, 16}, rng), text, soft), ArgumentError);
}

namespace {

// Predicts the true noise plus a constant c; the noise is recovered from z_t
// and the known z0.
struct StubModel {
    const NoiseSchedule* s;
    const nn::Var<double>* z0;
    double offset;
    nn::Var<double> predict_noise(const nn::Var<double>& zt, const std::vector<int>& steps, const nn::Var<double>&,
                                  const nn::Var<double>&, const nn::Var<double>&) const {
        const std::size_t per = zt.size() / zt.dim(0);
        std::vector<double> out(zt.size());
        for (int n = 0; n < zt.dim(0); ++n) {
            const double ab = s->alpha_bar(steps[n]);
            for (std::size_t k = n * per; k < (n + 1) * per; ++k)
                out[k] = (zt.values()[k] - std::sqrt(ab) * z0->values()[k]) / std::sqrt(1 - ab) + offset;
        }
        return nn::Var<double>::from(zt.shape(), std::move(out));
    }
};

}  // namespace

TEST(SrTrainingLoss, PerfectAndOffsetStubs) {
    auto s = make_schedule(1000, 1e-4, 0.02, 50);
    Rng data(15);
    auto z0 = random_var({4, 2, 4, 4}, data, false);
    nn::Var<double> none;
    for (double c : {0.0, 0.5, -1.25}) {
        StubModel stub{&s, &z0, c};
        Rng rng(16);
        const double loss = sr_training_loss<double>(stub, z0, none, none, none, s, rng).item();
        EXPECT_NEAR(loss, c * c, 1e-9) << c;
    }
}

TEST(SrTrainingLoss, SamplesTimestepsOverFullRange) {
    auto s = make_schedule(1000, 1e-4, 0.02, 50);
    Rng rng(17);
    int lo = 1000, hi = 0;
    for (int i = 0; i < 200; ++i) {
        const auto d = draw_noise({64, 1}, s, rng);
        for (int t : d.steps) {
            lo = std::min(lo, t);
            hi = std::max(hi, t);
        }
    }
    EXPECT_EQ(lo, 1);
    EXPECT_EQ(hi, 1000);
}

TEST(SrTrainingLoss, GradientsMatchFiniteDifferences) {
    UNet<double> base(tiny_unet(), 18);
    ControlledUNet<double> m(base, tiny_control(), 19);
    randomize(m.trainable_params(), 20, 0.3);
    const auto total = nn::count_params(m.trainable_params()) + nn::count_params(m.base_params());
    ASSERT_LE(total, 10000u);
    auto s = make_schedule(1000, 1e-4, 0.02, 50);
    Rng data(21);
    auto z0 = random_var({2, 2, 4, 4}, data, false);
    auto lr = random_var({2, 3, 8, 8}, data, false);
    auto text = random_var({2, 3, 4}, data, false);
    auto soft = random_var({2, 5, 4}, data, false);
    nn::set_trainable(m.base_params(), false);
    auto loss = [&] {
        Rng rng(22);
        return sr_training_loss<double>(m, z0, lr, text, soft, s, rng);
    };
    for (const auto& p : m.trainable_params()) {
        auto r = gradcheck(loss, p.var, 10, 23);
        EXPECT_LT(r.max_rel_error, 1e-3) << p.name;
    }
}

TEST(SrTraining, FreezeContractAndLossDrop) {
    toy::SceneConfig sc;
    sc.size = 16;
    auto scenes = toy::generate_scenes(sc, 40, 24);
    VaeConfig vc;
    vc.widths = {8, 8, 8};
    const auto vae = train_vae({scenes[0].image}, {}, vc, {.steps = 0}).vae;
    TagVocabulary vocab(toy::default_vocabulary());
    TextEncoder text(vocab, 8, 25);
    tagging::TaggerConfig tc;
    tc.input_size = 16;
    tc.tokens_side = 4;
    tc.widths = {8, 16, 12};
    tc.mlp_hidden = 16;
    tagging::TagModel<float> dape(tc, vocab.size(), 26);
    std::vector<const ImageTensor*> hr;
    std::vector<ImageTensor> lr_store;
    for (const auto& sc2 : scenes) {
        hr.push_back(&sc2.image);
        lr_store.push_back(bicubic_downsample(sc2.image, 4));
    }
    std::vector<const ImageTensor*> lr;
    for (const auto& l : lr_store) lr.push_back(&l);
    const std::vector<const ImageTensor*> hr_tr(hr.begin(), hr.begin() + 32), hr_ho(hr.begin() + 32, hr.end());
    const std::vector<const ImageTensor*> lr_tr(lr.begin(), lr.begin() + 32), lr_ho(lr.begin() + 32, lr.end());
    const auto train = encode_sr_set(vae, text, dape, hr_tr, lr_tr, 0.5);
    const auto heldout = encode_sr_set(vae, text, dape, hr_ho, lr_ho, 0.5);

    auto ucfg = small_unet();
    ucfg.soft_dim = tc.dim();
    UNet<float> base(ucfg, 27);
    auto s = make_schedule(1000, 1e-4, 0.02, 50);
    DiffusionTrainOptions opt;
    opt.steps = 0;
    opt.batch = 8;
    opt.heldout_batches = 1;
    auto zero = train_sr(base, vae, text, dape, train, heldout, small_control(), s, opt);
    // no training: still exactly the base model
    Rng rng(28);
    auto z = randn<float>({2, 4, 4, 4}, rng);
    auto txt = randn<float>({2, text.context_length(), 8}, rng);
    auto lrc = randn<float>({2, 3, 16, 16}, rng);
    auto soft = randn<float>({2, tc.tokens(), tc.dim()}, rng);
    EXPECT_EQ(zero.model.predict_noise(z, {5, 900}, lrc, txt, soft).values(), base.forward(z, {5, 900}, txt).values());

    opt.steps = 60;
    opt.lr = 2e-3;
    auto r = train_sr(base, vae, text, dape, train, heldout, small_control(), s, opt);
    EXPECT_EQ(r.before, r.after);
    EXPECT_EQ(r.base_in_model_before, r.base_in_model_after);
    EXPECT_EQ(nn::checksum(r.model.base_params()), nn::checksum(base.params()));
    EXPECT_NE(nn::checksum(r.model.control_params()), nn::checksum(zero.model.control_params()));
    EXPECT_NE(nn::checksum(r.model.base.rca_params()), nn::checksum(zero.model.base.rca_params()));
    EXPECT_LT(r.heldout_final, r.heldout_initial);

    EXPECT_THROW(train_sr(UNet<float>(), vae, text, dape, train, heldout, small_control(), s, opt), StateError);
}

TEST(Checkpoints, UNetAndSrRoundTrip) {
    UNet<float> base(small_unet(), 29);
    ControlledUNet<float> m(base, small_control(), 30);
    randomize(m.trainable_params(), 31, 0.1);
    const auto pb = temp_path("base.ckpt"), ps = temp_path("sr.ckpt");
    save_checkpoint(pb, unet_checkpoint(base));
    save_checkpoint(ps, sr_checkpoint(m));
    const auto base2 = load_unet(load_checkpoint(pb, "base_unet"));
    const auto m2 = load_sr(load_checkpoint(ps, "sr_control"), base2);
    EXPECT_EQ(nn::checksum(base2.params()), nn::checksum(base.params()));
    EXPECT_EQ(nn::checksum(m2.trainable_params()), nn::checksum(m.trainable_params()));
    Rng rng(32);
    auto z = randn<float>({1, 4, 8, 8}, rng);
    auto text = randn<float>({1, 5, 8}, rng);
    auto lr = randn<float>({1, 3, 32, 32}, rng);
    auto soft = randn<float>({1, 6, 12}, rng);
    EXPECT_EQ(m2.predict_noise(z, {77}, lr, text, soft).values(), m.predict_noise(z, {77}, lr, text, soft).values());
    // a different base is rejected
    UNet<float> other(small_unet(), 33);
    EXPECT_THROW(load_sr(load_checkpoint(ps), other), StateError);
    EXPECT_THROW(load_unet(load_checkpoint(ps)), StateError);
    std::remove(pb.c_str());
    std::remove(ps.c_str());
}

TEST(InitialLatent, NoLreIsStandardNormal) {
    auto s = make_schedule(1000, 1e-4, 0.02, 50);
    SamplerConfig cfg;
    cfg.use_lre = false;
    cfg.seed = 34;
    nn::Var<float> zlr = nn::Var<float>::full({25, 4, 32, 32}, 3.0f);  // 102400 entries, ignored
    const auto z = initial_latent(zlr, s, cfg);
    double m = 0, v = 0;
    for (float x : z.values()) m += x;
    m /= z.size();
    for (float x : z.values()) v += (x - m) * (x - m);
    v /= z.size() - 1;
    EXPECT_LT(std::abs(m), 0.01);
    EXPECT_NEAR(v, 1.0, 0.02);
}

TEST(InitialLatent, LreBoundAndDeterminism) {
    auto s = make_schedule(1000, 1e-4, 0.02, 50);
    Rng rng(35);
    auto zlr = randn<float>({2, 4, 8, 8}, rng);
    SamplerConfig with, without;
    with.seed = without.seed = 36;
    without.use_lre = false;
    const auto a = initial_latent(zlr, s, with);
    const auto b = initial_latent(zlr, s, with);
    EXPECT_EQ(a.values(), b.values());
    const auto eps = initial_latent(zlr, s, without);  // same stream, so the same eps
    double zmax = 0;
    for (float x : zlr.values()) zmax = std::max(zmax, static_cast<double>(std::abs(x)));
    // |sqrt(ab) z + (sqrt(1 - ab) - 1) eps| is bounded by sqrt(ab) max|z| plus the (tiny) eps shrink
    const double ab = s.alpha_bar(1000);
    double emax = 0;
    for (float x : eps.values()) emax = std::max(emax, static_cast<double>(std::abs(x)));
    for (std::size_t i = 0; i < a.size(); ++i)
        EXPECT_LE(std::abs(a.values()[i] - eps.values()[i]),
                  std::sqrt(ab) * zmax + (1 - std::sqrt(1 - ab)) * emax + 1e-6);
    EXPECT_NE(a.values(), eps.values());
}

TEST(InitialLatent, InterpolationEndpoints) {
    // a schedule whose LRE start has alpha_bar 1 (t = 0 is not reachable) is
    // emulated through mix_with_alpha, which initial_latent delegates to
    Rng rng(37);
    auto zlr = randn<float>({1, 2, 4, 4}, rng);
    auto eps = randn<float>({1, 2, 4, 4}, rng);
    EXPECT_EQ(mix_with_alpha(zlr, eps, 1.0).values(), zlr.values());
    EXPECT_EQ(mix_with_alpha(zlr, eps, 0.0).values(), eps.values());
    auto s = make_schedule(1000, 1e-4, 0.02, 50);
    SamplerConfig cfg;
    cfg.lre_timestep = 1;  // alternative start, nearly clean
    const auto z = initial_latent(zlr, s, cfg);
    for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(z.values()[i], zlr.values()[i], 0.05);
    EXPECT_EQ(lre_start(s, SamplerConfig{}), 1000);
}

TEST(Sampler, DeterministicFiniteAndBatchIndependent) {
    toy::SceneConfig sc;
    sc.size = 16;
    auto scenes = toy::generate_scenes(sc, 3, 38);
    VaeConfig vc;
    vc.widths = {8, 8, 8};
    const auto vae = train_vae({scenes[0].image}, {}, vc, {.steps = 0}).vae;
    TagVocabulary vocab(toy::default_vocabulary());
    TextEncoder text(vocab, 8, 39);
    UNet<float> base(small_unet(), 40);
    ControlledUNet<float> m(base, small_control(), 41);
    randomize(m.trainable_params(), 42, 0.1);
    auto s = make_schedule(1000, 1e-4, 0.02, 50);

    std::vector<ImageTensor> lr;
    for (const auto& x : scenes) lr.push_back(bicubic_downsample(x.image, 4));
    SampleRequest req;
    for (const auto& l : lr) req.lr.push_back(&l);
    req.hard = {make_tagset({"red", "circle"}, vocab), TagSet{}, make_tagset({"blue"}, vocab)};
    Rng rng(43);
    req.soft = {randn<float>({6, 12}, rng), nn::Var<float>{}, randn<float>({6, 12}, rng)};
    req.out_h = req.out_w = 16;
    SamplerConfig cfg;
    cfg.steps = 4;
    cfg.seed = 44;
    const auto a = sample(m, vae, text, req, 6, s, cfg);
    const auto b = sample(m, vae, text, req, 6, s, cfg);
    ASSERT_EQ(a.images.size(), 3u);
    for (int i = 0; i < 3; ++i) {
        EXPECT_EQ(a.images[i].data, b.images[i].data);
        for (float v : a.images[i].data) {
            EXPECT_GE(v, 0.0f);
            EXPECT_LE(v, 1.0f);
        }
    }
    // the middle image alone, keyed by its id, matches its batched result
    SampleRequest one;
    one.lr = {req.lr[1]};
    one.hard = {req.hard[1]};
    one.soft = {req.soft[1]};
    one.ids = {1};
    one.out_h = one.out_w = 16;
    EXPECT_EQ(sample(m, vae, text, one, 6, s, cfg).images[0].data, a.images[1].data);

    cfg.use_lre = false;
    const auto c = sample(m, vae, text, req, 6, s, cfg);
    EXPECT_NE(c.images[0].data, a.images[0].data);
    cfg.steps = 1;
    const auto d = sample(m, vae, text, req, 6, s, cfg);
    for (float v : d.images[0].data) EXPECT_TRUE(v >= 0.0f && v <= 1.0f);
    cfg.steps = 1001;
    EXPECT_THROW(sample(m, vae, text, req, 6, s, cfg), ArgumentError);
    cfg.steps = 4;
    cfg.guidance_scale = 2.0;
    EXPECT_NE(sample(m, vae, text, req, 6, s, cfg).images[0].data, a.images[0].data);
}
