#include <gtest/gtest.h>

#include <filesystem>

#include "semsr/tagging/dape.hpp"
#include "semsr/toy_scenes.hpp"
#include "support/gradcheck.hpp"

using namespace semsr;
using namespace semsr::tagging;
using semsr::testing::gradcheck;

namespace {

TaggerConfig small_config() {
    TaggerConfig c;
    c.input_size = 16;
    c.tokens_side = 4;
    c.widths = {8, 16, 16};
    c.mlp_hidden = 32;
    return c;
}

// Solid disc of one color on a gray background.
ImageTensor disc(const std::array<float, 3>& rgb, Rng& rng, int size = 16) {
    ImageTensor im(size, size, 3);
    const double cx = rng.uniform(5, size - 5), cy = rng.uniform(5, size - 5), r = rng.uniform(3, 5);
    const float bg = static_cast<float>(rng.uniform(0.3, 0.7));
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const bool in = (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r;
            for (int c = 0; c < 3; ++c) im.at(y, x, c) = in ? rgb[c] : bg;
        }
    return im;
}

std::vector<LabeledImage> red_blue_set(int n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<LabeledImage> out;
    for (int i = 0; i < n; ++i) {
        const bool red = rng.bernoulli(0.5);
        out.push_back({disc(red ? std::array<float, 3>{0.9f, 0.1f, 0.1f} : std::array<float, 3>{0.1f, 0.2f, 0.9f}, rng),
                       {red ? "red" : "blue"}});
    }
    return out;
}

double cosine(std::span<const float> a, std::span<const float> b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    return ab / std::sqrt(aa * bb);
}

}  // namespace

TEST(Teacher, DeterministicAndBatchConsistent) {
    TagModel<float> m(small_config(), 8, 3);
    toy::SceneConfig sc;
    sc.size = 16;
    auto scenes = toy::generate_scenes(sc, 3, 9);
    std::vector<const ImageTensor*> ims{&scenes[0].image, &scenes[1].image, &scenes[2].image};
    auto a = encode_images(m, ims), b = encode_images(m, ims);
    EXPECT_EQ(a.rep.values(), b.rep.values());
    EXPECT_EQ(a.logits.values(), b.logits.values());
    EXPECT_EQ(a.rep.shape(), (nn::Shape{3, 16, 16}));
    for (int n = 0; n < 3; ++n) {
        auto single = encode_images(m, {ims[n]});
        for (std::size_t i = 0; i < single.rep.size(); ++i)
            EXPECT_EQ(single.rep.values()[i], a.rep.values()[n * single.rep.size() + i]);
        for (int c = 0; c < 8; ++c) EXPECT_EQ(single.logits.values()[c], a.logits.values()[n * 8 + c]);
    }
}

TEST(Teacher, DegradationChangesEmbedding) {
    TagModel<float> m(small_config(), 8, 3);
    toy::SceneConfig sc;
    sc.size = 16;
    auto scene = toy::generate_scenes(sc, 1, 4)[0];
    degradation::DegradationConfig deg;
    deg.final_scale = 2;
    deg.kernel_sizes = {5};
    deg.resize1 = {0.8, 1.0};
    deg.resize2 = {0.8, 1.0};
    auto lr = degradation::synthesize_pair(scene.image, deg, 3).lr;
    auto a = encode_images(m, {&scene.image}), b = encode_images(m, {&lr});
    EXPECT_LT(cosine(a.rep.data(), b.rep.data()), 1.0 - 1e-6);
}

TEST(Teacher, UninitializedModelRejected) {
    TagModel<float> m;
    ImageTensor im(16, 16, 3);
    EXPECT_THROW(encode_images(m, {&im}), StateError);
}

TEST(Teacher, LearnsSeparableColors) {
    TagVocabulary vocab({"red", "blue"});
    auto data = red_blue_set(240, 1);
    TeacherTrainOptions opt;
    opt.steps = 150;
    opt.batch = 16;
    opt.seed = 2;
    auto r = train_teacher(data, vocab, small_config(), opt);
    EXPECT_LT(r.heldout_bce_final, r.heldout_bce_initial);
    EXPECT_GE(r.heldout_exact_match, 0.95);
}

TEST(Teacher, ShuffledLabelsStayNearChance) {
    TagVocabulary vocab({"red", "blue"});
    auto data = red_blue_set(400, 3);
    Rng rng(4);
    for (auto& d : data) d.tags = {rng.bernoulli(0.5) ? "red" : "blue"};
    TeacherTrainOptions opt;
    opt.steps = 150;
    opt.seed = 5;
    opt.holdout_fraction = 0.5;
    auto r = train_teacher(data, vocab, small_config(), opt);
    // chance exact-match for one-of-two labels is 0.5
    EXPECT_LT(r.heldout_exact_match, 0.65);
}

TEST(Teacher, ZeroStepsKeepsInitialMetrics) {
    TagVocabulary vocab({"red", "blue"});
    auto data = red_blue_set(40, 6);
    TeacherTrainOptions opt;
    opt.steps = 0;
    auto r = train_teacher(data, vocab, small_config(), opt);
    EXPECT_EQ(r.heldout_bce_initial, r.heldout_bce_final);
    EXPECT_THROW(train_teacher({}, vocab, small_config(), opt), ArgumentError);
}

TEST(Teacher, CheckpointRoundTrip) {
    TagVocabulary vocab(toy::default_vocabulary());
    TagModel<float> m(small_config(), vocab.size(), 8);
    const auto path = (std::filesystem::temp_directory_path() / "semsr_teacher.ckpt").string();
    save_checkpoint(path, tagger_checkpoint(m, vocab, "tag_teacher"));
    auto back = load_tagger(load_checkpoint(path, "tag_teacher"));
    EXPECT_EQ(nn::checksum(back.model.all_params()), nn::checksum(m.all_params()));
    EXPECT_EQ(back.vocab, vocab);
    EXPECT_THROW(load_checkpoint(path, "dape"), StateError);
    std::filesystem::remove(path);
}

TEST(DapeLoss, ClosedFormCases) {
    Rng rng(1);
    auto rep = semsr::testing::random_var({2, 4, 3}, rng, false);
    auto lg = semsr::testing::random_var({2, 5}, rng, false);
    auto same = dape_loss(rep, lg, rep, lg, 0.0);
    EXPECT_EQ(same.total.item(), 0.0);

    auto shifted = rep.to_vector();
    for (auto& v : shifted) v += 1.0;
    auto off = dape_loss(nn::Var<double>::from(rep.shape(), shifted), lg, rep, lg, 0.0);
    EXPECT_NEAR(off.total.item(), 1.0, 1e-12);

    auto r1 = nn::Var<double>::zeros({1, 1, 1});
    auto ln2 = dape_loss(r1, nn::Var<double>::from({1, 1}, {0.0}), r1, nn::Var<double>::from({1, 1}, {4.0}), 1.0);
    EXPECT_NEAR(ln2.logits_term, std::log(2.0), 1e-12);
    EXPECT_NEAR(ln2.total.item(), std::log(2.0), 1e-12);
}

TEST(DapeLoss, DecompositionAndErrors) {
    Rng rng(2);
    for (double lambda : {0.0, 0.3, 1.0, 2.5}) {
        auto sr = semsr::testing::random_var({2, 4, 3}, rng, false), tr = semsr::testing::random_var({2, 4, 3}, rng, false);
        auto sl = semsr::testing::random_var({2, 5}, rng, false), tl = semsr::testing::random_var({2, 5}, rng, false);
        auto t = dape_loss(sr, sl, tr, tl, lambda);
        EXPECT_EQ(t.total.item(), t.rep_term + lambda * t.logits_term);
    }
    auto a = nn::Var<double>::zeros({1, 2, 2});
    auto l = nn::Var<double>::zeros({1, 3});
    EXPECT_THROW(dape_loss(a, l, nn::Var<double>::zeros({1, 2, 3}), l, 1.0), ArgumentError);
    EXPECT_THROW(dape_loss(a, l, a, nn::Var<double>::zeros({1, 4}), 1.0), ArgumentError);
    auto bad = nn::Var<double>::from({1, 3}, {0.0, std::nan(""), 0.0});
    EXPECT_THROW(dape_loss(a, bad, a, l, 1.0), NumericError);
    EXPECT_THROW(dape_loss(a, l, a, l, -1.0), ArgumentError);
}

TEST(DapeLoss, GradientMatchesFiniteDifferencesOnAdapters) {
    TaggerConfig tiny;
    tiny.input_size = 8;
    tiny.tokens_side = 2;
    tiny.widths = {4, 6, 8};
    tiny.mlp_hidden = 8;
    TagModel<float> teacher(tiny, 3, 1);
    auto student = make_student<double>(teacher, 2, 2.0, 3);
    ASSERT_LE(nn::count_params(student.all_params()), 10000u);
    // give the zero-initialized up-projections non-zero values
    Rng rng(4);
    for (auto& p : student.lora_params())
        for (auto& v : p.var.values()) v += 0.1 * rng.normal();
    TagModel<double> teacher_d(tiny, 3, 0);
    nn::copy_params(teacher.base_params(), teacher_d.base_params());

    auto x_lr = semsr::testing::random_var({2, 3, 8, 8}, rng, false, 0.5);
    auto x_hr = semsr::testing::random_var({2, 3, 8, 8}, rng, false, 0.5);
    TagOutput<double> t;
    {
        nn::NoGradGuard ng;
        t = teacher_d.forward(x_hr);
    }
    auto loss = [&] {
        auto s = student.forward(x_lr);
        return dape_loss(s.rep, s.logits, t.rep, t.logits, 1.0).total;
    };
    for (auto& p : student.lora_params()) {
        auto r = gradcheck(loss, p.var, 10, 7);
        EXPECT_LT(r.max_rel_error, 1e-3) << p.name;
    }
    for (auto& p : student.head_params()) {
        auto r = gradcheck(loss, p.var, 10, 8);
        EXPECT_LT(r.max_rel_error, 1e-3) << p.name;
    }
}

TEST(Dape, UntrainedStudentMatchesTeacher) {
    TagVocabulary vocab(toy::default_vocabulary());
    TagModel<float> teacher(small_config(), vocab.size(), 5);
    auto student = make_student<float>(teacher, 8, 8.0, 6);
    toy::SceneConfig sc;
    sc.size = 16;
    auto scenes = toy::generate_scenes(sc, 4, 10);
    std::vector<const ImageTensor*> ims;
    for (auto& s : scenes) ims.push_back(&s.image);
    auto a = encode_images(teacher, ims), b = encode_images(student, ims);
    EXPECT_EQ(a.rep.values(), b.rep.values());
    EXPECT_EQ(a.logits.values(), b.logits.values());

    auto from_teacher = extract_prompts(teacher, vocab, ims, 0.5);
    auto from_student = extract_prompts(student, vocab, ims, 0.5);
    const auto rows = logits_rows(a.logits);
    for (std::size_t n = 0; n < ims.size(); ++n) {
        EXPECT_EQ(from_student[n].hard, from_teacher[n].hard);
        EXPECT_EQ(from_student[n].hard, decode_tags(rows[n], vocab, 0.5));
        EXPECT_EQ(from_student[n].soft.values(), from_teacher[n].soft.values());
    }

    auto strict = extract_prompts(student, vocab, ims, 1.0 - 1e-12);
    for (std::size_t n = 0; n < ims.size(); ++n) {
        EXPECT_TRUE(strict[n].hard.empty());
        EXPECT_EQ(strict[n].soft.values(), from_student[n].soft.values());
    }
}

TEST(Dape, TrainingOnlyMovesAdaptersAndHead) {
    TagVocabulary vocab(toy::default_vocabulary());
    toy::SceneConfig sc;
    sc.size = 16;
    auto scenes = toy::generate_scenes(sc, 64, 11);
    std::vector<LabeledImage> data;
    for (auto& s : scenes) data.push_back({s.image, s.tags});
    TeacherTrainOptions topt;
    topt.steps = 300;
    auto teacher = train_teacher(data, vocab, small_config(), topt).model;

    degradation::DegradationConfig deg;
    deg.final_scale = 2;
    deg.kernel_sizes = {3, 5};
    deg.blur_sigma1 = {1.0, 2.0};
    deg.blur_sigma2 = {0.2, 0.8};
    deg.resize1 = {0.8, 1.2};
    deg.resize2 = {0.8, 1.2};
    std::vector<ImageTensor> hr;
    for (auto& s : scenes) hr.push_back(s.image);
    std::vector<HeldoutPair> held;
    for (int i = 0; i < 8; ++i) held.push_back({hr[i], degradation::synthesize_pair(hr[i], deg, 100 + i).lr, scenes[i].tags});

    DapeTrainConfig cfg;
    cfg.iterations = 100;
    cfg.batch_size = 8;
    cfg.learning_rate = 3e-3;
    const auto base_before = nn::checksum(teacher.encoder_params());
    auto r = train_dape(teacher, hr, held, deg, cfg, 12);
    EXPECT_EQ(r.teacher_checksum_before, r.teacher_checksum_after);
    EXPECT_EQ(r.base_checksum_student, r.base_checksum_teacher);
    EXPECT_EQ(r.base_checksum_teacher, base_before);
    EXPECT_NE(nn::checksum(r.student.lora_params()), nn::checksum(make_student<float>(teacher, 8, 8.0, 0).lora_params()));
    EXPECT_LT(r.final_.total, r.initial.total);
    EXPECT_LT(r.final_.rep_term, 0.75 * r.initial.rep_term);

    TagModel<float> plain(small_config(), vocab.size(), 0);
    Rng lora_rng(0);
    plain.add_lora(2, 2.0, lora_rng);
    EXPECT_THROW(train_dape(plain, hr, held, deg, cfg, 1), StateError);
}
