#include <gtest/gtest.h>

#include <cmath>

#include "semsr/core/rng.hpp"
#include "semsr/eval/report.hpp"

using namespace semsr;
using namespace semsr::eval;

namespace {

ImageTensor random_image(int h, int w, int c, Rng& rng, float lo = 0.0f, float hi = 1.0f) {
    ImageTensor img(h, w, c);
    for (auto& v : img.data) v = static_cast<float>(rng.uniform(lo, hi));
    return img;
}

TagVocabulary abc() { return TagVocabulary({"a", "b", "c"}); }

// Brute-force oracle over explicit image x class boolean matrices, built by
// string membership without the vocabulary index.
struct BruteForce {
    double np = 0, nt = 0, ng = 0;
};

BruteForce brute_force(const std::vector<TagSet>& pred, const std::vector<TagSet>& truth,
                       const std::vector<std::string>& classes) {
    std::vector<std::vector<bool>> P(pred.size(), std::vector<bool>(classes.size()));
    std::vector<std::vector<bool>> G(pred.size(), std::vector<bool>(classes.size()));
    for (std::size_t n = 0; n < pred.size(); ++n)
        for (std::size_t c = 0; c < classes.size(); ++c) {
            P[n][c] = pred[n].contains(classes[c]);
            G[n][c] = truth[n].contains(classes[c]);
        }
    BruteForce b;
    for (std::size_t n = 0; n < pred.size(); ++n)
        for (std::size_t c = 0; c < classes.size(); ++c) {
            b.np += P[n][c];
            b.ng += G[n][c];
            b.nt += P[n][c] && G[n][c];
        }
    return b;
}

TagSet random_tagset(const TagVocabulary& vocab, Rng& rng, double p) {
    std::vector<std::string> tags;
    for (const auto& c : vocab.classes())
        if (rng.bernoulli(p)) tags.push_back(c);
    return make_tagset(tags, vocab);
}

}  // namespace

TEST(Psnr, IdenticalImagesGiveCap) {
    Rng rng(1);
    auto a = random_image(16, 16, 3, rng);
    EXPECT_EQ(psnr(a, a, true), kPsnrCap);
    EXPECT_EQ(psnr(a, a, false), kPsnrCap);
}

TEST(Psnr, HalfOffsetClosedForm) {
    Rng rng(2);
    auto a = random_image(16, 16, 3, rng, 0.0f, 0.5f);
    auto b = a;
    for (auto& v : b.data) v += 0.5f;
    EXPECT_NEAR(psnr(a, b, false), 10 * std::log10(4.0), 1e-4);
    EXPECT_NEAR(psnr(a, b, true), 6.0206, 1e-4);
}

TEST(Psnr, SingleFlippedPixelClosedForm) {
    ImageTensor a(20, 25, 1, 0.25f);
    auto b = a;
    const double delta = 0.5;
    b.at(3, 7, 0) += static_cast<float>(delta);
    const double n = 20 * 25;
    EXPECT_NEAR(psnr(a, b, false), 10 * std::log10(n / (delta * delta)), 1e-9);
}

TEST(Psnr, SymmetricAndShapeChecked) {
    Rng rng(3);
    auto a = random_image(16, 16, 3, rng), b = random_image(16, 16, 3, rng);
    EXPECT_EQ(psnr(a, b, true), psnr(b, a, true));
    EXPECT_THROW(psnr(a, random_image(16, 17, 3, rng), true), ArgumentError);
}

TEST(Ssim, IdentityAndConstants) {
    Rng rng(4);
    auto a = random_image(24, 24, 3, rng);
    EXPECT_EQ(ssim(a, a, true), 1.0);
    ImageTensor c1(16, 16, 1, 0.3f);
    EXPECT_EQ(ssim(c1, c1, false), 1.0);
}

TEST(Ssim, InvertedBinaryImageIsNegative) {
    ImageTensor a(32, 32, 1);
    Rng rng(5);
    for (auto& v : a.data) v = rng.bernoulli(0.5) ? 1.0f : 0.0f;
    auto b = a;
    for (auto& v : b.data) v = 1.0f - v;
    EXPECT_LT(ssim(a, b, false), 0.0);
}

TEST(Ssim, SymmetricBoundedAndWindowChecked) {
    Rng rng(6);
    for (int i = 0; i < 5; ++i) {
        auto a = random_image(20, 22, 3, rng), b = random_image(20, 22, 3, rng);
        const double s = ssim(a, b, true);
        EXPECT_NEAR(s, ssim(b, a, true), 1e-12);
        EXPECT_GE(s, -1.0);
        EXPECT_LE(s, 1.0);
    }
    EXPECT_THROW(ssim(ImageTensor(10, 20, 1), ImageTensor(10, 20, 1), false), ArgumentError);
}

TEST(OpOr, PerfectPredictions) {
    auto v = abc();
    std::vector<TagSet> t{make_tagset({"a"}, v), make_tagset({"b", "c"}, v)};
    auto r = compute_op_or(t, t, v);
    EXPECT_EQ(r.op, 1.0);
    EXPECT_EQ(r.or_, 1.0);
}

TEST(OpOr, HandEnumeratedCase) {
    auto v = abc();
    std::vector<TagSet> pred{make_tagset({"a", "b"}, v), make_tagset({"a"}, v)};
    std::vector<TagSet> truth{make_tagset({"a"}, v), make_tagset({"a", "c"}, v)};
    auto r = compute_op_or(pred, truth, v);
    EXPECT_EQ(r.counts.total_correct(), 2);
    EXPECT_EQ(r.counts.total_predicted(), 3);
    EXPECT_EQ(r.counts.total_ground_truth(), 3);
    EXPECT_NEAR(*r.op, 2.0 / 3.0, 1e-9);
    EXPECT_NEAR(*r.or_, 2.0 / 3.0, 1e-9);
}

TEST(OpOr, EmptyPredictionsLeaveOpUndefined) {
    auto v = abc();
    std::vector<TagSet> pred(2);
    std::vector<TagSet> truth{make_tagset({"a"}, v), make_tagset({"c"}, v)};
    auto r = compute_op_or(pred, truth, v);
    EXPECT_FALSE(r.op.has_value());
    EXPECT_EQ(r.or_, 0.0);
    EXPECT_FALSE(r.warnings.empty());
}

TEST(OpOr, UnknownTagAndLengthMismatch) {
    auto v = abc();
    TagSet bad{{"zebra"}, {1.0}};
    EXPECT_THROW(compute_op_or({bad}, {TagSet{}}, v), VocabularyError);
    EXPECT_THROW(compute_op_or({TagSet{}}, {}, v), ArgumentError);
}

TEST(OpOr, MatchesBruteForceOnRandomInstances) {
    std::vector<std::string> classes;
    for (int i = 0; i < 20; ++i) classes.push_back("tag" + std::to_string(i));
    TagVocabulary v(classes);
    Rng rng(7);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = static_cast<int>(rng.uniform_int(1, 200));
        std::vector<TagSet> pred, truth;
        for (int i = 0; i < n; ++i) {
            pred.push_back(random_tagset(v, rng, rng.uniform(0.0, 0.5)));
            truth.push_back(random_tagset(v, rng, rng.uniform(0.0, 0.5)));
        }
        const auto r = compute_op_or(pred, truth, v);
        const auto b = brute_force(pred, truth, classes);
        if (b.np > 0)
            EXPECT_NEAR(*r.op, b.nt / b.np, 1e-12);
        else
            EXPECT_FALSE(r.op.has_value());
        if (b.ng > 0)
            EXPECT_NEAR(*r.or_, b.nt / b.ng, 1e-12);
        else
            EXPECT_FALSE(r.or_.has_value());
        for (int c = 0; c < 20; ++c)
            EXPECT_LE(r.counts.correct[c], std::min(r.counts.predicted[c], r.counts.ground_truth[c]));
    }
}

TEST(AveragePrecision, HandComputedCurve) {
    auto ap = average_precision({{0.9}, {0.8}, {0.7}}, {{true}, {false}, {true}});
    ASSERT_TRUE(ap.has_value());
    EXPECT_NEAR(*ap, (1.0 + 2.0 / 3.0) / 2.0, 1e-9);
}

TEST(AveragePrecision, PerfectAndInvertedRankings) {
    std::vector<std::vector<double>> s{{0.9, 0.1}, {0.8, 0.7}, {0.2, 0.9}, {0.1, 0.3}};
    std::vector<std::vector<bool>> t{{true, false}, {true, true}, {false, true}, {false, false}};
    EXPECT_NEAR(*average_precision(s, t), 1.0, 1e-12);
    for (int n : {2, 5, 10}) {
        std::vector<std::vector<double>> sc;
        std::vector<std::vector<bool>> tr;
        for (int i = 0; i < n; ++i) {
            sc.push_back({1.0 - 0.05 * i});
            tr.push_back({i == n - 1});
        }
        EXPECT_NEAR(*average_precision(sc, tr), 1.0 / n, 1e-12);
    }
}

TEST(AveragePrecision, UndefinedWithoutPositives) {
    EXPECT_FALSE(average_precision({{0.3, 0.2}}, {{false, false}}).has_value());
    EXPECT_THROW(average_precision({{1.3}}, {{true}}), ArgumentError);
}

TEST(AveragePrecision, InvariantUnderMonotoneTransform) {
    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<std::vector<double>> s, s2;
        std::vector<std::vector<bool>> t;
        for (int n = 0; n < 40; ++n) {
            std::vector<double> row;
            std::vector<bool> tr;
            for (int c = 0; c < 4; ++c) {
                row.push_back(std::round(rng.uniform() * 20) / 20);  // ties included
                tr.push_back(rng.bernoulli(0.3));
            }
            std::vector<double> row2;
            for (double x : row) row2.push_back(x * x * x);
            s.push_back(row);
            s2.push_back(row2);
            t.push_back(tr);
        }
        auto a = average_precision(s, t), b = average_precision(s2, t);
        ASSERT_EQ(a.has_value(), b.has_value());
        if (a) EXPECT_DOUBLE_EQ(*a, *b);
    }
}

TEST(DecodeTags, ThresholdBehaviour) {
    TagVocabulary v({"x", "y"});
    std::vector<double> sat{10.0, -10.0};
    EXPECT_EQ(decode_tags(sat, v, 0.5).tags, (std::vector<std::string>{"x"}));
    std::vector<double> mod{0.0, 0.5};
    EXPECT_EQ(decode_tags(mod, v, 0.6).tags, (std::vector<std::string>{"y"}));
    EXPECT_TRUE(decode_tags(mod, v, 0.999999).empty());
    EXPECT_THROW(decode_tags(mod, v, 1.0), ArgumentError);
    EXPECT_THROW(decode_tags(mod, v, 0.0), ArgumentError);
}

TEST(DecodeTags, MonotoneInThreshold) {
    TagVocabulary v({"a", "b", "c", "d", "e"});
    Rng rng(9);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> logits(5);
        for (auto& l : logits) l = rng.normal() * 3;
        const double t1 = rng.uniform(0.01, 0.99), t2 = rng.uniform(t1, 0.999);
        const auto lo = decode_tags(logits, v, t1), hi = decode_tags(logits, v, t2);
        for (const auto& t : hi.tags) EXPECT_TRUE(lo.contains(t));
        for (double s : hi.scores) EXPECT_GE(s, t2);
    }
}

TEST(Report, AggregatesEqualPerImageMeans) {
    Rng rng(10);
    std::vector<ImageTensor> outs, refs;
    std::vector<std::string> ids;
    for (int i = 0; i < 6; ++i) {
        refs.push_back(random_image(16, 16, 3, rng));
        auto o = refs.back();
        for (auto& x : o.data) x = std::clamp(x + static_cast<float>(rng.normal() * 0.05), 0.0f, 1.0f);
        outs.push_back(o);
        ids.push_back("img" + std::to_string(i));
    }
    MetricRegistry reg;
    reg.add({"mean_abs", MetricPlugin::Kind::per_image, false,
             [](const ImageTensor& a, const ImageTensor* b) {
                 double s = 0;
                 for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a.data[i] - b->data[i]);
                 return s / a.size();
             },
             nullptr});
    reg.add({"count", MetricPlugin::Kind::distributional, true, nullptr,
             [](const std::vector<ImageTensor>& a, const std::vector<ImageTensor>&) { return double(a.size()); }});
    auto r = evaluate_images("arm", ids, outs, refs, &reg);
    double ps = 0, ss = 0;
    for (const auto& im : r.images) {
        ps += im.psnr;
        ss += im.ssim;
    }
    EXPECT_NEAR(r.psnr_mean, ps / 6, 1e-9);
    EXPECT_NEAR(r.ssim_mean, ss / 6, 1e-9);
    EXPECT_EQ(r.distributional.at("count"), 6.0);
    EXPECT_TRUE(r.extra_means.count("mean_abs"));

    const auto back = report_from_json(to_json(r));
    EXPECT_NEAR(back.psnr_mean, r.psnr_mean, 1e-9);
    EXPECT_EQ(back.image_count(), 6u);

    const auto csv = to_csv({r, back});
    EXPECT_NE(csv.find("metric,arm,arm"), std::string::npos);
    EXPECT_NE(csv.find("OP,null,null"), std::string::npos);
    EXPECT_NE(to_text_table({r}).find("PSNR(Y)"), std::string::npos);
}

TEST(Report, PluginRegistryRejectsBadPlugins) {
    MetricRegistry reg;
    EXPECT_THROW(reg.add({"", MetricPlugin::Kind::per_image, true, nullptr, nullptr}), ArgumentError);
    EXPECT_THROW(reg.add({"lpips", MetricPlugin::Kind::per_image, true, nullptr, nullptr}), ArgumentError);
}

TEST(FlatRegion, ConstantGroundTruthUsesEveryPixel) {
    Rng rng(5);
    const ImageTensor gt(12, 12, 3, 0.4f);
    const auto out = random_image(12, 12, 3, rng), ref = random_image(12, 12, 3, rng);
    const auto yo = to_luma(out), yr = to_luma(ref);
    double expect = 0;
    for (std::size_t k = 0; k < yo.size(); ++k) expect += std::abs(static_cast<double>(yo.data[k]) - yr.data[k]);
    expect /= static_cast<double>(yo.size());
    for (double p : {1.0, 50.0, 100.0}) EXPECT_NEAR(flat_region_deviation(gt, out, ref, 3, p), expect, 1e-12);
}

TEST(FlatRegion, HalfFlatHandCase) {
    // left four columns constant, right four a checkerboard; with a 3x3 window
    // only columns 0..2 have zero local variance
    ImageTensor gt(8, 8, 1), out(8, 8, 1), ref(8, 8, 1);
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) {
            gt.at(i, j, 0) = j < 4 ? 0.0f : static_cast<float>((i + j) % 2);
            out.at(i, j, 0) = j < 3 ? 0.25f : 0.75f;
        }
    EXPECT_NEAR(flat_region_deviation(gt, out, ref, 3, 25.0), 0.25, 1e-7);
    // 100th percentile takes every pixel: (24 * 0.25 + 40 * 0.75) / 64
    EXPECT_NEAR(flat_region_deviation(gt, out, ref, 3, 100.0), (24 * 0.25 + 40 * 0.75) / 64, 1e-7);
    EXPECT_THROW(flat_region_deviation(gt, out, ImageTensor(8, 7, 1), 3, 50), ArgumentError);
    EXPECT_THROW(flat_region_deviation(gt, out, ref, 2, 50), ArgumentError);
    EXPECT_THROW(flat_region_deviation(gt, out, ref, 3, 0), ArgumentError);
}

TEST(FlatRegion, LocalVarianceMatchesTwoPass) {
    Rng rng(6);
    const auto img = random_image(7, 9, 1, rng);
    const auto var = local_variance(img, 5);
    for (int i = 0; i < 7; ++i)
        for (int j = 0; j < 9; ++j) {
            std::vector<double> v;
            for (int a = i - 2; a <= i + 2; ++a)
                for (int b = j - 2; b <= j + 2; ++b)
                    if (a >= 0 && a < 7 && b >= 0 && b < 9) v.push_back(img.at(a, b, 0));
            double m = 0, s = 0;
            for (double x : v) m += x;
            m /= v.size();
            for (double x : v) s += (x - m) * (x - m);
            EXPECT_NEAR(var[i * 9 + j], s / v.size(), 1e-12);
        }
}
