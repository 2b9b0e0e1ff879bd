#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "semsr/image/image.hpp"
#include "semsr/tags.hpp"

namespace semsr::eval {

inline constexpr double kPsnrCap = 100.0;

// 10 log10(1 / MSE) on the [0, 1] scale; identical images report kPsnrCap.
inline double psnr(const ImageTensor& a, const ImageTensor& b, bool y_channel) {
    if (!a.same_shape(b)) throw ArgumentError("psnr: images differ in shape");
    const ImageTensor& x = y_channel ? to_luma(a) : a;
    const ImageTensor& y = y_channel ? to_luma(b) : b;
    double mse = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = static_cast<double>(x.data[i]) - y.data[i];
        mse += d * d;
    }
    mse /= static_cast<double>(x.size());
    if (mse == 0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

namespace detail {

inline std::vector<double> ssim_window() {
    constexpr int n = 11;
    constexpr double sigma = 1.5;
    std::vector<double> w(n * n);
    double total = 0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const double v = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * sigma * sigma));
            w[i * n + j] = v;
            total += v;
        }
    for (auto& v : w) v /= total;
    return w;
}

inline double ssim_channel(const ImageTensor& a, const ImageTensor& b, int c) {
    constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
    static const std::vector<double> w = ssim_window();
    const int oh = a.height - 10, ow = a.width - 10;
    double acc = 0;
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
            for (int i = 0; i < 11; ++i)
                for (int j = 0; j < 11; ++j) {
                    const double k = w[i * 11 + j];
                    const double u = a.at(y + i, x + j, c), v = b.at(y + i, x + j, c);
                    mx += k * u;
                    my += k * v;
                    sxx += k * u * u;
                    syy += k * v * v;
                    sxy += k * u * v;
                }
            const double vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
            acc += ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
        }
    return acc / (static_cast<double>(oh) * ow);
}

}  // namespace detail

// Mean SSIM with an 11x11 Gaussian window (sigma 1.5) over the valid region;
// color images average the per-channel values.
inline double ssim(const ImageTensor& a, const ImageTensor& b, bool y_channel) {
    if (!a.same_shape(b)) throw ArgumentError("ssim: images differ in shape");
    if (a.height < 11 || a.width < 11) throw ArgumentError("ssim: image smaller than the 11x11 window");
    if (a == b) return 1.0;
    if (y_channel) return detail::ssim_channel(to_luma(a), to_luma(b), 0);
    double s = 0;
    for (int c = 0; c < a.channels; ++c) s += detail::ssim_channel(a, b, c);
    return s / a.channels;
}

// Local variance of the luma over a window x window neighbourhood clipped at
// the borders.
inline std::vector<double> local_variance(const ImageTensor& img, int window) {
    if (window < 1 || window % 2 == 0) throw ArgumentError("local_variance: window must be odd and positive");
    const auto y = to_luma(img);
    const int r = window / 2;
    std::vector<double> out(static_cast<std::size_t>(y.height) * y.width);
    for (int i = 0; i < y.height; ++i)
        for (int j = 0; j < y.width; ++j) {
            double s = 0, ss = 0;
            int n = 0;
            for (int a = std::max(0, i - r); a <= std::min(y.height - 1, i + r); ++a)
                for (int b = std::max(0, j - r); b <= std::min(y.width - 1, j + r); ++b) {
                    const double v = y.at(a, b, 0);
                    s += v;
                    ss += v * v;
                    ++n;
                }
            const double m = s / n;
            out[static_cast<std::size_t>(i) * y.width + j] = std::max(0.0, ss / n - m * m);
        }
    return out;
}

// Mean |Y(output) - Y(reference)| over the flat part of gt: pixels whose local
// variance is at or below the given percentile (nearest rank) of the image's
// local variances.
inline double flat_region_deviation(const ImageTensor& gt, const ImageTensor& output, const ImageTensor& reference,
                                    int window, double percentile) {
    if (!gt.same_shape(output) || !gt.same_shape(reference))
        throw ArgumentError("flat_region_deviation: images differ in shape");
    if (!(percentile > 0 && percentile <= 100)) throw ArgumentError("flat_region_deviation: percentile must lie in (0, 100]");
    const auto var = local_variance(gt, window);
    auto sorted = var;
    std::sort(sorted.begin(), sorted.end());
    const auto rank = static_cast<std::size_t>(std::ceil(percentile / 100.0 * sorted.size()));
    const double cut = sorted[std::max<std::size_t>(rank, 1) - 1];
    const auto yo = to_luma(output), yr = to_luma(reference);
    double total = 0;
    int n = 0;
    for (std::size_t k = 0; k < var.size(); ++k)
        if (var[k] <= cut) {
            total += std::abs(static_cast<double>(yo.data[k]) - yr.data[k]);
            ++n;
        }
    return total / n;
}

// Per-class image counts: predicted (N_p), correctly predicted (N_t) and
// ground truth (N_g).
struct TagConfusionCounts {
    std::vector<long> predicted;
    std::vector<long> correct;
    std::vector<long> ground_truth;

    explicit TagConfusionCounts(int classes = 0)
        : predicted(classes, 0), correct(classes, 0), ground_truth(classes, 0) {}

    long total_predicted() const { return std::accumulate(predicted.begin(), predicted.end(), 0L); }
    long total_correct() const { return std::accumulate(correct.begin(), correct.end(), 0L); }
    long total_ground_truth() const { return std::accumulate(ground_truth.begin(), ground_truth.end(), 0L); }
    bool operator==(const TagConfusionCounts&) const = default;
};

struct OpOrResult {
    std::optional<double> op;
    std::optional<double> or_;
    TagConfusionCounts counts;
    std::vector<std::string> warnings;
};

inline OpOrResult compute_op_or(const std::vector<TagSet>& predictions, const std::vector<TagSet>& truths,
                                const TagVocabulary& vocab) {
    if (predictions.size() != truths.size()) throw ArgumentError("compute_op_or: list lengths differ");
    OpOrResult r;
    r.counts = TagConfusionCounts(vocab.size());
    for (std::size_t n = 0; n < predictions.size(); ++n) {
        const auto p = tag_mask(predictions[n], vocab);
        const auto g = tag_mask(truths[n], vocab);
        for (int i = 0; i < vocab.size(); ++i) {
            r.counts.predicted[i] += p[i];
            r.counts.ground_truth[i] += g[i];
            r.counts.correct[i] += p[i] && g[i];
        }
    }
    const long nt = r.counts.total_correct(), np = r.counts.total_predicted(), ng = r.counts.total_ground_truth();
    if (np > 0)
        r.op = static_cast<double>(nt) / np;
    else
        r.warnings.push_back("OP undefined: no predicted labels");
    if (ng > 0)
        r.or_ = static_cast<double>(nt) / ng;
    else
        r.warnings.push_back("OR undefined: no ground-truth labels");
    return r;
}

// Area under the precision envelope (all-points interpolation) for one ranking.
inline double average_precision_single(const std::vector<double>& scores, const std::vector<bool>& truth) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    const long positives = std::count(truth.begin(), truth.end(), true);
    std::vector<double> precision, recall;
    long tp = 0;
    for (std::size_t k = 0; k < order.size(); ++k) {
        tp += truth[order[k]];
        precision.push_back(static_cast<double>(tp) / (k + 1));
        recall.push_back(static_cast<double>(tp) / positives);
    }
    for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
    double ap = 0, prev_recall = 0;
    for (std::size_t k = 0; k < order.size(); ++k) {
        if (recall[k] > prev_recall) {
            ap += (recall[k] - prev_recall) * precision[k];
            prev_recall = recall[k];
        }
    }
    return ap;
}

// Mean AP over classes with at least one positive; nullopt when none has.
// scores[image][class], truths[image][class].
inline std::optional<double> average_precision(const std::vector<std::vector<double>>& scores,
                                               const std::vector<std::vector<bool>>& truths) {
    if (scores.size() != truths.size()) throw ArgumentError("average_precision: list lengths differ");
    if (scores.empty()) return std::nullopt;
    const std::size_t C = scores.front().size();
    double total = 0;
    int counted = 0;
    for (std::size_t c = 0; c < C; ++c) {
        std::vector<double> s;
        std::vector<bool> t;
        for (std::size_t n = 0; n < scores.size(); ++n) {
            if (scores[n].size() != C || truths[n].size() != C)
                throw ArgumentError("average_precision: ragged score matrix");
            if (scores[n][c] < 0.0 || scores[n][c] > 1.0) throw ArgumentError("average_precision: score outside [0, 1]");
            s.push_back(scores[n][c]);
            t.push_back(truths[n][c]);
        }
        if (std::find(t.begin(), t.end(), true) == t.end()) continue;
        total += average_precision_single(s, t);
        ++counted;
    }
    if (counted == 0) return std::nullopt;
    return total / counted;
}

}  // namespace semsr::eval
