#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "semsr/image/image.hpp"

namespace semsr {

enum class ResizeMode { bicubic, bilinear, area };

inline std::string to_string(ResizeMode m) {
    switch (m) {
        case ResizeMode::bicubic: return "bicubic";
        case ResizeMode::bilinear: return "bilinear";
        case ResizeMode::area: return "area";
    }
    return "?";
}

inline ResizeMode parse_resize_mode(const std::string& s) {
    if (s == "bicubic") return ResizeMode::bicubic;
    if (s == "bilinear") return ResizeMode::bilinear;
    if (s == "area") return ResizeMode::area;
    throw ConfigError("unknown resize mode '" + s + "'");
}

namespace detail {

inline double resample_kernel(ResizeMode mode, double x) {
    x = std::abs(x);
    switch (mode) {
        case ResizeMode::bicubic: {
            constexpr double a = -0.5;
            if (x < 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
            if (x < 2.0) return (((x - 5.0) * x + 8.0) * x - 4.0) * a;
            return 0.0;
        }
        case ResizeMode::bilinear: return x < 1.0 ? 1.0 - x : 0.0;
        case ResizeMode::area: return x < 0.5 ? 1.0 : 0.0;
    }
    return 0.0;
}

inline double kernel_support(ResizeMode mode) {
    switch (mode) {
        case ResizeMode::bicubic: return 2.0;
        case ResizeMode::bilinear: return 1.0;
        case ResizeMode::area: return 0.5;
    }
    return 1.0;
}

struct AxisWeights {
    std::vector<int> first;
    std::vector<std::vector<double>> weights;
};

// Antialiased 1-D filter taps: the kernel is stretched by 1/scale when
// downsampling, and taps falling outside the input are dropped and the rest
// renormalized.
inline AxisWeights axis_weights(int in, int out, ResizeMode mode) {
    AxisWeights aw;
    const double scale = static_cast<double>(out) / in;
    const double stretch = scale < 1.0 ? 1.0 / scale : 1.0;
    const double support = kernel_support(mode) * stretch;
    aw.first.resize(out);
    aw.weights.resize(out);
    for (int i = 0; i < out; ++i) {
        const double center = (i + 0.5) / scale;
        const int lo = std::max(0, static_cast<int>(std::floor(center - support)));
        const int hi = std::min(in, static_cast<int>(std::ceil(center + support)));
        std::vector<double> w;
        double total = 0;
        for (int j = lo; j < hi; ++j) {
            const double v = resample_kernel(mode, (j + 0.5 - center) / stretch);
            w.push_back(v);
            total += v;
        }
        // trim zero taps at the ends
        int a = 0, b = static_cast<int>(w.size());
        while (a < b && w[a] == 0.0) ++a;
        while (b > a && w[b - 1] == 0.0) --b;
        aw.first[i] = lo + a;
        aw.weights[i].assign(w.begin() + a, w.begin() + b);
        for (auto& v : aw.weights[i]) v /= total;
    }
    return aw;
}

}  // namespace detail

inline ImageTensor resize(const ImageTensor& img, int out_h, int out_w, ResizeMode mode) {
    if (out_h <= 0 || out_w <= 0) throw ArgumentError("resize: non-positive output size");
    if (out_h == img.height && out_w == img.width) return img;
    const auto wx = detail::axis_weights(img.width, out_w, mode);
    const auto wy = detail::axis_weights(img.height, out_h, mode);
    const int C = img.channels;
    // horizontal pass in double
    std::vector<double> tmp(static_cast<std::size_t>(img.height) * out_w * C);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < out_w; ++x)
            for (int c = 0; c < C; ++c) {
                double s = 0;
                const auto& w = wx.weights[x];
                for (std::size_t k = 0; k < w.size(); ++k) s += w[k] * img.at(y, wx.first[x] + static_cast<int>(k), c);
                tmp[(static_cast<std::size_t>(y) * out_w + x) * C + c] = s;
            }
    ImageTensor out(out_h, out_w, C);
    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x)
            for (int c = 0; c < C; ++c) {
                double s = 0;
                const auto& w = wy.weights[y];
                for (std::size_t k = 0; k < w.size(); ++k)
                    s += w[k] * tmp[((static_cast<std::size_t>(wy.first[y]) + k) * out_w + x) * C + c];
                out.at(y, x, c) = static_cast<float>(s);
            }
    return out;
}

inline ImageTensor bicubic_downsample(const ImageTensor& img, int factor) {
    if (img.height % factor || img.width % factor)
        throw ArgumentError("bicubic_downsample: size not divisible by " + std::to_string(factor));
    return resize(img, img.height / factor, img.width / factor, ResizeMode::bicubic);
}

inline ImageTensor bicubic_upsample(const ImageTensor& img, int factor) {
    auto out = resize(img, img.height * factor, img.width * factor, ResizeMode::bicubic);
    out.clamp01();
    return out;
}

}  // namespace semsr
