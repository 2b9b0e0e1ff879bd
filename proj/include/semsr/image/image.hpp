#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "semsr/core/errors.hpp"
#include "semsr/nn/var.hpp"

namespace semsr {

// H x W x C image, interleaved, values nominally in [0, 1].
struct ImageTensor {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> data;

    ImageTensor() = default;
    ImageTensor(int h, int w, int c, float fill = 0.0f)
        : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {
        if (h <= 0 || w <= 0 || (c != 1 && c != 3)) throw ArgumentError("ImageTensor: invalid dimensions");
    }

    float& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    float at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    std::size_t size() const { return data.size(); }
    bool same_shape(const ImageTensor& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }

    void clamp01() {
        for (auto& v : data) v = std::clamp(v, 0.0f, 1.0f);
    }

    bool operator==(const ImageTensor& o) const = default;
};

inline void validate_image(const ImageTensor& img, int min_side = 8) {
    if (img.height < min_side || img.width < min_side)
        throw ArgumentError("image must be at least " + std::to_string(min_side) + "x" + std::to_string(min_side) +
                            ", got " + std::to_string(img.height) + "x" + std::to_string(img.width));
    if (img.data.size() != static_cast<std::size_t>(img.height) * img.width * img.channels)
        throw ArgumentError("image data size does not match its dimensions");
}

// One of the 8 flips/rotations of the square grid: bit 0 flips x, bit 1 flips
// y, bit 2 transposes (applied first).
inline ImageTensor dihedral(const ImageTensor& img, int k) {
    if (k < 0 || k > 7) throw ArgumentError("dihedral: k must lie in [0, 7]");
    const bool tr = k & 4;
    ImageTensor out(tr ? img.width : img.height, tr ? img.height : img.width, img.channels);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x) {
            int sy = (k & 2) ? out.height - 1 - y : y;
            int sx = (k & 1) ? out.width - 1 - x : x;
            if (tr) std::swap(sy, sx);
            for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(sy, sx, c);
        }
    return out;
}

// BT.601 luma on [0, 1] RGB.
inline ImageTensor to_luma(const ImageTensor& img) {
    if (img.channels == 1) return img;
    ImageTensor y(img.height, img.width, 1);
    for (int r = 0; r < img.height; ++r)
        for (int c = 0; c < img.width; ++c)
            y.at(r, c, 0) = static_cast<float>(0.299 * img.at(r, c, 0) + 0.587 * img.at(r, c, 1) + 0.114 * img.at(r, c, 2));
    return y;
}

// Stacks images into an NCHW batch, mapping [0, 1] to [lo, hi].
template <typename T>
nn::Var<T> to_batch(const std::vector<const ImageTensor*>& images, float lo = 0.0f, float hi = 1.0f) {
    if (images.empty()) throw ArgumentError("to_batch: empty batch");
    const auto& f = *images.front();
    const int N = static_cast<int>(images.size()), C = f.channels, H = f.height, W = f.width;
    std::vector<T> out(static_cast<std::size_t>(N) * C * H * W);
    for (int n = 0; n < N; ++n) {
        const auto& im = *images[n];
        if (!im.same_shape(f)) throw ArgumentError("to_batch: images differ in shape");
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x)
                    out[((static_cast<std::size_t>(n) * C + c) * H + y) * W + x] =
                        static_cast<T>(lo + (hi - lo) * im.at(y, x, c));
    }
    return nn::Var<T>::from({N, C, H, W}, std::move(out));
}

template <typename T>
nn::Var<T> to_batch(const std::vector<ImageTensor>& images, float lo = 0.0f, float hi = 1.0f) {
    std::vector<const ImageTensor*> ptrs;
    for (const auto& im : images) ptrs.push_back(&im);
    return to_batch<T>(ptrs, lo, hi);
}

// Inverse of to_batch; does not clamp.
template <typename T>
std::vector<ImageTensor> from_batch(const nn::Var<T>& batch, float lo = 0.0f, float hi = 1.0f) {
    const int N = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
    std::vector<ImageTensor> out;
    out.reserve(N);
    for (int n = 0; n < N; ++n) {
        ImageTensor im(H, W, C);
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x)
                    im.at(y, x, c) = static_cast<float>(
                        (batch.values()[((static_cast<std::size_t>(n) * C + c) * H + y) * W + x] - lo) / (hi - lo));
        out.push_back(std::move(im));
    }
    return out;
}

inline std::vector<std::uint8_t> quantize8(const ImageTensor& img) {
    std::vector<std::uint8_t> out(img.size());
    for (std::size_t i = 0; i < img.size(); ++i)
        out[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.data[i], 0.0f, 1.0f) * 255.0f));
    return out;
}

inline ImageTensor from8(const std::uint8_t* bytes, int h, int w, int c) {
    ImageTensor img(h, w, c);
    for (std::size_t i = 0; i < img.size(); ++i) img.data[i] = bytes[i] / 255.0f;
    return img;
}

// ---------------------------------------------------------------- PNG I/O

inline void write_png(const std::string& path, const ImageTensor& img) {
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
    if (!fp) throw IoError("cannot open '" + path + "' for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng failed writing '" + path + "'");
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, img.width, img.height, 8, img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    auto bytes = quantize8(img);
    for (int y = 0; y < img.height; ++y)
        png_write_row(png, bytes.data() + static_cast<std::size_t>(y) * img.width * img.channels);
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline ImageTensor read_png(const std::string& path) {
    std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
    if (!fp) throw IoError("cannot open '" + path + "'");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng failed reading '" + path + "'");
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_packing(png);
    const auto color = png_get_color_type(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
    png_read_update_info(png, info);
    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    const int c = png_get_channels(png, info);
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(w) * h * c);
    std::vector<png_bytep> rows(h);
    for (int y = 0; y < h; ++y) rows[y] = bytes.data() + static_cast<std::size_t>(y) * w * c;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
    if (c != 1 && c != 3) throw IoError("unsupported channel count in '" + path + "'");
    return from8(bytes.data(), h, w, c);
}

}  // namespace semsr
