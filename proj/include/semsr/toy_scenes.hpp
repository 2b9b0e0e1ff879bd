#pragma once

#include <array>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "semsr/core/rng.hpp"
#include "semsr/image/image.hpp"

// Procedural scenes of colored geometric shapes with multi-label tags.
namespace semsr::toy {

inline const std::vector<std::string>& default_vocabulary() {
    static const std::vector<std::string> v{"circle", "square", "triangle", "red",
                                            "green",  "blue",   "yellow",   "striped"};
    return v;
}

enum class ShapeKind { circle, square, triangle };

struct Color {
    const char* name;
    std::array<float, 3> rgb;
};

inline const std::array<Color, 4>& palette() {
    static const std::array<Color, 4> p{{{"red", {0.86f, 0.12f, 0.10f}},
                                         {"green", {0.12f, 0.70f, 0.20f}},
                                         {"blue", {0.12f, 0.25f, 0.88f}},
                                         {"yellow", {0.95f, 0.85f, 0.10f}}}};
    return p;
}

struct ShapeSpec {
    ShapeKind kind;
    int color;
    bool striped;
    double cx, cy, radius, angle;
};

struct Scene {
    ImageTensor image;
    std::vector<std::string> tags;  // sorted in vocabulary order
};

struct SceneConfig {
    int size = 32;
    int min_shapes = 1;
    int max_shapes = 2;
    double striped_prob = 0.3;
    double min_radius = 0.18;  // fraction of image size
    double max_radius = 0.32;
    int supersample = 4;
};

namespace detail {

inline bool inside(const ShapeSpec& s, double x, double y) {
    const double dx = x - s.cx, dy = y - s.cy;
    const double ca = std::cos(s.angle), sa = std::sin(s.angle);
    const double u = ca * dx + sa * dy, v = -sa * dx + ca * dy;
    switch (s.kind) {
        case ShapeKind::circle: return dx * dx + dy * dy <= s.radius * s.radius;
        case ShapeKind::square: {
            const double h = s.radius * 0.8;
            return std::abs(u) <= h && std::abs(v) <= h;
        }
        case ShapeKind::triangle: {
            // equilateral triangle inscribed in the radius, pointing along -v
            const double r = s.radius;
            for (int k = 0; k < 3; ++k) {
                const double a = k * 2.0 * M_PI / 3.0;
                const double nx = std::sin(a), ny = std::cos(a);
                if (nx * u + ny * v > r * 0.5) return false;
            }
            return true;
        }
    }
    return false;
}

}  // namespace detail

inline Scene generate_scene(const SceneConfig& cfg, Rng& rng) {
    const int n = cfg.size;
    Scene scene;
    scene.image = ImageTensor(n, n, 3);
    // background: soft gray gradient with a slight tint
    const float base = static_cast<float>(rng.uniform(0.35, 0.65));
    const float gx = static_cast<float>(rng.uniform(-0.15, 0.15));
    const float gy = static_cast<float>(rng.uniform(-0.15, 0.15));
    std::array<float, 3> tint{};
    for (auto& t : tint) t = static_cast<float>(rng.uniform(-0.04, 0.04));

    const int count = static_cast<int>(rng.uniform_int(cfg.min_shapes, cfg.max_shapes));
    std::vector<ShapeSpec> shapes;
    for (int i = 0; i < count; ++i) {
        ShapeSpec s;
        s.kind = static_cast<ShapeKind>(rng.uniform_int(0, 2));
        s.color = static_cast<int>(rng.uniform_int(0, 3));
        s.striped = rng.bernoulli(cfg.striped_prob);
        s.radius = rng.uniform(cfg.min_radius, cfg.max_radius) * n;
        s.cx = rng.uniform(s.radius * 0.7, n - s.radius * 0.7);
        s.cy = rng.uniform(s.radius * 0.7, n - s.radius * 0.7);
        s.angle = rng.uniform(0.0, 2.0 * M_PI);
        shapes.push_back(s);
    }
    const double stripe_period = std::max(3.0, n / 8.0);
    const int ss = std::max(1, cfg.supersample);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            std::array<double, 3> acc{};
            for (int sy = 0; sy < ss; ++sy)
                for (int sx = 0; sx < ss; ++sx) {
                    const double px = x + (sx + 0.5) / ss, py = y + (sy + 0.5) / ss;
                    std::array<double, 3> c{};
                    for (int k = 0; k < 3; ++k)
                        c[k] = base + gx * (px / n - 0.5) + gy * (py / n - 0.5) + tint[k];
                    for (const auto& s : shapes) {
                        if (!detail::inside(s, px, py)) continue;
                        const auto& rgb = palette()[s.color].rgb;
                        const bool dark =
                            s.striped && std::fmod(px + py + 1000.0 * stripe_period, stripe_period) < stripe_period / 2;
                        for (int k = 0; k < 3; ++k) c[k] = dark ? rgb[k] * 0.25 : rgb[k];
                    }
                    for (int k = 0; k < 3; ++k) acc[k] += c[k];
                }
            for (int k = 0; k < 3; ++k)
                scene.image.at(y, x, k) = std::clamp(static_cast<float>(acc[k] / (ss * ss)), 0.0f, 1.0f);
        }
    std::set<std::string> tagset;
    static const char* kind_names[] = {"circle", "square", "triangle"};
    for (const auto& s : shapes) {
        tagset.insert(kind_names[static_cast<int>(s.kind)]);
        tagset.insert(palette()[s.color].name);
        if (s.striped) tagset.insert("striped");
    }
    for (const auto& t : default_vocabulary())
        if (tagset.count(t)) scene.tags.push_back(t);
    return scene;
}

inline std::vector<Scene> generate_scenes(const SceneConfig& cfg, int count, std::uint64_t seed) {
    std::vector<Scene> out;
    out.reserve(count);
    for (int i = 0; i < count; ++i) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
        out.push_back(generate_scene(cfg, rng));
    }
    return out;
}

}  // namespace semsr::toy
