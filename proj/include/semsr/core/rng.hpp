#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace semsr {

// Seeded random stream. Uniform and normal draws are computed here from the raw
// 64-bit engine output so that sequences do not depend on the standard
// library's distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(mix(seed)) {}

    std::uint64_t next_u64() { return engine_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi].
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
        if (span == 0) return lo + static_cast<std::int64_t>(engine_());
        return lo + static_cast<std::int64_t>(engine_() % span);
    }

    bool bernoulli(double p) { return uniform() < p; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    std::int64_t poisson(double mean) {
        std::poisson_distribution<std::int64_t> dist(mean);
        return dist(engine_);
    }

    // Independent child stream, e.g. one per data worker or per sample.
    Rng fork(std::uint64_t stream) const { return Rng(mix(seed_material() ^ mix(stream + 0x9e3779b97f4a7c15ULL))); }

    std::mt19937_64& engine() { return engine_; }

    static std::uint64_t mix(std::uint64_t x) {
        // splitmix64 finalizer
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

private:
    std::uint64_t seed_material() const {
        auto copy = engine_;
        return copy();
    }

    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Derive a seed for a named sub-task from a parent seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
    return Rng::mix(seed ^ Rng::mix(salt));
}

}  // namespace semsr
