#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace idleak::rng {

// splitmix64 finalizer; used to derive independent stream seeds from a
// (seed, tag, indices...) tuple so that every randomized operation owns a
// named stream and results do not depend on call order.
inline std::uint64_t mix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive(std::uint64_t seed, std::string_view tag) {
    std::uint64_t h = mix(seed);
    for (char c : tag) h = mix(h ^ static_cast<std::uint64_t>(static_cast<unsigned char>(c)));
    return h;
}

template <typename... Ix>
std::uint64_t derive(std::uint64_t seed, std::string_view tag, Ix... indices) {
    std::uint64_t h = derive(seed, tag);
    ((h = mix(h ^ static_cast<std::uint64_t>(indices))), ...);
    return h;
}

// All stochastic code paths draw bits from mt19937_64 (sequence pinned by the
// standard) and map them with the explicit converters below, so output is
// identical across standard libraries.
using Engine = std::mt19937_64;

inline Engine engine(std::uint64_t stream_seed) { return Engine(stream_seed); }

// Uniform double in [0, 1).
inline double unit(Engine& eng) {
    return static_cast<double>(eng() >> 11) * 0x1.0p-53;
}

// Uniform double in [lo, hi).
inline double uniform(Engine& eng, double lo, double hi) {
    return lo + (hi - lo) * unit(eng);
}

// Uniform integer in [0, n). n must be > 0. Slight modulo bias is
// irrelevant at our scales and keeps the draw to a single engine call.
inline std::uint64_t below(Engine& eng, std::uint64_t n) {
    return eng() % n;
}

// Standard normal via Box-Muller (explicit formula, not
// std::normal_distribution, whose sequence is implementation-defined).
class Gaussian {
public:
    double operator()(Engine& eng) {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 1e-300) u1 = unit(eng);
        const double u2 = unit(eng);
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

private:
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace idleak::rng
