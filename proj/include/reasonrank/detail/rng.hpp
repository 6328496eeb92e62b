#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace reasonrank::detail {

// Deterministic draws on top of mt19937_64. The standard distributions are
// implementation-defined, so repeat-run bit-equality requires rolling the
// mapping from raw engine output ourselves.

inline double uniform01(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t n) {
    // multiply-shift; bias is < 2^-32 for the small bounds used here
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(rng()) * n) >> 64);
}

inline double normal(std::mt19937_64& rng, double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform01(rng);
    double u2 = uniform01(rng);
    if (u1 < 1e-300) u1 = 1e-300;
    double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    return mean + stddev * z;
}

template <typename T>
void shuffle(std::vector<T>& v, std::mt19937_64& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::size_t j = static_cast<std::size_t>(bounded(rng, i));
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace reasonrank::detail
