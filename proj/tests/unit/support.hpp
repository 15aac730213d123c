#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "parbeam/core.hpp"

namespace testing {

inline std::vector<double> random_vector(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<double> v(n);
    for (auto& x : v) x = nd(rng);
    return v;
}

inline parbeam::Image random_image(const parbeam::Geometry& g, std::uint64_t seed) {
    const auto n = static_cast<std::size_t>(g.image_side());
    return parbeam::Image(g, parbeam::Array2(n, n, random_vector(n * n, seed)));
}

inline parbeam::Sinogram random_sinogram(const parbeam::Geometry& g, std::uint64_t seed) {
    const auto p = static_cast<std::size_t>(g.num_angles());
    const auto b = static_cast<std::size_t>(g.num_bins());
    return parbeam::Sinogram(g, parbeam::Array2(p, b, random_vector(p * b, seed)));
}

inline double rel_l2(const std::vector<double>& a, const std::vector<double>& b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += b[i] * b[i];
    }
    return std::sqrt(num / den);
}

} // namespace testing
