#pragma once

#include "scgplvm/core.hpp"

#include <cmath>
#include <random>
#include <sstream>

/// @file rng.hpp
/// Deterministic sampling on top of std::mt19937_64. The distribution
/// transforms are spelled out here (instead of <random> adaptors, whose
/// algorithms are implementation-defined) so that a seed pins the exact
/// byte stream on every platform.

namespace scgplvm::rng {

using Engine = std::mt19937_64;

/// Uniform double in [0, 1) with 53 random bits.
inline double uniform(Engine& g) {
    return static_cast<double>(g() >> 11) * 0x1.0p-53;
}

/// Uniform double in (0, 1].
inline double uniform_pos(Engine& g) { return 1.0 - uniform(g); }

/// Standard normal via Box-Muller (consumes two uniforms, returns one value).
inline double normal(Engine& g) {
    const double u1 = uniform_pos(g);
    const double u2 = uniform(g);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

inline double lognormal(Engine& g, double loc, double scale) {
    return std::exp(loc + scale * normal(g));
}

/// Gamma(shape k, rate b) by Marsaglia-Tsang squeeze.
inline double gamma(Engine& g, double shape, double rate) {
    if (shape < 1.0) {
        const double u = uniform_pos(g);
        return gamma(g, shape + 1.0, rate) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x, v;
        do {
            x = normal(g);
            v = 1.0 + c * x;
        } while (v <= 0.0);
        v = v * v * v;
        const double u = uniform_pos(g);
        if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) {
            return d * v / rate;
        }
    }
}

/// Poisson(lambda): Knuth product method below 30, PTRS (Hoermann 1993)
/// transformed rejection above.
inline long poisson(Engine& g, double lambda) {
    if (lambda <= 0.0) return 0;
    if (lambda < 30.0) {
        const double limit = std::exp(-lambda);
        double prod = uniform_pos(g);
        long k = 0;
        while (prod > limit) {
            prod *= uniform_pos(g);
            ++k;
        }
        return k;
    }
    const double b = 0.931 + 2.53 * std::sqrt(lambda);
    const double a = -0.059 + 0.02483 * b;
    const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    const double v_r = 0.9277 - 3.6224 / (b - 2.0);
    const double log_lambda = std::log(lambda);
    for (;;) {
        const double u = uniform(g) - 0.5;
        const double v = uniform_pos(g);
        const double us = 0.5 - std::fabs(u);
        const double kf = std::floor((2.0 * a / us + b) * u + lambda + 0.43);
        if (us >= 0.07 && v <= v_r) return static_cast<long>(kf);
        if (kf < 0.0 || (us < 0.013 && v > us)) continue;
        const double lhs = std::log(v * inv_alpha / (a / (us * us) + b));
        const double rhs = kf * log_lambda - lambda - std::lgamma(kf + 1.0);
        if (lhs <= rhs) return static_cast<long>(kf);
    }
}

/// Fisher-Yates shuffle of 0..n-1.
inline std::vector<std::size_t> permutation(Engine& g, std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(g() % i);
        std::swap(p[i - 1], p[j]);
    }
    return p;
}

/// Uniform integer in [0, n).
inline std::size_t uniform_index(Engine& g, std::size_t n) {
    return static_cast<std::size_t>(g() % n);
}

inline std::string serialize(const Engine& g) {
    std::ostringstream os;
    os << g;
    return os.str();
}

inline Engine deserialize(const std::string& s) {
    Engine g;
    std::istringstream is(s);
    is >> g;
    return g;
}

} // namespace scgplvm::rng
