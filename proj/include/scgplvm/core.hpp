#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

/// @file core.hpp
/// Shared aliases, error types, small math helpers and the thread pool
/// used by the Gram/ELBO inner loops.

namespace scgplvm {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using IMat = Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic>;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ParseError : Error { using Error::Error; };
struct ShapeMismatch : Error { using Error::Error; };
struct EmptyResult : Error { using Error::Error; };
struct ZeroRow : Error { using Error::Error; };
struct DomainError : Error { using Error::Error; };
struct PipelineMismatch : Error { using Error::Error; };
struct NotPositiveDefinite : Error { using Error::Error; };
struct NonFiniteLoss : Error { using Error::Error; };
struct LengthMismatch : Error { using Error::Error; };
struct SingleClass : Error { using Error::Error; };
struct IndexOutOfRange : Error { using Error::Error; };
struct UnknownPreset : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };

// ---------------------------------------------------------------------------
// Scalar helpers
// ---------------------------------------------------------------------------

/// softplus(x) = log(1 + e^x), overflow-safe.
inline double softplus(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

/// d/dx softplus(x) = sigmoid(x).
inline double sigmoid(double x) {
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// Inverse of softplus; softplus(softplus_inv(y)) == y for y > 0.
inline double softplus_inv(double y) {
    if (y > 30.0) return y;
    return std::log(std::expm1(y));
}

inline double logsumexp(const Vec& v) {
    const double m = v.maxCoeff();
    if (!std::isfinite(m)) return m;
    return m + std::log((v.array() - m).exp().sum());
}

inline double square(double x) { return x * x; }

// ---------------------------------------------------------------------------
// Threading
// ---------------------------------------------------------------------------

namespace threading {

inline int& thread_count_ref() {
    static int n = static_cast<int>(std::thread::hardware_concurrency());
    return n;
}

inline void set_thread_count(int n) { thread_count_ref() = n > 0 ? n : 1; }
inline int thread_count() { return thread_count_ref() < 1 ? 1 : thread_count_ref(); }

/// Static range split: fn(begin, end, chunk_index) over [0, n).
/// Chunk boundaries depend only on (n, threads), so any per-chunk
/// accumulators can be reduced in chunk order for reproducible sums.
template <typename F>
void parallel_chunks(std::size_t n, F&& fn) {
    const int t = thread_count();
    if (n == 0) return;
    if (t <= 1 || n == 1) {
        fn(std::size_t{0}, n, 0);
        return;
    }
    const std::size_t nchunks = std::min<std::size_t>(static_cast<std::size_t>(t), n);
    const std::size_t base = n / nchunks, rem = n % nchunks;
    std::vector<std::thread> pool;
    pool.reserve(nchunks);
    std::size_t begin = 0;
    for (std::size_t c = 0; c < nchunks; ++c) {
        const std::size_t len = base + (c < rem ? 1 : 0);
        const std::size_t end = begin + len;
        pool.emplace_back([&fn, begin, end, c] { fn(begin, end, c); });
        begin = end;
    }
    for (auto& th : pool) th.join();
}

/// Number of chunks parallel_chunks will use for a loop of length n.
inline std::size_t chunk_count(std::size_t n) {
    const int t = thread_count();
    if (n == 0) return 0;
    if (t <= 1 || n == 1) return 1;
    return std::min<std::size_t>(static_cast<std::size_t>(t), n);
}

} // namespace threading

} // namespace scgplvm
