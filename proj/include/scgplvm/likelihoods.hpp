#pragma once

#include "scgplvm/core.hpp"
#include "scgplvm/rng.hpp"

#include <array>
#include <cmath>
#include <string>

/// @file likelihoods.hpp
/// Observation models mapping latent function values to data rows:
/// Gaussian on log-processed values, and negative binomial (mean /
/// inverse-dispersion parameterization) with a softmax link for counts.
/// ApproxPoisson is NB with fixed scale l = 5000 and r = 1e6, evaluated on
/// rows library-normalized to l; NBLearnedScale swaps the fixed scale for
/// a learned per-cell log-scale on raw counts.

namespace scgplvm::lik {

enum class LikelihoodForm { Gaussian, ApproxPoisson, NBLearnedScale };

inline std::string to_string(LikelihoodForm f) {
    switch (f) {
        case LikelihoodForm::Gaussian: return "gaussian";
        case LikelihoodForm::ApproxPoisson: return "approx_poisson";
        case LikelihoodForm::NBLearnedScale: return "nb_learned_scale";
    }
    return "?";
}

struct LikelihoodSpec {
    LikelihoodForm form = LikelihoodForm::ApproxPoisson;
    double sigma_y2 = 1.0;        // Gaussian noise variance
    double nb_scale = 5000.0;     // fixed scale l (ApproxPoisson)
    double nb_dispersion = 1e6;   // inverse dispersion r

    void validate() const {
        if (sigma_y2 <= 0.0) throw DomainError("sigma_y2 must be > 0");
        if (nb_scale <= 0.0) throw DomainError("nb_scale must be > 0");
        if (nb_dispersion <= 0.0) throw DomainError("nb_dispersion must be > 0");
    }
};

/// What representation a data row is in; checked against the likelihood.
enum class ObsTag { LibraryNormalized, LogGaussian, RawCounts };

// ---------------------------------------------------------------------------
// Negative binomial pmf
// ---------------------------------------------------------------------------

/// y-dependent constant: lgamma(y+r) - lgamma(r) - lgamma(y+1).
/// Generalized to real y >= 0 (library-normalized rows are not integral).
inline double nb_logpmf_const(double y, double r) {
    return std::lgamma(y + r) - std::lgamma(r) - std::lgamma(y + 1.0);
}

/// mu-dependent part: r log(r/(r+mu)) + y log(mu/(r+mu)), via log1p so the
/// large-r (Poisson) regime keeps full precision.
inline double nb_logpmf_mu_part(double y, double mu, double r) {
    const double l1p = std::log1p(mu / r);
    return -r * l1p + y * (std::log(mu) - std::log(r) - l1p);
}

/// log NB(y | mean mu, inverse dispersion r).
inline double nb_logpmf(double y, double mu, double r) {
    if (mu <= 0.0) throw DomainError("nb_logpmf: mu must be > 0");
    if (r <= 0.0) throw DomainError("nb_logpmf: r must be > 0");
    if (y < 0.0) throw DomainError("nb_logpmf: y must be >= 0");
    if (y == 0.0) return -r * std::log1p(mu / r);
    return nb_logpmf_const(y, r) + nb_logpmf_mu_part(y, mu, r);
}

/// d/dmu log NB(y | mu, r) = y/mu - (y+r)/(r+mu).
inline double nb_logpmf_dmu(double y, double mu, double r) {
    return y / mu - (y + r) / (r + mu);
}

inline double poisson_logpmf(double y, double mu) {
    if (mu <= 0.0) throw DomainError("poisson_logpmf: mu must be > 0");
    return y * std::log(mu) - mu - std::lgamma(y + 1.0);
}

/// Draw from NB(mu, r) via the Gamma-Poisson mixture
/// w ~ Gamma(r, r/mu), y ~ Poisson(w).
inline long nb_sample(rng::Engine& g, double mu, double r) {
    const double w = rng::gamma(g, r, r / mu);
    return rng::poisson(g, w);
}

// ---------------------------------------------------------------------------
// Softmax link
// ---------------------------------------------------------------------------

/// scale * softmax(f): strictly positive means summing to `scale`.
inline Vec softmax_link(const Vec& f_row, double scale) {
    const double lse = logsumexp(f_row);
    return scale * (f_row.array() - lse).exp();
}

// ---------------------------------------------------------------------------
// Row log-likelihoods
// ---------------------------------------------------------------------------

namespace detail {

inline void check_tag(const LikelihoodSpec& spec, ObsTag tag) {
    switch (spec.form) {
        case LikelihoodForm::Gaussian:
            if (tag != ObsTag::LogGaussian)
                throw PipelineMismatch("Gaussian likelihood expects LogGaussian rows");
            return;
        case LikelihoodForm::ApproxPoisson:
            if (tag != ObsTag::LibraryNormalized)
                throw PipelineMismatch("ApproxPoisson expects library-normalized rows");
            return;
        case LikelihoodForm::NBLearnedScale:
            if (tag != ObsTag::RawCounts)
                throw PipelineMismatch("NBLearnedScale expects raw count rows");
            return;
    }
}

} // namespace detail

/// Throws PipelineMismatch when a row representation contradicts the
/// likelihood's expected preprocessing.
inline void check_pipeline(const LikelihoodSpec& spec, ObsTag tag) { detail::check_tag(spec, tag); }

/// Sum over genes of the per-gene log density of y_row given f_row.
/// `log_scale_n` is the learned per-cell log scale (NBLearnedScale only).
inline double loglik_row(const LikelihoodSpec& spec, const Vec& y_row, const Vec& f_row,
                         ObsTag tag, double log_scale_n = 0.0) {
    if (y_row.size() != f_row.size()) throw ShapeMismatch("loglik_row: y/f length mismatch");
    detail::check_tag(spec, tag);
    const Eigen::Index d = y_row.size();
    if (spec.form == LikelihoodForm::Gaussian) {
        const double s2 = spec.sigma_y2;
        double ll = -0.5 * static_cast<double>(d) * std::log(2.0 * M_PI * s2);
        ll -= (y_row - f_row).squaredNorm() / (2.0 * s2);
        return ll;
    }
    const double scale = spec.form == LikelihoodForm::ApproxPoisson ? spec.nb_scale : std::exp(log_scale_n);
    const Vec mu = softmax_link(f_row, scale);
    double ll = 0.0;
    for (Eigen::Index j = 0; j < d; ++j)
        ll += nb_logpmf(y_row[j], mu[j], spec.nb_dispersion);
    return ll;
}

struct LoglikRowGrad {
    double value = 0.0;
    Vec d_f;                   // d loglik / d f_row
    double d_sigma_y2 = 0.0;   // Gaussian only
    double d_log_scale = 0.0;  // NBLearnedScale only
};

inline LoglikRowGrad loglik_row_grad(const LikelihoodSpec& spec, const Vec& y_row,
                                     const Vec& f_row, ObsTag tag, double log_scale_n = 0.0) {
    if (y_row.size() != f_row.size()) throw ShapeMismatch("loglik_row: y/f length mismatch");
    detail::check_tag(spec, tag);
    const Eigen::Index d = y_row.size();
    LoglikRowGrad g;
    g.d_f.resize(d);
    if (spec.form == LikelihoodForm::Gaussian) {
        const double s2 = spec.sigma_y2;
        const Vec res = y_row - f_row;
        g.value = -0.5 * static_cast<double>(d) * std::log(2.0 * M_PI * s2) - res.squaredNorm() / (2.0 * s2);
        g.d_f = res / s2;
        g.d_sigma_y2 = -0.5 * static_cast<double>(d) / s2 + res.squaredNorm() / (2.0 * s2 * s2);
        return g;
    }
    const double r = spec.nb_dispersion;
    const double scale = spec.form == LikelihoodForm::ApproxPoisson ? spec.nb_scale : std::exp(log_scale_n);
    const Vec mu = softmax_link(f_row, scale);
    const Vec p = mu / scale;
    double tsum = 0.0;
    Vec t(d);
    for (Eigen::Index j = 0; j < d; ++j) {
        g.value += nb_logpmf(y_row[j], mu[j], r);
        t[j] = nb_logpmf_dmu(y_row[j], mu[j], r) * mu[j];
        tsum += t[j];
    }
    g.d_f = t - tsum * p;
    if (spec.form == LikelihoodForm::NBLearnedScale) g.d_log_scale = tsum;
    return g;
}

// ---------------------------------------------------------------------------
// NB -> Poisson limit diagnostics
// ---------------------------------------------------------------------------

struct PoissonLimitReport {
    std::array<double, 3> r_grid{1e2, 1e4, 1e6};
    std::array<double, 3> deviations{};
    double max_deviation = 0.0;
    bool monotone_decreasing = false;
};

/// |nb_logpmf(y, mu, r) - poisson_logpmf(y, mu)| over r in {1e2, 1e4, 1e6}.
inline PoissonLimitReport nb_poisson_limit_check(double mu, long y) {
    if (mu <= 0.0) throw DomainError("nb_poisson_limit_check: mu must be > 0");
    PoissonLimitReport rep;
    const double pl = poisson_logpmf(static_cast<double>(y), mu);
    for (std::size_t i = 0; i < rep.r_grid.size(); ++i)
        rep.deviations[i] = std::abs(nb_logpmf(static_cast<double>(y), mu, rep.r_grid[i]) - pl);
    rep.max_deviation = std::max({rep.deviations[0], rep.deviations[1], rep.deviations[2]});
    rep.monotone_decreasing =
        rep.deviations[0] > rep.deviations[1] && rep.deviations[1] > rep.deviations[2];
    return rep;
}

} // namespace scgplvm::lik
