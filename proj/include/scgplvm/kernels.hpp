#pragma once

#include "scgplvm/core.hpp"

#include <Eigen/Cholesky>

#include <string>
#include <vector>

/// @file kernels.hpp
/// Kernel functions, composite kernels with covariate correction, mean
/// functions and Gram-matrix assembly with escalating jitter.
///
/// Composite forms:
///   SEARD_plus_Linear    k(x,x') = sigma_f^2 exp(-sum_q (x_q-x'_q)^2 / (2 l_q^2)) + nu <phi, phi'>
///   PerSEARD_plus_Linear k(x,x') = sigma_f^2 * per(x_1,x'_1) * se(x,x') + nu <phi, phi'>
///                        per(a,b) = exp(-2 sin^2(|a-b|/2) / l_1^2)
///   AugmentedLinear      k(x,x') = nu <[x;phi], [x';phi']>
/// sigma_f^2 multiplies the periodic product exactly once.

namespace scgplvm::kernel {

enum class KernelForm { SEARD_plus_Linear, PerSEARD_plus_Linear, AugmentedLinear };

inline std::string to_string(KernelForm f) {
    switch (f) {
        case KernelForm::SEARD_plus_Linear: return "seard_plus_linear";
        case KernelForm::PerSEARD_plus_Linear: return "perseard_plus_linear";
        case KernelForm::AugmentedLinear: return "augmented_linear";
    }
    return "?";
}

struct KernelSpec {
    KernelForm form = KernelForm::SEARD_plus_Linear;
    int q_latent = 10;
    int d_covar = 1;
    /// Eq-as-written sums the SE factor over all Q dims including the
    /// periodic one; set to exclude dimension 1 from the SE factor.
    bool se_excludes_periodic_dim = false;

    bool is_periodic() const { return form == KernelForm::PerSEARD_plus_Linear; }
    bool is_augmented_linear() const { return form == KernelForm::AugmentedLinear; }
};

/// Hyperparameters theta = {sigma_f^2, {l_q}, nu, l_1, mu_f, zeta_d}
/// (plus linear means w_d for the AugmentedLinear form). All stored in
/// constrained (positive) form; the trainer owns the softplus raws.
struct KernelParams {
    double sigma_f2 = 1.0;
    Vec lengthscales;              // Q
    double nu = 0.1;
    double period_lengthscale = 1.0;
    double mu_f = 0.0;
    Mat zeta;                      // D x D_covar
    Mat w;                         // D x (Q + D_covar); AugmentedLinear only

    void validate(const KernelSpec& spec) const {
        if (sigma_f2 <= 0.0 || nu < 0.0 || period_lengthscale <= 0.0)
            throw DomainError("kernel variance/lengthscale parameters must be positive");
        if (lengthscales.size() != spec.q_latent)
            throw ShapeMismatch("lengthscale count != Q");
        if ((lengthscales.array() <= 0.0).any())
            throw DomainError("lengthscales must be positive");
        if (zeta.size() > 0 && zeta.cols() != spec.d_covar)
            throw ShapeMismatch("zeta column count != D_covar");
    }
};

// ---------------------------------------------------------------------------
// Scalar kernels
// ---------------------------------------------------------------------------

namespace detail {

/// SE-ARD exponential factor without the sigma_f^2 coefficient.
inline double se_factor(const Vec& x, const Vec& x2, const KernelParams& p, bool skip_dim1) {
    double s = 0.0;
    for (Eigen::Index q = skip_dim1 ? 1 : 0; q < x.size(); ++q) {
        const double dq = (x[q] - x2[q]) / p.lengthscales[q];
        s += dq * dq;
    }
    return std::exp(-0.5 * s);
}

} // namespace detail

/// sigma_f^2 * exp(-sum_q (x_q - x'_q)^2 / (2 l_q^2))
inline double k_se_ard(const Vec& x, const Vec& x2, const KernelParams& p) {
    if (x.size() != x2.size() || x.size() != p.lengthscales.size())
        throw ShapeMismatch("k_se_ard: dimension mismatch");
    return p.sigma_f2 * detail::se_factor(x, x2, p, false);
}

struct SEARDGrad {
    double d_sigma_f2;
    Vec d_lengthscales;
    Vec d_x, d_x2;
};

inline SEARDGrad k_se_ard_grad(const Vec& x, const Vec& x2, const KernelParams& p) {
    const double k = k_se_ard(x, x2, p);
    SEARDGrad g;
    g.d_sigma_f2 = k / p.sigma_f2;
    g.d_lengthscales.resize(x.size());
    g.d_x.resize(x.size());
    g.d_x2.resize(x.size());
    for (Eigen::Index q = 0; q < x.size(); ++q) {
        const double l = p.lengthscales[q];
        const double dq = x[q] - x2[q];
        g.d_lengthscales[q] = k * dq * dq / (l * l * l);
        g.d_x[q] = -k * dq / (l * l);
        g.d_x2[q] = -g.d_x[q];
    }
    return g;
}

/// nu * <phi_i, phi_j>: nu if same batch, 0 otherwise (one-hot rows).
inline double k_linear_covariates(const Vec& phi_i, const Vec& phi_j, const KernelParams& p) {
    if (phi_i.size() != phi_j.size())
        throw ShapeMismatch("k_linear_covariates: dimension mismatch");
    return p.nu * phi_i.dot(phi_j);
}

inline double k_linear_covariates_dnu(const Vec& phi_i, const Vec& phi_j) {
    return phi_i.dot(phi_j);
}

/// exp(-2 sin^2(|x1 - x1'|/2) / l_1^2); value in (0, 1].
inline double k_periodic(double x1, double x1b, const KernelParams& p) {
    const double s = std::sin(0.5 * std::abs(x1 - x1b));
    const double l = p.period_lengthscale;
    return std::exp(-2.0 * s * s / (l * l));
}

struct PeriodicGrad {
    double d_period_lengthscale;
    double d_x1, d_x1b;
};

inline PeriodicGrad k_periodic_grad(double x1, double x1b, const KernelParams& p) {
    const double k = k_periodic(x1, x1b, p);
    const double l = p.period_lengthscale;
    const double delta = x1 - x1b;
    const double s = std::sin(0.5 * delta);
    PeriodicGrad g;
    g.d_period_lengthscale = k * 4.0 * s * s / (l * l * l);
    // d/d delta of -2 sin^2(delta/2)/l^2 = -sin(delta)/l^2
    g.d_x1 = -k * std::sin(delta) / (l * l);
    g.d_x1b = -g.d_x1;
    return g;
}

/// nu * <xt_i, xt_j> on augmented vectors [x; phi].
inline double k_augmented_linear(const Vec& xt_i, const Vec& xt_j, const KernelParams& p) {
    if (xt_i.size() != xt_j.size())
        throw ShapeMismatch("k_augmented_linear: dimension mismatch");
    return p.nu * xt_i.dot(xt_j);
}

// ---------------------------------------------------------------------------
// Gram assembly
// ---------------------------------------------------------------------------

namespace detail {

inline void check_gram_shapes(const KernelSpec& spec, const Mat& X, const Mat& PhiA,
                              const Mat& X2, const Mat& PhiB) {
    if (X.cols() != spec.q_latent || X2.cols() != spec.q_latent)
        throw ShapeMismatch("gram: latent dimension != Q");
    if (PhiA.cols() != spec.d_covar || PhiB.cols() != spec.d_covar)
        throw ShapeMismatch("gram: covariate dimension != D_covar");
    if (PhiA.rows() != X.rows() || PhiB.rows() != X2.rows())
        throw ShapeMismatch("gram: covariate rows != latent rows");
}

/// Pairwise scaled squared distances: out(i,j) = sum_q ((X(i,q)-X2(j,q))/l_q)^2.
inline Mat scaled_sqdist(const Mat& X, const Mat& X2, const Vec& ls, bool skip_dim1) {
    const Eigen::Index q0 = skip_dim1 ? 1 : 0;
    const Eigen::Index q = X.cols();
    Mat xs(X.rows(), q - q0), ys(X2.rows(), q - q0);
    for (Eigen::Index c = q0; c < q; ++c) {
        xs.col(c - q0) = X.col(c) / ls[c];
        ys.col(c - q0) = X2.col(c) / ls[c];
    }
    Mat out = -2.0 * xs * ys.transpose();
    out.colwise() += xs.rowwise().squaredNorm();
    out.rowwise() += ys.rowwise().squaredNorm().transpose();
    return out.cwiseMax(0.0);
}

} // namespace detail

/// Full composite Gram block between (X, PhiA) and (X2, PhiB).
inline Mat gram(const KernelSpec& spec, const KernelParams& p, const Mat& X, const Mat& PhiA,
                const Mat& X2, const Mat& PhiB) {
    detail::check_gram_shapes(spec, X, PhiA, X2, PhiB);
    switch (spec.form) {
        case KernelForm::SEARD_plus_Linear: {
            Mat k = (-0.5 * detail::scaled_sqdist(X, X2, p.lengthscales, false).array()).exp().matrix() * p.sigma_f2;
            k.noalias() += p.nu * PhiA * PhiB.transpose();
            return k;
        }
        case KernelForm::PerSEARD_plus_Linear: {
            Mat k = (-0.5 * detail::scaled_sqdist(X, X2, p.lengthscales, spec.se_excludes_periodic_dim).array())
                        .exp()
                        .matrix();
            const double il2 = 1.0 / (p.period_lengthscale * p.period_lengthscale);
            for (Eigen::Index i = 0; i < X.rows(); ++i)
                for (Eigen::Index j = 0; j < X2.rows(); ++j) {
                    // fabs keeps gram(X,X) bit-exactly symmetric
                    const double s = std::sin(0.5 * std::fabs(X(i, 0) - X2(j, 0)));
                    k(i, j) *= p.sigma_f2 * std::exp(-2.0 * s * s * il2);
                }
            k.noalias() += p.nu * PhiA * PhiB.transpose();
            return k;
        }
        case KernelForm::AugmentedLinear: {
            Mat k = p.nu * (X * X2.transpose());
            k.noalias() += p.nu * PhiA * PhiB.transpose();
            return k;
        }
    }
    throw DomainError("unknown kernel form");
}

/// Diagonal k((x,phi),(x,phi)) for rows of (X, Phi).
inline Vec gram_diag(const KernelSpec& spec, const KernelParams& p, const Mat& X, const Mat& Phi) {
    detail::check_gram_shapes(spec, X, Phi, X, Phi);
    Vec d(X.rows());
    if (spec.is_augmented_linear()) {
        d = p.nu * (X.rowwise().squaredNorm() + Phi.rowwise().squaredNorm());
    } else {
        d = p.sigma_f2 + (p.nu * Phi.rowwise().squaredNorm()).array();
    }
    return d;
}

/// Prior mean of f_d at rows (X, Phi):
///   mu_f + Phi zeta_d                  (SE-ARD / PerSE-ARD forms)
///   mu_f + [X Phi] w_d                 (AugmentedLinear)
inline Vec mean_function(const KernelSpec& spec, const KernelParams& p, const Mat& X,
                         const Mat& Phi, Eigen::Index d) {
    if (spec.is_augmented_linear()) {
        if (d < 0 || d >= p.w.rows()) throw IndexOutOfRange("mean_function: gene index out of range");
        Vec m = Vec::Constant(X.rows(), p.mu_f);
        m.noalias() += X * p.w.row(d).head(spec.q_latent).transpose();
        m.noalias() += Phi * p.w.row(d).tail(spec.d_covar).transpose();
        return m;
    }
    if (d < 0 || d >= p.zeta.rows()) throw IndexOutOfRange("mean_function: gene index out of range");
    Vec m = Vec::Constant(X.rows(), p.mu_f);
    m.noalias() += Phi * p.zeta.row(d).transpose();
    return m;
}

// ---------------------------------------------------------------------------
// Cholesky with escalating jitter
// ---------------------------------------------------------------------------

struct CholResult {
    Mat L;          // lower-triangular factor of K + jitter*I
    double jitter;  // jitter actually added
    int level;      // 0 = first level
};

/// Cholesky of K + jitter*I, escalating jitter from 1e-6*mean(diag) by x10
/// up to 1e-2*mean(diag). Throws NotPositiveDefinite past the last level.
inline CholResult jittered_cholesky(const Mat& K) {
    const Eigen::Index m = K.rows();
    if (K.cols() != m) throw ShapeMismatch("jittered_cholesky: matrix not square");
    const double scale = std::max(K.cwiseAbs().maxCoeff(), 1.0);
    if ((K - K.transpose()).cwiseAbs().maxCoeff() > 1e-8 * scale)
        throw DomainError("jittered_cholesky: matrix not symmetric");
    const double base = std::max(K.diagonal().mean(), 0.0);
    double jitter = 1e-6 * base;
    for (int level = 0; level < 5; ++level, jitter *= 10.0) {
        Mat kj = 0.5 * (K + K.transpose());
        kj.diagonal().array() += jitter;
        Eigen::LLT<Mat> llt(kj);
        if (llt.info() == Eigen::Success) {
            // LLT can report success on a barely-indefinite matrix; reject
            // factors with non-positive or non-finite pivots.
            Mat L = llt.matrixL();
            if ((L.diagonal().array() > 0.0).all() && L.diagonal().allFinite())
                return {std::move(L), jitter, level};
        }
    }
    throw NotPositiveDefinite("jittered_cholesky: not positive definite after max jitter");
}

} // namespace scgplvm::kernel
