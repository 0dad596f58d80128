#pragma once

#include "scgplvm/core.hpp"
#include "scgplvm/encoder.hpp"
#include "scgplvm/kernels.hpp"
#include "scgplvm/likelihoods.hpp"
#include "scgplvm/rng.hpp"

#include <vector>

/// @file svgp.hpp
/// Sparse variational GP decoder: inducing-point posterior, per-point
/// marginals q(f), closed-form KL terms and the doubly-stochastic
/// mini-batch ELBO
///
///   L = (N/B) sum_n E_q [log p(y_n | f_n)] - (N/B) sum_n KL(q(x_n)||p(x_n))
///       - sum_d KL(q(u_d)||p(u_d|Z))
///
/// with x ~ q(x_n) and f_nd ~ q(f_d | x) both reparameterized. elbo_grad
/// produces exact reverse-mode gradients of the same stochastic estimate
/// (identical rng draws) for every trainable parameter.
///
/// Positivity is handled by softplus on unconstrained storage; pseudo
/// covariate rows for inducing points live on the simplex via a rowwise
/// softmax of unconstrained logits.

namespace scgplvm::svgp {

// ---------------------------------------------------------------------------
// Unconstrained parameter storage
// ---------------------------------------------------------------------------

struct RawKernelParams {
    double sigma_f2_raw = 0.0;
    Vec lengthscales_raw; // Q
    double nu_raw = 0.0;
    double period_raw = 0.0;
    double mu_f = 0.0;
    Mat zeta; // D x D_covar (SE forms)
    Mat w;    // D x (Q + D_covar) (AugmentedLinear)
};

inline kernel::KernelParams make_kernel_params(const kernel::KernelSpec& spec,
                                               const RawKernelParams& raw) {
    kernel::KernelParams p;
    p.sigma_f2 = softplus(raw.sigma_f2_raw);
    p.lengthscales = raw.lengthscales_raw.unaryExpr([](double v) { return softplus(v); });
    p.nu = softplus(raw.nu_raw);
    p.period_lengthscale = softplus(raw.period_raw);
    p.mu_f = raw.mu_f;
    p.zeta = raw.zeta;
    p.w = raw.w;
    p.validate(spec);
    return p;
}

/// Inducing locations Z, simplex pseudo-covariates, and per-gene
/// variational moments (m_d, S_d) with S_d = L L^T by construction.
struct InducingState {
    Mat Z;                  // M x Q
    Mat rho;                // M x D_covar, unconstrained; pseudo_phi = softmax(rows)
    Mat m;                  // M x D (column d = m_d)
    std::vector<Mat> S_raw; // D matrices M x M; lower triangle used, diag softplus'd

    Eigen::Index m_inducing() const { return Z.rows(); }

    Mat pseudo_phi() const {
        Mat p(rho.rows(), rho.cols());
        for (Eigen::Index i = 0; i < rho.rows(); ++i) {
            const Vec r = rho.row(i).transpose();
            const double lse = logsumexp(r);
            p.row(i) = (r.array() - lse).exp().transpose();
        }
        return p;
    }

    /// Materialized lower Cholesky factor of S_d.
    Mat S_chol(Eigen::Index d) const {
        const Mat& raw = S_raw.at(static_cast<std::size_t>(d));
        Mat l = raw.triangularView<Eigen::StrictlyLower>();
        for (Eigen::Index i = 0; i < raw.rows(); ++i) l(i, i) = softplus(raw(i, i)) + 1e-12;
        return l;
    }
};

/// Everything the decoder + variational family needs, all in one place.
struct ModelState {
    kernel::KernelSpec kspec;
    RawKernelParams kraw;
    lik::LikelihoodSpec lspec; // sigma_y2 field is ignored; see sigma_y2_raw
    double sigma_y2_raw = 0.0; // Gaussian noise variance (softplus domain)
    Vec log_scale;             // N learned per-cell log scales (NBLearnedScale)
    enc::EncoderSpec espec;
    enc::EncoderParams eparams;
    InducingState ind;
    int q_latent = 0;
    int n_genes = 0;
    rng::Engine sampler;

    kernel::KernelParams kernel_params() const { return make_kernel_params(kspec, kraw); }

    lik::LikelihoodSpec likelihood() const {
        lik::LikelihoodSpec l = lspec;
        l.sigma_y2 = softplus(sigma_y2_raw);
        return l;
    }
};

/// Gradient holder; mirrors the trainable parts of ModelState.
struct ModelGrads {
    RawKernelParams kraw;
    InducingState ind;
    enc::EncoderParams eparams;
    double sigma_y2_raw = 0.0;
    Vec log_scale;
};

inline ModelGrads zero_grads(const ModelState& s) {
    ModelGrads g;
    g.kraw = s.kraw;
    g.kraw.sigma_f2_raw = 0.0;
    g.kraw.lengthscales_raw.setZero();
    g.kraw.nu_raw = 0.0;
    g.kraw.period_raw = 0.0;
    g.kraw.mu_f = 0.0;
    g.kraw.zeta.setZero();
    g.kraw.w.setZero();
    g.ind.Z = Mat::Zero(s.ind.Z.rows(), s.ind.Z.cols());
    g.ind.rho = Mat::Zero(s.ind.rho.rows(), s.ind.rho.cols());
    g.ind.m = Mat::Zero(s.ind.m.rows(), s.ind.m.cols());
    g.ind.S_raw.assign(s.ind.S_raw.size(), Mat::Zero(s.ind.Z.rows(), s.ind.Z.rows()));
    g.eparams = enc::zero_like(s.eparams);
    g.sigma_y2_raw = 0.0;
    g.log_scale = Vec::Zero(s.log_scale.size());
    return g;
}

// ---------------------------------------------------------------------------
// Trainable-parameter visitation
// ---------------------------------------------------------------------------

enum class Group : int {
    kernel_sigma_f2 = 0,
    kernel_lengthscales,
    kernel_nu,
    kernel_period,
    kernel_mu_f,
    kernel_zeta,
    kernel_w,
    inducing_Z,
    inducing_rho,
    variational_m,
    variational_S,
    encoder,
    lik_sigma_y2,
    lik_log_scale,
    count_
};

inline const char* group_name(Group g) {
    static const char* names[] = {"kernel.sigma_f2", "kernel.lengthscales", "kernel.nu",
                                  "kernel.period",   "kernel.mu_f",         "kernel.zeta",
                                  "kernel.w",        "inducing.Z",          "inducing.rho",
                                  "variational.m",   "variational.S",       "encoder",
                                  "likelihood.sigma_y2", "likelihood.log_scale"};
    return names[static_cast<int>(g)];
}

/// Visits every trainable scalar in a fixed order; works on ModelState and
/// ModelGrads fields alike so the two orders stay aligned.
template <typename F>
inline void visit_trainables(const kernel::KernelSpec& kspec, lik::LikelihoodForm lform,
                             RawKernelParams& kraw, InducingState& ind,
                             enc::EncoderParams& eparams, double& sigma_y2_raw, Vec& log_scale,
                             F&& fn) {
    const bool auglin = kspec.is_augmented_linear();
    fn(Group::kernel_sigma_f2, &kraw.sigma_f2_raw);
    for (Eigen::Index i = 0; i < kraw.lengthscales_raw.size(); ++i)
        fn(Group::kernel_lengthscales, kraw.lengthscales_raw.data() + i);
    fn(Group::kernel_nu, &kraw.nu_raw);
    if (kspec.is_periodic()) fn(Group::kernel_period, &kraw.period_raw);
    fn(Group::kernel_mu_f, &kraw.mu_f);
    if (!auglin) {
        for (Eigen::Index i = 0; i < kraw.zeta.size(); ++i) fn(Group::kernel_zeta, kraw.zeta.data() + i);
    } else {
        for (Eigen::Index i = 0; i < kraw.w.size(); ++i) fn(Group::kernel_w, kraw.w.data() + i);
    }
    for (Eigen::Index i = 0; i < ind.Z.size(); ++i) fn(Group::inducing_Z, ind.Z.data() + i);
    for (Eigen::Index i = 0; i < ind.rho.size(); ++i) fn(Group::inducing_rho, ind.rho.data() + i);
    for (Eigen::Index i = 0; i < ind.m.size(); ++i) fn(Group::variational_m, ind.m.data() + i);
    for (auto& s : ind.S_raw)
        for (Eigen::Index j = 0; j < s.cols(); ++j)
            for (Eigen::Index i = j; i < s.rows(); ++i) fn(Group::variational_S, &s(i, j));
    enc::visit_encoder_params(eparams, [&fn](const std::string&, double* p) { fn(Group::encoder, p); });
    if (lform == lik::LikelihoodForm::Gaussian) fn(Group::lik_sigma_y2, &sigma_y2_raw);
    if (lform == lik::LikelihoodForm::NBLearnedScale)
        for (Eigen::Index i = 0; i < log_scale.size(); ++i) fn(Group::lik_log_scale, log_scale.data() + i);
}

template <typename F>
inline void visit_trainables(ModelState& s, F&& fn) {
    visit_trainables(s.kspec, s.lspec.form, s.kraw, s.ind, s.eparams, s.sigma_y2_raw, s.log_scale,
                     std::forward<F>(fn));
}

template <typename F>
inline void visit_trainables(const ModelState& shape, ModelGrads& g, F&& fn) {
    visit_trainables(shape.kspec, shape.lspec.form, g.kraw, g.ind, g.eparams, g.sigma_y2_raw,
                     g.log_scale, std::forward<F>(fn));
}

struct ParamIndex {
    std::vector<double*> ptr;
    std::vector<Group> group;
};

inline ParamIndex build_param_index(ModelState& s) {
    ParamIndex idx;
    visit_trainables(s, [&idx](Group g, double* p) {
        idx.group.push_back(g);
        idx.ptr.push_back(p);
    });
    return idx;
}

inline ParamIndex build_grad_index(const ModelState& shape, ModelGrads& g) {
    ParamIndex idx;
    visit_trainables(shape, g, [&idx](Group gr, double* p) {
        idx.group.push_back(gr);
        idx.ptr.push_back(p);
    });
    return idx;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

struct InitConfig {
    int m_inducing = 64;
    double s_init = 0.1;       // S_d = s_init * I
    double nu_init = 0.1;      // AugmentedLinear overrides to 1.0
    double lengthscale_init = 1.0;
};

/// Fresh model state; `row_sums` (length N) seeds the learned log scales.
inline ModelState init_model_state(const kernel::KernelSpec& kspec, const lik::LikelihoodSpec& lspec,
                                   const enc::EncoderSpec& espec, int n_genes, long n_cells,
                                   std::uint64_t seed, const Vec& row_sums = Vec(),
                                   const InitConfig& init = InitConfig()) {
    espec.validate();
    lspec.validate();
    ModelState s;
    s.kspec = kspec;
    s.lspec = lspec;
    s.espec = espec;
    s.q_latent = kspec.q_latent;
    s.n_genes = n_genes;
    s.sampler = rng::Engine(seed);

    const int q = kspec.q_latent, dc = kspec.d_covar, m = init.m_inducing;
    s.kraw.sigma_f2_raw = softplus_inv(1.0);
    s.kraw.lengthscales_raw = Vec::Constant(q, softplus_inv(init.lengthscale_init));
    const double nu0 = kspec.is_augmented_linear() ? 1.0 : init.nu_init;
    s.kraw.nu_raw = softplus_inv(nu0);
    s.kraw.period_raw = softplus_inv(1.0);
    s.kraw.mu_f = 0.0;
    s.kraw.zeta = Mat::Zero(n_genes, dc);
    s.kraw.w = kspec.is_augmented_linear() ? Mat::Zero(n_genes, q + dc) : Mat();

    rng::Engine g(seed ^ 0x9e3779b97f4a7c15ULL);
    s.eparams = enc::init_encoder(espec, g);

    s.ind.Z.resize(m, q);
    for (Eigen::Index i = 0; i < s.ind.Z.size(); ++i) s.ind.Z.data()[i] = rng::normal(g);
    s.ind.rho = Mat::Zero(m, dc);
    // m_d starts at the prior mean at (Z, pseudo_phi) so KL(q(u)||p(u)) = 0
    const kernel::KernelParams kp = s.kernel_params();
    const Mat pphi = s.ind.pseudo_phi();
    s.ind.m.resize(m, n_genes);
    for (int d = 0; d < n_genes; ++d)
        s.ind.m.col(d) = kernel::mean_function(kspec, kp, s.ind.Z, pphi, d);
    const double raw_diag = softplus_inv(std::sqrt(init.s_init));
    Mat s0 = Mat::Constant(m, m, 0.0);
    s0.diagonal().setConstant(raw_diag);
    s.ind.S_raw.assign(static_cast<std::size_t>(n_genes), s0);

    s.sigma_y2_raw = softplus_inv(1.0);
    if (lspec.form == lik::LikelihoodForm::NBLearnedScale) {
        if (row_sums.size() != n_cells) throw ShapeMismatch("init: row_sums needed for NBLearnedScale");
        s.log_scale = row_sums.array().max(1.0).log();
    }
    return s;
}

// ---------------------------------------------------------------------------
// Posterior cache + single-point ops
// ---------------------------------------------------------------------------

struct PosteriorCache {
    kernel::KernelParams kp;
    Mat pphi;   // M x Dc
    Mat L;      // chol(K_MM + jitter I)
    double jitter = 0.0;
    Mat MuU;    // M x D prior means at inducing points
    Mat A;      // M x D columns a_d = K^-1 (m_d - mu_u,d)
};

inline PosteriorCache make_posterior_cache(const ModelState& s) {
    PosteriorCache c;
    c.kp = s.kernel_params();
    c.pphi = s.ind.pseudo_phi();
    const Mat kmm = kernel::gram(s.kspec, c.kp, s.ind.Z, c.pphi, s.ind.Z, c.pphi);
    auto chol = kernel::jittered_cholesky(kmm);
    c.L = std::move(chol.L);
    c.jitter = chol.jitter;
    c.MuU.resize(s.ind.m_inducing(), s.n_genes);
    for (int d = 0; d < s.n_genes; ++d)
        c.MuU.col(d) = kernel::mean_function(s.kspec, c.kp, s.ind.Z, c.pphi, d);
    const Mat r = s.ind.m - c.MuU;
    c.A = c.L.triangularView<Eigen::Lower>().solve(r);
    c.L.triangularView<Eigen::Lower>().transpose().solveInPlace(c.A);
    return c;
}

struct QfMoments {
    double mean = 0.0;
    double var = 0.0;
};

/// Marginal q(f_d(x)) under the inducing posterior:
///   mean = mu(x,d) + k_xM K^-1 (m_d - mu_u,d)
///   var  = k(x,x) - k_xM K^-1 k_Mx + k_xM K^-1 S_d K^-1 k_Mx
inline QfMoments q_f_marginal(const ModelState& s, const PosteriorCache& c, const Vec& x,
                              const Vec& phi, Eigen::Index d) {
    if (d < 0 || d >= s.n_genes) throw IndexOutOfRange("q_f_marginal: gene index");
    const Mat xr = x.transpose();
    const Mat pr = phi.transpose();
    const Mat kxm = kernel::gram(s.kspec, c.kp, xr, pr, s.ind.Z, c.pphi); // 1 x M
    const double kxx = kernel::gram_diag(s.kspec, c.kp, xr, pr)[0];

    QfMoments q;
    q.mean = kernel::mean_function(s.kspec, c.kp, xr, pr, d)[0] + kxm.row(0).dot(c.A.col(d));
    const Vec v = c.L.triangularView<Eigen::Lower>().solve(kxm.transpose());
    const Vec w = c.L.triangularView<Eigen::Lower>().transpose().solve(v);
    const Vec t = s.ind.S_chol(d).transpose() * w;
    q.var = std::max(kxx - v.squaredNorm() + t.squaredNorm(), 1e-10);
    return q;
}

inline QfMoments q_f_marginal(const ModelState& s, const Vec& x, const Vec& phi, Eigen::Index d) {
    return q_f_marginal(s, make_posterior_cache(s), x, phi, d);
}

/// KL(N(mean, diag(var)) || N(0, I)) for one cell.
inline double kl_qx(const Vec& mean, const Vec& var) {
    if ((var.array() <= 0.0).any()) throw DomainError("kl_qx: variance must be positive");
    return 0.5 * (var.sum() + mean.squaredNorm() - static_cast<double>(mean.size()) -
                  var.array().log().sum());
}

/// KL(q(u_d) || p(u_d | Z)) with prior mean mu_u = mean_function(Z, pseudo_phi).
inline double kl_qu(const ModelState& s, const PosteriorCache& c, Eigen::Index d) {
    if (d < 0 || d >= s.n_genes) throw IndexOutOfRange("kl_qu: gene index");
    const auto m = static_cast<double>(s.ind.m_inducing());
    const Mat ls = s.ind.S_chol(d);
    const Mat g = c.L.triangularView<Eigen::Lower>().solve(ls);
    const double trace = g.squaredNorm();
    const Vec r = s.ind.m.col(d) - c.MuU.col(d);
    const double quad = c.L.triangularView<Eigen::Lower>().solve(r).squaredNorm();
    const double logdet_k = 2.0 * c.L.diagonal().array().log().sum();
    const double logdet_s = 2.0 * ls.diagonal().array().log().sum();
    return 0.5 * (trace + quad - m + logdet_k - logdet_s);
}

inline double kl_qu(const ModelState& s, Eigen::Index d) {
    return kl_qu(s, make_posterior_cache(s), d);
}

// ---------------------------------------------------------------------------
// Mini-batch ELBO (value and exact gradients of the sampled estimate)
// ---------------------------------------------------------------------------

struct MiniBatch {
    Mat y;                         // B x D rows in the likelihood's representation
    Mat phi;                       // B x D_covar one-hots
    std::vector<long> cell_index;  // global cell ids (log_scale lookup)
    lik::ObsTag tag = lik::ObsTag::LibraryNormalized;
    const Mat* nb_const = nullptr; // optional B x D cache of nb_logpmf_const(y, r)
};

struct ElboParts {
    double ell = 0.0;
    double klx = 0.0;
    double klu = 0.0;
};

struct ElboResult {
    double elbo = 0.0;
    ElboParts parts;
    long fvar_floor_events = 0;
};

namespace detail {

/// Everything the fused kernel backward needs about constrained params.
struct KernelCtx {
    const kernel::KernelSpec& spec;
    const kernel::KernelParams& kp;
    // accumulators in constrained space; chained to raws at the end
    double d_sigma_f2 = 0.0;
    Vec d_lengthscales;
    double d_nu = 0.0;
    double d_period = 0.0;

    explicit KernelCtx(const kernel::KernelSpec& s, const kernel::KernelParams& p)
        : spec(s), kp(p), d_lengthscales(Vec::Zero(p.lengthscales.size())) {}
};

/// SE / periodic-SE cross-gram with the exponential parts retained for the
/// backward pass. For AugmentedLinear only `k` is filled.
struct CrossGram {
    Mat k;    // A x B composite kernel values
    Mat ese;  // exp(-1/2 sum (dx/l)^2) (SE forms)
    Mat per;  // periodic factor (PerSE only)
};

inline CrossGram cross_gram(const kernel::KernelSpec& spec, const kernel::KernelParams& kp,
                            const Mat& xa, const Mat& pa, const Mat& xb, const Mat& pb) {
    CrossGram g;
    if (spec.is_augmented_linear()) {
        g.k = kp.nu * (xa * xb.transpose() + pa * pb.transpose());
        return g;
    }
    g.ese = (-0.5 * kernel::detail::scaled_sqdist(xa, xb, kp.lengthscales,
                                                  spec.is_periodic() && spec.se_excludes_periodic_dim)
                        .array())
                .exp();
    if (spec.is_periodic()) {
        g.per.resize(xa.rows(), xb.rows());
        const double il2 = 1.0 / (kp.period_lengthscale * kp.period_lengthscale);
        for (Eigen::Index i = 0; i < xa.rows(); ++i)
            for (Eigen::Index j = 0; j < xb.rows(); ++j) {
                const double sn = std::sin(0.5 * std::fabs(xa(i, 0) - xb(j, 0)));
                g.per(i, j) = std::exp(-2.0 * sn * sn * il2);
            }
        g.k = kp.sigma_f2 * (g.per.array() * g.ese.array()).matrix();
    } else {
        g.k = kp.sigma_f2 * g.ese;
    }
    g.k.noalias() += kp.nu * pa * pb.transpose();
    return g;
}

/// Backward through one cross-gram block: kbar is A x B upstream gradient.
/// Accumulates into xa_bar/xb_bar (latent sides), pb_bar (pseudo-phi side;
/// pa is data and fixed unless pa_bar is supplied) and kernel params.
inline void cross_gram_backward(KernelCtx& ctx, const CrossGram& g, const Mat& kbar, const Mat& xa,
                                const Mat& pa, const Mat& xb, const Mat& pb, Mat* xa_bar,
                                Mat* xb_bar, Mat* pa_bar, Mat* pb_bar) {
    const auto& kp = ctx.kp;
    const auto& spec = ctx.spec;
    const Eigen::Index a = xa.rows(), b = xb.rows(), q = xa.cols();

    // linear covariate term: nu * pa pb^T
    ctx.d_nu += (kbar.array() * (pa * pb.transpose()).array()).sum();
    if (pb_bar) pb_bar->noalias() += kp.nu * kbar.transpose() * pa;
    if (pa_bar) pa_bar->noalias() += kp.nu * kbar * pb;

    if (spec.is_augmented_linear()) {
        ctx.d_nu += (kbar.array() * (xa * xb.transpose()).array()).sum();
        if (xa_bar) xa_bar->noalias() += kp.nu * kbar * xb;
        if (xb_bar) xb_bar->noalias() += kp.nu * kbar.transpose() * xa;
        return;
    }

    const bool periodic = spec.is_periodic();
    const bool skip1 = periodic && spec.se_excludes_periodic_dim;
    const double il1sq = 1.0 / square(kp.period_lengthscale);
    const Eigen::Index nchunks = static_cast<Eigen::Index>(threading::chunk_count(static_cast<std::size_t>(a)));
    struct Local {
        double d_sigma = 0.0, d_period = 0.0;
        Vec d_ls;
        Mat xb_bar;
    };
    std::vector<Local> locals(static_cast<std::size_t>(nchunks));
    for (auto& l : locals) {
        l.d_ls = Vec::Zero(q);
        if (xb_bar) l.xb_bar = Mat::Zero(b, q);
    }
    threading::parallel_chunks(static_cast<std::size_t>(a), [&](std::size_t lo, std::size_t hi, std::size_t ci) {
        Local& loc = locals[ci];
        for (auto i = static_cast<Eigen::Index>(lo); i < static_cast<Eigen::Index>(hi); ++i) {
            for (Eigen::Index j = 0; j < b; ++j) {
                const double u = kbar(i, j);
                if (u == 0.0) continue;
                const double ese = g.ese(i, j);
                const double per = periodic ? g.per(i, j) : 1.0;
                loc.d_sigma += u * per * ese;
                const double c = u * kp.sigma_f2 * per * ese;
                for (Eigen::Index k = skip1 ? 1 : 0; k < q; ++k) {
                    const double l = kp.lengthscales[k];
                    const double diff = xa(i, k) - xb(j, k);
                    const double s = diff / (l * l);
                    if (xa_bar) (*xa_bar)(i, k) -= c * s;
                    if (xb_bar) loc.xb_bar(j, k) += c * s;
                    loc.d_ls[k] += c * diff * diff / (l * l * l);
                }
                if (periodic) {
                    const double delta = xa(i, 0) - xb(j, 0);
                    const double sn = std::sin(0.5 * std::fabs(delta));
                    const double cse = u * kp.sigma_f2 * ese;
                    // d/d delta of the periodic exponent: -sin(delta)/l1^2
                    const double dds = -cse * per * std::sin(delta) * il1sq;
                    if (xa_bar) (*xa_bar)(i, 0) += dds;
                    if (xb_bar) loc.xb_bar(j, 0) -= dds;
                    loc.d_period += cse * per * 4.0 * sn * sn * il1sq / kp.period_lengthscale;
                }
            }
        }
    });
    for (const auto& l : locals) {
        ctx.d_sigma_f2 += l.d_sigma;
        ctx.d_period += l.d_period;
        ctx.d_lengthscales += l.d_ls;
        if (xb_bar) *xb_bar += l.xb_bar;
    }
}

inline void softmax_rows_backward(const Mat& pphi, const Mat& pphi_bar, Mat& rho_bar) {
    for (Eigen::Index i = 0; i < pphi.rows(); ++i) {
        const double dot = pphi.row(i).dot(pphi_bar.row(i));
        rho_bar.row(i) += ((pphi_bar.row(i).array() - dot) * pphi.row(i).array()).matrix();
    }
}

} // namespace detail

/// Value (and, when `grads` is non-null, exact reverse-mode gradients) of
/// the doubly-stochastic mini-batch ELBO estimate. Consumes a fixed number
/// of rng draws: n_mc * B * (Q + D) normals.
inline ElboResult elbo_engine(ModelState& state, const MiniBatch& batch, long n_total,
                              int n_mc, rng::Engine& rng_engine, ModelGrads* grads,
                              enc::Mode mode = enc::Mode::train) {
    if (batch.y.rows() < 1) throw DomainError("elbo: empty batch");
    if (n_mc < 1) throw DomainError("elbo: n_mc must be >= 1");
    const Eigen::Index bsz = batch.y.rows();
    const Eigen::Index d_genes = state.n_genes;
    const Eigen::Index m = state.ind.m_inducing();
    const Eigen::Index q = state.q_latent;
    if (batch.y.cols() != d_genes) throw ShapeMismatch("elbo: batch gene dim mismatch");
    const double scale_n = static_cast<double>(n_total) / static_cast<double>(bsz);

    const kernel::KernelSpec& kspec = state.kspec;
    const kernel::KernelParams kp = state.kernel_params();
    const lik::LikelihoodSpec lspec = state.likelihood();
    lik::check_pipeline(lspec, batch.tag);
    const bool auglin = kspec.is_augmented_linear();
    const bool gaussian = lspec.form == lik::LikelihoodForm::Gaussian;
    const bool learned_scale = lspec.form == lik::LikelihoodForm::NBLearnedScale;
    const double r_disp = lspec.nb_dispersion;

    // --- encoder ---
    enc::EncodeCache ecache;
    const enc::LatentPosterior post =
        enc::encode(state.espec, state.eparams, batch.y, batch.phi, mode, &ecache);
    const Mat sd_x = post.var.cwiseSqrt();

    // --- KL(q(x) || p(x)) ---
    double klx = 0.0;
    for (Eigen::Index n = 0; n < bsz; ++n)
        klx += kl_qx(post.mean.row(n).transpose(), post.var.row(n).transpose());
    klx *= scale_n;

    // --- K_MM and per-gene inducing quantities ---
    const Mat pphi = state.ind.pseudo_phi();
    const detail::CrossGram kmm_parts =
        detail::cross_gram(kspec, kp, state.ind.Z, pphi, state.ind.Z, pphi);
    const double kmm_diag_mean = std::max(kmm_parts.k.diagonal().mean(), 0.0);
    const auto chol = kernel::jittered_cholesky(kmm_parts.k);
    const Mat& lk = chol.L;
    const double jitter_coeff = kmm_diag_mean > 0.0 ? chol.jitter / kmm_diag_mean : 0.0;

    Mat kinv = Mat::Identity(m, m);
    lk.triangularView<Eigen::Lower>().solveInPlace(kinv);
    lk.triangularView<Eigen::Lower>().transpose().solveInPlace(kinv);

    // prior means at inducing points, M x D
    Mat muu = Mat::Constant(m, d_genes, kp.mu_f);
    if (auglin) {
        muu.noalias() += state.ind.Z * kp.w.leftCols(q).transpose();
        muu.noalias() += pphi * kp.w.rightCols(kspec.d_covar).transpose();
    } else {
        muu.noalias() += pphi * kp.zeta.transpose();
    }
    const Mat rmat = state.ind.m - muu;
    Mat amat = lk.triangularView<Eigen::Lower>().solve(rmat);
    lk.triangularView<Eigen::Lower>().transpose().solveInPlace(amat); // K^-1 (m - mu_u)

    // materialized S factors (shared by KLU and the variance path)
    std::vector<Mat> ls_all(static_cast<std::size_t>(d_genes));
    for (Eigen::Index d = 0; d < d_genes; ++d) ls_all[static_cast<std::size_t>(d)] = state.ind.S_chol(d);

    // --- KL(q(u) || p(u)) ---
    const double logdet_k = 2.0 * lk.diagonal().array().log().sum();
    double klu = 0.0;
    {
        const Eigen::Index nchunks =
            static_cast<Eigen::Index>(threading::chunk_count(static_cast<std::size_t>(d_genes)));
        std::vector<double> partial(static_cast<std::size_t>(nchunks), 0.0);
        threading::parallel_chunks(static_cast<std::size_t>(d_genes),
                                   [&](std::size_t lo, std::size_t hi, std::size_t ci) {
            double acc = 0.0;
            for (std::size_t d = lo; d < hi; ++d) {
                const Mat& ls = ls_all[d];
                const double trace = (kinv * ls.triangularView<Eigen::Lower>()).cwiseProduct(ls).sum();
                const double quad = rmat.col(static_cast<Eigen::Index>(d))
                                        .dot(amat.col(static_cast<Eigen::Index>(d)));
                const double logdet_s = 2.0 * ls.diagonal().array().log().sum();
                acc += 0.5 * (trace + quad - static_cast<double>(m) + logdet_k - logdet_s);
            }
            partial[ci] = acc;
        });
        for (double v : partial) klu += v;
    }

    // --- accumulators for the backward pass ---
    Mat mean_bar, var_bar, kbar, zbar, pphi_bar, abar, muu_bar;
    detail::KernelCtx kctx(kspec, kp);
    if (grads) {
        mean_bar = Mat::Zero(bsz, q);
        var_bar = Mat::Zero(bsz, q);
        kbar = Mat::Zero(m, m);
        zbar = Mat::Zero(m, q);
        pphi_bar = Mat::Zero(m, kspec.d_covar);
        abar = Mat::Zero(m, d_genes);
        muu_bar = Mat::Zero(m, d_genes);

        // KLU backward: dELBO/dK, dELBO/dm, dELBO/dMuU, dELBO/dS_raw
        Mat ssum = Mat::Zero(m, m);
        threading::parallel_chunks(static_cast<std::size_t>(d_genes),
                                   [&](std::size_t lo, std::size_t hi, std::size_t) {
            for (std::size_t d = lo; d < hi; ++d) {
                const Mat& ls = ls_all[d];
                const Mat x_d = kinv * ls.triangularView<Eigen::Lower>(); // K^-1 L_S
                Mat ls_bar = -x_d;         // from the trace term (x 1/2 * 2)
                ls_bar.diagonal().array() += 1.0 / ls.diagonal().array(); // -(-1/diag)
                Mat& sraw_grad = grads->ind.S_raw[d];
                const Mat& sraw = state.ind.S_raw[d];
                for (Eigen::Index j = 0; j < m; ++j) {
                    for (Eigen::Index i = j + 1; i < m; ++i) sraw_grad(i, j) += ls_bar(i, j);
                    sraw_grad(j, j) += ls_bar(j, j) * sigmoid(sraw(j, j));
                }
            }
        });
        for (Eigen::Index d = 0; d < d_genes; ++d) {
            const Mat& ls = ls_all[static_cast<std::size_t>(d)];
            ssum.selfadjointView<Eigen::Lower>().rankUpdate(ls, 1.0);
        }
        ssum.triangularView<Eigen::StrictlyUpper>() = ssum.transpose();
        // dELBO/dK from -KLU: +1/2 K^-1 Ssum K^-1 + 1/2 A A^T - D/2 K^-1
        kbar.noalias() += 0.5 * kinv * ssum * kinv;
        kbar.noalias() += 0.5 * amat * amat.transpose();
        kbar.noalias() -= 0.5 * static_cast<double>(d_genes) * kinv;
        grads->ind.m -= amat;   // dELBO/dm_d = -a_d
        muu_bar += amat;        // dELBO/dMuU_d = +a_d
    }

    // --- MC samples over x and f ---
    const double inv_mc = 1.0 / static_cast<double>(n_mc);
    double ell = 0.0;
    long floor_events = 0;
    Mat t_stack(m, d_genes * bsz); // one contiguous M x B block per gene

    for (int s = 0; s < n_mc; ++s) {
        // fixed draw order: eps_x (B x Q) then eps_f (B x D)
        Mat eps_x(bsz, q), eps_f(bsz, d_genes);
        for (Eigen::Index i = 0; i < bsz; ++i)
            for (Eigen::Index k = 0; k < q; ++k) eps_x(i, k) = rng::normal(rng_engine);
        for (Eigen::Index i = 0; i < bsz; ++i)
            for (Eigen::Index k = 0; k < d_genes; ++k) eps_f(i, k) = rng::normal(rng_engine);

        const Mat x = post.mean + sd_x.cwiseProduct(eps_x);
        const detail::CrossGram knm_parts = detail::cross_gram(kspec, kp, x, batch.phi, state.ind.Z, pphi);
        const Mat& knm = knm_parts.k;
        Vec kxx(bsz);
        if (auglin)
            kxx = kp.nu * (x.rowwise().squaredNorm() + batch.phi.rowwise().squaredNorm());
        else
            kxx = Vec::Constant(bsz, kp.sigma_f2) + kp.nu * batch.phi.rowwise().squaredNorm();

        Mat w = lk.triangularView<Eigen::Lower>().solve(knm.transpose());
        lk.triangularView<Eigen::Lower>().transpose().solveInPlace(w); // M x B, K^-1 KnM^T
        const Vec qn = knm.transpose().cwiseProduct(w).colwise().sum().transpose();

        Mat fmean = Mat::Constant(bsz, d_genes, kp.mu_f);
        if (auglin) {
            fmean.noalias() += x * kp.w.leftCols(q).transpose();
            fmean.noalias() += batch.phi * kp.w.rightCols(kspec.d_covar).transpose();
        } else {
            fmean.noalias() += batch.phi * kp.zeta.transpose();
        }
        fmean.noalias() += knm * amat;

        Mat fvar(bsz, d_genes), f(bsz, d_genes);
        std::vector<long> floor_per_chunk(threading::chunk_count(static_cast<std::size_t>(d_genes)), 0);
        threading::parallel_chunks(static_cast<std::size_t>(d_genes),
                                   [&](std::size_t lo, std::size_t hi, std::size_t ci) {
            long local_floor = 0;
            for (std::size_t du = lo; du < hi; ++du) {
                const auto d = static_cast<Eigen::Index>(du);
                auto t_d = t_stack.middleCols(d * bsz, bsz);
                t_d.noalias() = ls_all[du].triangularView<Eigen::Lower>().transpose() * w;
                for (Eigen::Index n = 0; n < bsz; ++n) {
                    const double raw = kxx[n] - qn[n] + t_d.col(n).squaredNorm();
                    if (raw < 1e-10) ++local_floor;
                    fvar(n, d) = std::max(raw, 1e-10);
                    f(n, d) = fmean(n, d) + std::sqrt(fvar(n, d)) * eps_f(n, d);
                }
            }
            floor_per_chunk[ci] = local_floor;
        });
        for (long c : floor_per_chunk) floor_events += c;

        // --- expected log likelihood over the batch ---
        Mat fbar; // dELBO/df scaled by (N/B)/n_mc
        if (grads) fbar.resize(bsz, d_genes);
        double ell_s = 0.0;
        const double w_ell = scale_n * inv_mc;
        if (gaussian) {
            const double s2 = lspec.sigma_y2;
            const Mat res = batch.y - f;
            ell_s = -0.5 * static_cast<double>(d_genes * bsz) * std::log(2.0 * M_PI * s2) -
                    res.squaredNorm() / (2.0 * s2);
            if (grads) {
                fbar = (w_ell / s2) * res;
                const double d_s2 = -0.5 * static_cast<double>(d_genes * bsz) / s2 +
                                    res.squaredNorm() / (2.0 * s2 * s2);
                grads->sigma_y2_raw += w_ell * d_s2 * sigmoid(state.sigma_y2_raw);
            }
        } else {
            const std::size_t nch = threading::chunk_count(static_cast<std::size_t>(bsz));
            std::vector<double> ell_chunk(nch, 0.0);
            threading::parallel_chunks(static_cast<std::size_t>(bsz),
                                       [&](std::size_t lo, std::size_t hi, std::size_t ci) {
                double acc = 0.0;
                Vec mu(d_genes), t(d_genes);
                for (std::size_t nu = lo; nu < hi; ++nu) {
                    const auto n = static_cast<Eigen::Index>(nu);
                    const double log_sc = learned_scale
                                              ? state.log_scale[batch.cell_index.at(nu)]
                                              : std::log(lspec.nb_scale);
                    const double lse = logsumexp(f.row(n).transpose());
                    double tsum = 0.0;
                    for (Eigen::Index j = 0; j < d_genes; ++j) {
                        const double muv = std::max(std::exp(log_sc + f(n, j) - lse), 1e-12);
                        mu[j] = muv;
                        const double y = batch.y(n, j);
                        const double cst = batch.nb_const ? (*batch.nb_const)(n, j)
                                                          : lik::nb_logpmf_const(y, r_disp);
                        acc += cst + lik::nb_logpmf_mu_part(y, muv, r_disp);
                        t[j] = y - muv * (y + r_disp) / (r_disp + muv);
                        tsum += t[j];
                    }
                    if (grads) {
                        const double sc = std::exp(log_sc);
                        for (Eigen::Index j = 0; j < d_genes; ++j)
                            fbar(n, j) = w_ell * (t[j] - tsum * (mu[j] / sc));
                        if (learned_scale)
                            grads->log_scale[batch.cell_index.at(nu)] += w_ell * tsum;
                    }
                }
                ell_chunk[ci] = acc;
            });
            for (double v : ell_chunk) ell_s += v;
        }
        ell += w_ell * ell_s;

        if (!grads) continue;

        // --- backward through this sample ---
        Mat xbar = Mat::Zero(bsz, q);
        // f = fmean + sqrt(fvar) eps
        const Mat fvar_bar = 0.5 * fbar.cwiseProduct(eps_f).cwiseQuotient(fvar.cwiseSqrt());
        // fvar = kxx - qn + svar (floored entries get no gradient)
        Mat fvar_bar_active = fvar_bar;
        Mat wbar = Mat::Zero(m, bsz);
        threading::parallel_chunks(static_cast<std::size_t>(d_genes),
                                   [&](std::size_t lo, std::size_t hi, std::size_t) {
            for (std::size_t du = lo; du < hi; ++du) {
                const auto d = static_cast<Eigen::Index>(du);
                for (Eigen::Index n = 0; n < bsz; ++n)
                    if (fvar(n, d) <= 1e-10) fvar_bar_active(n, d) = 0.0;
            }
        });
        const Vec kxx_bar = fvar_bar_active.rowwise().sum();
        const Vec qn_bar = -kxx_bar;

        {
            // per-gene: svar path (T_d) and the accumulated W gradient
            const std::size_t nch = threading::chunk_count(static_cast<std::size_t>(d_genes));
            std::vector<Mat> wbar_chunk(nch);
            for (auto& mcb : wbar_chunk) mcb = Mat::Zero(m, bsz);
            threading::parallel_chunks(static_cast<std::size_t>(d_genes),
                                       [&](std::size_t lo, std::size_t hi, std::size_t ci) {
                Mat tbar(m, bsz);
                for (std::size_t du = lo; du < hi; ++du) {
                    const auto d = static_cast<Eigen::Index>(du);
                    const auto t_d = t_stack.middleCols(d * bsz, bsz);
                    for (Eigen::Index n = 0; n < bsz; ++n)
                        tbar.col(n) = (2.0 * fvar_bar_active(n, d)) * t_d.col(n);
                    wbar_chunk[ci].noalias() += ls_all[du].triangularView<Eigen::Lower>() * tbar;
                    Mat lsbar = w * tbar.transpose(); // W Tbar^T; lower part feeds S_raw
                    Mat& sraw_grad = grads->ind.S_raw[du];
                    const Mat& sraw = state.ind.S_raw[du];
                    for (Eigen::Index j = 0; j < m; ++j) {
                        for (Eigen::Index i = j + 1; i < m; ++i) sraw_grad(i, j) += lsbar(i, j);
                        sraw_grad(j, j) += lsbar(j, j) * sigmoid(sraw(j, j));
                    }
                }
            });
            for (const auto& mcb : wbar_chunk) wbar += mcb;
        }

        // fmean backward
        abar.noalias() += knm.transpose() * fbar;
        Mat knm_bar = fbar * amat.transpose(); // B x M
        if (auglin) {
            grads->kraw.w.leftCols(q).noalias() += fbar.transpose() * x;
            grads->kraw.w.rightCols(kspec.d_covar).noalias() += fbar.transpose() * batch.phi;
            xbar.noalias() += fbar * kp.w.leftCols(q);
        } else {
            grads->kraw.zeta.noalias() += fbar.transpose() * batch.phi;
        }
        grads->kraw.mu_f += fbar.sum();

        // qn = sum_m KnM(n,m) W(m,n)
        knm_bar.noalias() += qn_bar.asDiagonal() * w.transpose();
        wbar.noalias() += knm.transpose() * qn_bar.asDiagonal();

        // kxx backward
        if (auglin) {
            kctx.d_nu += kxx_bar.dot(x.rowwise().squaredNorm() + batch.phi.rowwise().squaredNorm());
            xbar.noalias() += (2.0 * kp.nu) * kxx_bar.asDiagonal() * x;
        } else {
            kctx.d_sigma_f2 += kxx_bar.sum();
            kctx.d_nu += kxx_bar.dot(batch.phi.rowwise().squaredNorm());
        }

        // W = K^-1 KnM^T backward
        Mat hw = lk.triangularView<Eigen::Lower>().solve(wbar);
        lk.triangularView<Eigen::Lower>().transpose().solveInPlace(hw); // K^-1 Wbar
        knm_bar.noalias() += hw.transpose();
        kbar.noalias() -= hw * w.transpose();

        // KnM entries -> x, Z, pseudo-phi, kernel params
        detail::cross_gram_backward(kctx, knm_parts, knm_bar, x, batch.phi, state.ind.Z, pphi,
                                    &xbar, &zbar, nullptr, &pphi_bar);

        // x = mean + sd * eps
        mean_bar += xbar;
        var_bar += 0.5 * xbar.cwiseProduct(eps_x).cwiseQuotient(sd_x);
    }

    ElboResult res;
    res.parts = {ell, klx, klu};
    res.elbo = ell - klx - klu;
    res.fvar_floor_events = floor_events;
    if (!grads) return res;

    // --- A = K^-1 (m - MuU) backward (collected across samples + KLU) ---
    {
        Mat h = lk.triangularView<Eigen::Lower>().solve(abar);
        lk.triangularView<Eigen::Lower>().transpose().solveInPlace(h);
        grads->ind.m += h;
        muu_bar -= h;
        kbar.noalias() -= h * amat.transpose();
    }

    // MuU backward
    grads->kraw.mu_f += muu_bar.sum();
    if (auglin) {
        grads->kraw.w.leftCols(q).noalias() += muu_bar.transpose() * state.ind.Z;
        grads->kraw.w.rightCols(kspec.d_covar).noalias() += muu_bar.transpose() * pphi;
        zbar.noalias() += muu_bar * kp.w.leftCols(q);
        pphi_bar.noalias() += muu_bar * kp.w.rightCols(kspec.d_covar);
    } else {
        grads->kraw.zeta.noalias() += muu_bar.transpose() * pphi;
        pphi_bar.noalias() += muu_bar * kp.zeta;
    }

    // jitter = coeff * mean(diag K_raw): fold the diagonal chain into kbar
    if (jitter_coeff > 0.0) {
        const double add = jitter_coeff * kbar.trace() / static_cast<double>(m);
        kbar.diagonal().array() += add;
    }

    // K_MM entries -> Z, pseudo-phi, kernel params (both argument slots)
    detail::cross_gram_backward(kctx, kmm_parts, kbar, state.ind.Z, pphi, state.ind.Z, pphi,
                                &zbar, &zbar, &pphi_bar, &pphi_bar);
    grads->ind.Z += zbar;

    // pseudo-phi -> rho (rowwise softmax)
    detail::softmax_rows_backward(pphi, pphi_bar, grads->ind.rho);

    // constrained kernel param partials -> softplus raws
    grads->kraw.sigma_f2_raw += kctx.d_sigma_f2 * sigmoid(state.kraw.sigma_f2_raw);
    for (Eigen::Index k = 0; k < kp.lengthscales.size(); ++k)
        grads->kraw.lengthscales_raw[k] +=
            kctx.d_lengthscales[k] * sigmoid(state.kraw.lengthscales_raw[k]);
    grads->kraw.nu_raw += kctx.d_nu * sigmoid(state.kraw.nu_raw);
    grads->kraw.period_raw += kctx.d_period * sigmoid(state.kraw.period_raw);

    // KLX backward + encoder
    mean_bar -= scale_n * post.mean;
    var_bar -= scale_n * 0.5 * (1.0 - post.var.cwiseInverse().array()).matrix();
    enc::encode_backward(state.espec, state.eparams, ecache, mean_bar, var_bar, grads->eparams);

    return res;
}

/// Stochastic ELBO estimate (no gradients).
inline ElboResult elbo_minibatch(ModelState& state, const MiniBatch& batch, long n_total,
                                 int n_mc, rng::Engine& rng_engine,
                                 enc::Mode mode = enc::Mode::train) {
    return elbo_engine(state, batch, n_total, n_mc, rng_engine, nullptr, mode);
}

/// Same estimate with exact reverse-mode gradients of it (same rng draws).
inline ElboResult elbo_grad(ModelState& state, const MiniBatch& batch, long n_total,
                            int n_mc, rng::Engine& rng_engine, ModelGrads& grads,
                            enc::Mode mode = enc::Mode::train) {
    return elbo_engine(state, batch, n_total, n_mc, rng_engine, &grads, mode);
}

// ---------------------------------------------------------------------------
// Latent export
// ---------------------------------------------------------------------------

/// Eval-mode encoding of all cells, streamed in chunks; rows in the
/// likelihood's processed representation.
inline enc::LatentPosterior export_latents(ModelState& state, const Mat& rows, const Mat& phi,
                                           Eigen::Index chunk = 512) {
    const Eigen::Index n = rows.rows();
    enc::LatentPosterior out;
    out.mean.resize(n, state.q_latent);
    out.var.resize(n, state.q_latent);
    for (Eigen::Index lo = 0; lo < n; lo += chunk) {
        const Eigen::Index len = std::min(chunk, n - lo);
        const enc::LatentPosterior p =
            enc::encode(state.espec, state.eparams, rows.middleRows(lo, len),
                        phi.middleRows(lo, len), enc::Mode::eval, nullptr);
        out.mean.middleRows(lo, len) = p.mean;
        out.var.middleRows(lo, len) = p.var;
    }
    return out;
}

} // namespace scgplvm::svgp
