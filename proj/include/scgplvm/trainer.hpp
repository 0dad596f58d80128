#pragma once

#include "scgplvm/core.hpp"
#include "scgplvm/dataset.hpp"
#include "scgplvm/serialize.hpp"
#include "scgplvm/svgp.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

/// @file trainer.hpp
/// Adam optimization loop with mini-batching, seeding, checkpointing and
/// the ablation-mode configuration switches. Training maximizes the
/// mini-batch ELBO (Adam steps on its negative); data are reshuffled each
/// epoch with an epoch-derived stream so a (seed, thread-count) pair pins
/// the whole run.

namespace scgplvm::train {

struct TrainConfig {
    int batch_size = 300;
    double lr = 0.05;
    int epochs = 50;
    std::uint64_t seed = 0;
    int q_latent = 10;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int n_mc = 1;
    int checkpoint_every = 5;
    int m_inducing = 64;
    std::vector<int> hidden_dims{128, 128};
    double nb_scale = 5000.0;
    double nb_dispersion = 1e6;
    bool gaussian_standardize = false;
    bool shared_trunk = false;
    bool se_excludes_periodic_dim = false;
    std::string out_dir; // checkpoints written when nonempty

    void validate() const {
        if (batch_size < 1) throw DomainError("batch_size must be >= 1");
        if (lr < 0.0) throw DomainError("lr must be >= 0");
        if (epochs < 1) throw DomainError("epochs must be >= 1");
        if (q_latent < 1) throw DomainError("q_latent must be >= 1");
        if (n_mc < 1) throw DomainError("n_mc must be >= 1");
        if (m_inducing < 1) throw DomainError("m_inducing must be >= 1");
        if (nb_scale <= 0.0 || nb_dispersion <= 0.0) throw DomainError("nb parameters must be > 0");
    }
};

inline Json to_json(const TrainConfig& c) {
    return Json{{"batch_size", c.batch_size},
                {"lr", c.lr},
                {"epochs", c.epochs},
                {"seed", c.seed},
                {"q_latent", c.q_latent},
                {"adam_beta1", c.adam_beta1},
                {"adam_beta2", c.adam_beta2},
                {"adam_eps", c.adam_eps},
                {"n_mc", c.n_mc},
                {"checkpoint_every", c.checkpoint_every},
                {"m_inducing", c.m_inducing},
                {"hidden_dims", c.hidden_dims},
                {"nb_scale", c.nb_scale},
                {"nb_dispersion", c.nb_dispersion},
                {"gaussian_standardize", c.gaussian_standardize},
                {"shared_trunk", c.shared_trunk},
                {"se_excludes_periodic_dim", c.se_excludes_periodic_dim}};
}

inline TrainConfig train_config_from_json(const Json& j) {
    TrainConfig c;
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.epochs = j.value("epochs", c.epochs);
    c.seed = j.value("seed", c.seed);
    c.q_latent = j.value("q_latent", c.q_latent);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.n_mc = j.value("n_mc", c.n_mc);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.m_inducing = j.value("m_inducing", c.m_inducing);
    c.hidden_dims = j.value("hidden_dims", c.hidden_dims);
    c.nb_scale = j.value("nb_scale", c.nb_scale);
    c.nb_dispersion = j.value("nb_dispersion", c.nb_dispersion);
    c.gaussian_standardize = j.value("gaussian_standardize", c.gaussian_standardize);
    c.shared_trunk = j.value("shared_trunk", c.shared_trunk);
    c.se_excludes_periodic_dim = j.value("se_excludes_periodic_dim", c.se_excludes_periodic_dim);
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Ablation presets
// ---------------------------------------------------------------------------

enum class Preset { proposed, simple_nn, gaussian_likelihood, linear_kernel, learned_library };

inline Preset preset_from_string(const std::string& s) {
    if (s == "proposed") return Preset::proposed;
    if (s == "simple_nn") return Preset::simple_nn;
    if (s == "gaussian_likelihood") return Preset::gaussian_likelihood;
    if (s == "linear_kernel") return Preset::linear_kernel;
    if (s == "learned_library") return Preset::learned_library;
    throw UnknownPreset("unknown preset: " + s);
}

inline const char* to_string(Preset p) {
    switch (p) {
        case Preset::proposed: return "proposed";
        case Preset::simple_nn: return "simple_nn";
        case Preset::gaussian_likelihood: return "gaussian_likelihood";
        case Preset::linear_kernel: return "linear_kernel";
        case Preset::learned_library: return "learned_library";
    }
    return "?";
}

enum class Preproc { library_normalize, log_gaussian, raw_counts };

struct PresetSpecs {
    kernel::KernelSpec kspec;
    lik::LikelihoodSpec lspec;
    enc::EncoderSpec espec; // input_dim filled once the dataset is known
    Preproc preproc = Preproc::library_normalize;
};

/// One component changed at a time, relative to the proposed configuration
/// (SE-ARD+Linear kernel, ApproxPoisson likelihood, batch-aware encoder,
/// library normalization).
inline PresetSpecs ablation_presets(Preset name, const TrainConfig& cfg, int d_covar) {
    PresetSpecs ps;
    ps.kspec.form = kernel::KernelForm::SEARD_plus_Linear;
    ps.kspec.q_latent = cfg.q_latent;
    ps.kspec.d_covar = d_covar;
    ps.kspec.se_excludes_periodic_dim = cfg.se_excludes_periodic_dim;
    ps.lspec.form = lik::LikelihoodForm::ApproxPoisson;
    ps.lspec.nb_scale = cfg.nb_scale;
    ps.lspec.nb_dispersion = cfg.nb_dispersion;
    ps.espec.form = enc::EncoderForm::BatchAwareNN;
    ps.espec.hidden_dims = cfg.hidden_dims;
    ps.espec.q_latent = cfg.q_latent;
    ps.espec.d_covar = d_covar;
    ps.espec.shared_trunk = cfg.shared_trunk;
    ps.preproc = Preproc::library_normalize;

    switch (name) {
        case Preset::proposed: break;
        case Preset::simple_nn:
            ps.espec.form = enc::EncoderForm::SimpleNN;
            ps.espec.d_covar = 0;
            break;
        case Preset::gaussian_likelihood:
            ps.lspec.form = lik::LikelihoodForm::Gaussian;
            ps.preproc = Preproc::log_gaussian;
            break;
        case Preset::linear_kernel:
            ps.kspec.form = kernel::KernelForm::AugmentedLinear;
            break;
        case Preset::learned_library:
            ps.lspec.form = lik::LikelihoodForm::NBLearnedScale;
            ps.preproc = Preproc::raw_counts;
            break;
    }
    return ps;
}

// ---------------------------------------------------------------------------
// Data preparation
// ---------------------------------------------------------------------------

struct PreparedData {
    Mat y;        // N x D likelihood representation
    lik::ObsTag tag = lik::ObsTag::LibraryNormalized;
    data::DesignMatrix design;
    Mat nb_const; // N x D cache of nb_logpmf_const (count likelihoods)
    Vec row_sums; // N raw-count row sums
};

inline PreparedData prepare_data(const data::CountDataset& ds, const PresetSpecs& ps,
                                 const TrainConfig& cfg) {
    PreparedData pd;
    pd.design = data::one_hot_design(ds.batch_labels);
    pd.row_sums = ds.counts.cast<double>().rowwise().sum();
    switch (ps.preproc) {
        case Preproc::library_normalize:
            pd.y = data::library_normalize(ds, ps.lspec.nb_scale).values;
            pd.tag = lik::ObsTag::LibraryNormalized;
            break;
        case Preproc::log_gaussian:
            pd.y = data::gaussian_pipeline(ds, cfg.nb_scale, cfg.gaussian_standardize).values;
            pd.tag = lik::ObsTag::LogGaussian;
            break;
        case Preproc::raw_counts:
            pd.y = ds.counts.cast<double>();
            pd.tag = lik::ObsTag::RawCounts;
            break;
    }
    if (ps.lspec.form != lik::LikelihoodForm::Gaussian) {
        const double r = ps.lspec.nb_dispersion;
        pd.nb_const.resize(pd.y.rows(), pd.y.cols());
        threading::parallel_chunks(static_cast<std::size_t>(pd.y.rows()),
                                   [&](std::size_t lo, std::size_t hi, std::size_t) {
            for (std::size_t i = lo; i < hi; ++i)
                for (Eigen::Index j = 0; j < pd.y.cols(); ++j)
                    pd.nb_const(static_cast<Eigen::Index>(i), j) =
                        lik::nb_logpmf_const(pd.y(static_cast<Eigen::Index>(i), j), r);
        });
    }
    return pd;
}

/// Model sized to the dataset; encoder reads all genes.
inline svgp::ModelState build_model(const data::CountDataset& ds, const PreparedData& pd,
                                    PresetSpecs ps, const TrainConfig& cfg) {
    ps.espec.input_dim = static_cast<int>(ds.n_genes());
    svgp::InitConfig init;
    init.m_inducing = cfg.m_inducing;
    return svgp::init_model_state(ps.kspec, ps.lspec, ps.espec, static_cast<int>(ds.n_genes()),
                                  ds.n_cells(), cfg.seed, pd.row_sums, init);
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Bias-corrected Adam over a flat parameter/gradient pointer index.
struct Adam {
    double lr, beta1, beta2, eps;
    Vec m, v;
    long t = 0;

    Adam(std::size_t n, const TrainConfig& cfg)
        : lr(cfg.lr), beta1(cfg.adam_beta1), beta2(cfg.adam_beta2), eps(cfg.adam_eps),
          m(Vec::Zero(static_cast<Eigen::Index>(n))), v(Vec::Zero(static_cast<Eigen::Index>(n))) {}

    /// One minimization step along `grad`.
    void step(const std::vector<double*>& params, const std::vector<double*>& grad) {
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (std::size_t i = 0; i < params.size(); ++i) {
            const double g = *grad[i];
            const auto k = static_cast<Eigen::Index>(i);
            m[k] = beta1 * m[k] + (1.0 - beta1) * g;
            v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
            const double mhat = m[k] / bc1;
            const double vhat = v[k] / bc2;
            *params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
};

// ---------------------------------------------------------------------------
// Train log
// ---------------------------------------------------------------------------

struct StepRecord {
    long step;
    int epoch;
    double elbo, ell, klx, klu;
    double wall_ms;
};

struct EpochSummary {
    int epoch;
    double mean_elbo, mean_ell, mean_klx, mean_klu;
};

struct TrainLog {
    std::vector<StepRecord> steps;
    std::vector<EpochSummary> epochs;

    void write_csv(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw IoError("cannot write train log: " + path);
        out << "step,epoch,elbo,ell,klx,klu,wall_ms\n";
        char buf[256];
        for (const auto& s : steps) {
            std::snprintf(buf, sizeof(buf), "%ld,%d,%.17g,%.17g,%.17g,%.17g,%.3f\n", s.step,
                          s.epoch, s.elbo, s.ell, s.klx, s.klu, s.wall_ms);
            out << buf;
        }
    }
};

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

namespace detail {

struct TensorRef {
    std::string path;
    double* data;
    std::vector<long> shape;
    std::size_t count() const {
        std::size_t n = 1;
        for (long s : shape) n *= static_cast<std::size_t>(s);
        return n;
    }
};

inline std::vector<TensorRef> tensor_index(svgp::ModelState& s) {
    std::vector<TensorRef> t;
    auto add = [&t](const std::string& path, double* p, std::vector<long> shape) {
        t.push_back({path, p, std::move(shape)});
    };
    add("kernel.sigma_f2_raw", &s.kraw.sigma_f2_raw, {1});
    add("kernel.lengthscales_raw", s.kraw.lengthscales_raw.data(), {s.kraw.lengthscales_raw.size()});
    add("kernel.nu_raw", &s.kraw.nu_raw, {1});
    add("kernel.period_raw", &s.kraw.period_raw, {1});
    add("kernel.mu_f", &s.kraw.mu_f, {1});
    if (s.kraw.zeta.size() > 0) add("kernel.zeta", s.kraw.zeta.data(), {s.kraw.zeta.rows(), s.kraw.zeta.cols()});
    if (s.kraw.w.size() > 0) add("kernel.w", s.kraw.w.data(), {s.kraw.w.rows(), s.kraw.w.cols()});
    add("inducing.Z", s.ind.Z.data(), {s.ind.Z.rows(), s.ind.Z.cols()});
    add("inducing.rho", s.ind.rho.data(), {s.ind.rho.rows(), s.ind.rho.cols()});
    add("variational.m", s.ind.m.data(), {s.ind.m.rows(), s.ind.m.cols()});
    for (std::size_t d = 0; d < s.ind.S_raw.size(); ++d)
        add("variational.S_raw." + std::to_string(d), s.ind.S_raw[d].data(),
            {s.ind.S_raw[d].rows(), s.ind.S_raw[d].cols()});
    auto add_stack = [&add](enc::Stack& st, const std::string& prefix) {
        for (std::size_t li = 0; li < st.hidden.size(); ++li) {
            const std::string base = prefix + ".hidden" + std::to_string(li);
            add(base + ".W", st.hidden[li].W.data(), {st.hidden[li].W.rows(), st.hidden[li].W.cols()});
            add(base + ".b", st.hidden[li].b.data(), {st.hidden[li].b.size()});
            if (li < st.bn.size()) {
                add(base + ".bn_gamma", st.bn[li].gamma.data(), {st.bn[li].gamma.size()});
                add(base + ".bn_beta", st.bn[li].beta.data(), {st.bn[li].beta.size()});
                add(base + ".bn_running_mean", st.bn[li].running_mean.data(), {st.bn[li].running_mean.size()});
                add(base + ".bn_running_var", st.bn[li].running_var.data(), {st.bn[li].running_var.size()});
            }
        }
        add(prefix + ".head.W", st.head.W.data(), {st.head.W.rows(), st.head.W.cols()});
        add(prefix + ".head.b", st.head.b.data(), {st.head.b.size()});
    };
    add_stack(s.eparams.mean_stack, "encoder.mean");
    add_stack(s.eparams.var_stack, "encoder.var");
    add("likelihood.sigma_y2_raw", &s.sigma_y2_raw, {1});
    if (s.log_scale.size() > 0) add("likelihood.log_scale", s.log_scale.data(), {s.log_scale.size()});
    return t;
}

} // namespace detail

/// JSON manifest (specs, shapes, seed/rng state, step count) plus a raw
/// little-endian float64 sidecar keyed by parameter path.
inline void save_checkpoint(svgp::ModelState& state, long step, long n_cells,
                            const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    auto tensors = detail::tensor_index(state);
    Json manifest;
    manifest["format"] = "scgplvm-checkpoint-v1";
    manifest["step"] = step;
    manifest["n_cells"] = n_cells;
    manifest["n_genes"] = state.n_genes;
    manifest["q_latent"] = state.q_latent;
    manifest["m_inducing"] = state.ind.m_inducing();
    manifest["kernel_spec"] = scgplvm::to_json(state.kspec);
    manifest["likelihood_spec"] = scgplvm::to_json(state.lspec);
    manifest["encoder_spec"] = scgplvm::to_json(state.espec);
    manifest["rng"] = rng::serialize(state.sampler);
    Json params = Json::object();
    std::size_t offset = 0;
    for (const auto& t : tensors) {
        params[t.path] = Json{{"offset", offset}, {"shape", t.shape}};
        offset += t.count();
    }
    manifest["params"] = std::move(params);
    manifest["total_values"] = offset;

    {
        std::ofstream mf(dir + "/model.json");
        if (!mf) throw IoError("cannot write checkpoint manifest: " + dir);
        mf << manifest.dump(2) << '\n';
    }
    std::ofstream bf(dir + "/params.bin", std::ios::binary);
    if (!bf) throw IoError("cannot write checkpoint params: " + dir);
    for (const auto& t : tensors)
        bf.write(reinterpret_cast<const char*>(t.data),
                 static_cast<std::streamsize>(t.count() * sizeof(double)));
}

inline svgp::ModelState load_checkpoint(const std::string& dir, long* step_out = nullptr) {
    std::ifstream mf(dir + "/model.json");
    if (!mf) throw IoError("cannot open checkpoint manifest: " + dir);
    Json manifest = Json::parse(mf);
    if (manifest.value("format", "") != "scgplvm-checkpoint-v1")
        throw ParseError("unrecognized checkpoint format");

    const auto kspec = kernel_spec_from_json(manifest.at("kernel_spec"));
    const auto lspec = likelihood_spec_from_json(manifest.at("likelihood_spec"));
    const auto espec = encoder_spec_from_json(manifest.at("encoder_spec"));
    const int n_genes = manifest.at("n_genes").get<int>();
    const long n_cells = manifest.at("n_cells").get<long>();
    svgp::InitConfig init;
    init.m_inducing = manifest.at("m_inducing").get<int>();
    svgp::ModelState state = svgp::init_model_state(
        kspec, lspec, espec, n_genes, n_cells, 0,
        lspec.form == lik::LikelihoodForm::NBLearnedScale ? Vec::Ones(n_cells) : Vec(), init);
    state.sampler = rng::deserialize(manifest.at("rng").get<std::string>());

    std::ifstream bf(dir + "/params.bin", std::ios::binary);
    if (!bf) throw IoError("cannot open checkpoint params: " + dir);
    auto tensors = detail::tensor_index(state);
    const auto& params = manifest.at("params");
    for (auto& t : tensors) {
        if (!params.contains(t.path)) throw ParseError("checkpoint missing tensor: " + t.path);
        const std::size_t offset = params.at(t.path).at("offset").get<std::size_t>();
        bf.seekg(static_cast<std::streamoff>(offset * sizeof(double)));
        bf.read(reinterpret_cast<char*>(t.data),
                static_cast<std::streamsize>(t.count() * sizeof(double)));
        if (!bf) throw ParseError("checkpoint truncated at tensor: " + t.path);
    }
    if (step_out) *step_out = manifest.value("step", 0L);
    return state;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace detail {

inline rng::Engine epoch_stream(std::uint64_t seed, int epoch) {
    // distinct, order-independent stream per (seed, epoch)
    return rng::Engine(seed * 0x100000001b3ULL + static_cast<std::uint64_t>(epoch) + 1);
}

inline svgp::MiniBatch slice_batch(const PreparedData& pd, const std::vector<std::size_t>& perm,
                                   std::size_t lo, std::size_t hi, Mat& nb_const_buf) {
    svgp::MiniBatch mb;
    const auto b = static_cast<Eigen::Index>(hi - lo);
    mb.y.resize(b, pd.y.cols());
    mb.phi.resize(b, pd.design.phi.cols());
    mb.cell_index.resize(static_cast<std::size_t>(b));
    const bool has_const = pd.nb_const.size() > 0;
    if (has_const) nb_const_buf.resize(b, pd.y.cols());
    for (Eigen::Index i = 0; i < b; ++i) {
        const auto src = static_cast<Eigen::Index>(perm[lo + static_cast<std::size_t>(i)]);
        mb.y.row(i) = pd.y.row(src);
        mb.phi.row(i) = pd.design.phi.row(src);
        mb.cell_index[static_cast<std::size_t>(i)] = static_cast<long>(src);
        if (has_const) nb_const_buf.row(i) = pd.nb_const.row(src);
    }
    mb.tag = pd.tag;
    if (has_const) mb.nb_const = &nb_const_buf;
    return mb;
}

} // namespace detail

/// epochs x ceil(N / batch_size) Adam steps on -ELBO. Deterministic given
/// (cfg.seed, thread count). Aborts with NonFiniteLoss (and the offending
/// parts in the message) rather than skipping bad steps.
inline TrainLog train(svgp::ModelState& state, const PreparedData& pd, const TrainConfig& cfg) {
    cfg.validate();
    lik::check_pipeline(state.likelihood(), pd.tag);
    const auto n = static_cast<std::size_t>(pd.y.rows());
    const auto bsz = static_cast<std::size_t>(cfg.batch_size);

    auto pidx = svgp::build_param_index(state);
    svgp::ModelGrads grads = svgp::zero_grads(state);
    auto gidx = svgp::build_grad_index(state, grads);
    Adam adam(pidx.ptr.size(), cfg);

    TrainLog log;
    long step = 0;
    Mat nb_const_buf;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        rng::Engine eg = detail::epoch_stream(cfg.seed, epoch);
        const auto perm = rng::permutation(eg, n);
        double esum = 0.0, esum_ll = 0.0, esum_kx = 0.0, esum_ku = 0.0;
        long esteps = 0;
        for (std::size_t lo = 0; lo < n; lo += bsz) {
            const std::size_t hi = std::min(n, lo + bsz);
            const auto t0 = std::chrono::steady_clock::now();
            const svgp::MiniBatch mb = detail::slice_batch(pd, perm, lo, hi, nb_const_buf);
            for (auto* g : gidx.ptr) *g = 0.0;
            const svgp::ElboResult res =
                svgp::elbo_grad(state, mb, static_cast<long>(n), cfg.n_mc, state.sampler, grads);
            if (!std::isfinite(res.elbo)) {
                char msg[256];
                std::snprintf(msg, sizeof(msg),
                              "non-finite loss at step %ld (ell=%g klx=%g klu=%g floor=%ld)",
                              step, res.parts.ell, res.parts.klx, res.parts.klu,
                              res.fvar_floor_events);
                throw NonFiniteLoss(msg);
            }
            for (auto* g : gidx.ptr) *g = -*g; // maximize ELBO
            adam.step(pidx.ptr, gidx.ptr);
            const auto t1 = std::chrono::steady_clock::now();
            const double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
            ++step;
            log.steps.push_back({step, epoch, res.elbo, res.parts.ell, res.parts.klx,
                                 res.parts.klu, ms});
            esum += res.elbo;
            esum_ll += res.parts.ell;
            esum_kx += res.parts.klx;
            esum_ku += res.parts.klu;
            ++esteps;
        }
        const double inv = 1.0 / static_cast<double>(esteps);
        log.epochs.push_back({epoch, esum * inv, esum_ll * inv, esum_kx * inv, esum_ku * inv});
        if (!cfg.out_dir.empty() && cfg.checkpoint_every > 0 &&
            (epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs)) {
            save_checkpoint(state, step, static_cast<long>(n),
                            cfg.out_dir + "/checkpoint_epoch" + std::to_string(epoch));
        }
    }
    return log;
}

inline TrainLog train(svgp::ModelState& state, const data::CountDataset& ds, const PresetSpecs& ps,
                      const TrainConfig& cfg) {
    const PreparedData pd = prepare_data(ds, ps, cfg);
    return train(state, pd, cfg);
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

struct GradCheckReport {
    std::map<std::string, double> max_rel_error; // per parameter group
    double overall = 0.0;
};

/// elbo_grad vs central finite differences on a fixed batch with frozen
/// rng; samples up to n_params_sampled coordinates per group.
inline GradCheckReport gradcheck(svgp::ModelState& state, const PreparedData& pd,
                                 const TrainConfig& cfg, int n_params_sampled = 6,
                                 double fd_step = 1e-4) {
    Mat nb_const_buf;
    std::vector<std::size_t> ident(static_cast<std::size_t>(pd.y.rows()));
    for (std::size_t i = 0; i < ident.size(); ++i) ident[i] = i;
    const svgp::MiniBatch mb = detail::slice_batch(pd, ident, 0, ident.size(), nb_const_buf);
    const rng::Engine frozen = state.sampler;

    svgp::ModelGrads grads = svgp::zero_grads(state);
    {
        rng::Engine g = frozen;
        svgp::elbo_grad(state, mb, pd.y.rows(), cfg.n_mc, g, grads);
    }
    auto pidx = svgp::build_param_index(state);
    auto gidx = svgp::build_grad_index(state, grads);

    // deterministic coordinate sample: evenly spaced within each group
    std::map<int, std::vector<std::size_t>> chosen;
    {
        std::map<int, std::vector<std::size_t>> all;
        for (std::size_t i = 0; i < pidx.ptr.size(); ++i)
            all[static_cast<int>(pidx.group[i])].push_back(i);
        for (auto& [g, idxs] : all) {
            const std::size_t take = std::min<std::size_t>(idxs.size(), static_cast<std::size_t>(n_params_sampled));
            for (std::size_t k = 0; k < take; ++k)
                chosen[g].push_back(idxs[k * idxs.size() / take]);
        }
    }

    GradCheckReport rep;
    for (const auto& [g, idxs] : chosen) {
        double worst = 0.0;
        for (std::size_t i : idxs) {
            const double keep = *pidx.ptr[i];
            *pidx.ptr[i] = keep + fd_step;
            rng::Engine g1 = frozen;
            const double up = svgp::elbo_minibatch(state, mb, pd.y.rows(), cfg.n_mc, g1).elbo;
            *pidx.ptr[i] = keep - fd_step;
            rng::Engine g2 = frozen;
            const double dn = svgp::elbo_minibatch(state, mb, pd.y.rows(), cfg.n_mc, g2).elbo;
            *pidx.ptr[i] = keep;
            const double fd = (up - dn) / (2.0 * fd_step);
            const double an = *gidx.ptr[i];
            const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1.0});
            worst = std::max(worst, rel);
        }
        rep.max_rel_error[svgp::group_name(static_cast<svgp::Group>(g))] = worst;
        rep.overall = std::max(rep.overall, worst);
    }
    return rep;
}

} // namespace scgplvm::train
