#pragma once

#include "scgplvm/core.hpp"
#include "scgplvm/rng.hpp"

#include <string>
#include <vector>

/// @file encoder.hpp
/// Amortized variational posterior q(X): neural maps from (processed)
/// expression rows to per-cell Gaussian mean and diagonal variance.
///
/// Two stacks H_phi1 (mean) and H_phi2 (raw variance), each: linear layers
/// with softplus activations; the BatchAwareNN form concatenates the batch
/// one-hot to the input and adds batch normalization after each hidden
/// linear layer. By default the two stacks are fully separate networks; a
/// shared trunk with two linear heads sits behind `shared_trunk`.
///
/// The networks see log1p of whatever row representation the likelihood
/// pipeline produces. q-variances are softplus(raw) + 1e-6, keeping every
/// KL term finite.

namespace scgplvm::enc {

enum class EncoderForm { SimpleNN, BatchAwareNN };

inline std::string to_string(EncoderForm f) {
    return f == EncoderForm::SimpleNN ? "simple_nn" : "batch_aware_nn";
}

struct EncoderSpec {
    EncoderForm form = EncoderForm::BatchAwareNN;
    int input_dim = 0;
    std::vector<int> hidden_dims{128, 128};
    int q_latent = 10;
    int d_covar = 0;
    bool shared_trunk = false;

    bool batch_aware() const { return form == EncoderForm::BatchAwareNN; }
    int net_input_dim() const { return input_dim + (batch_aware() ? d_covar : 0); }

    void validate() const {
        if (input_dim < 1) throw DomainError("encoder input_dim must be >= 1");
        if (q_latent < 1) throw DomainError("encoder q_latent must be >= 1");
        for (int h : hidden_dims)
            if (h < 1) throw DomainError("encoder hidden widths must be >= 1");
        // hidden_dims may be empty only for the linear-map degenerate case
        // exercised by gradient checks; shared_trunk needs a trunk.
        if (hidden_dims.empty() && shared_trunk)
            throw DomainError("shared_trunk needs at least one hidden layer");
        if (batch_aware() && d_covar < 1)
            throw DomainError("BatchAwareNN needs d_covar >= 1");
    }
};

struct LinearLayer {
    Mat W; // out x in
    Vec b; // out
};

struct BatchNormLayer {
    Vec gamma, beta;
    Vec running_mean, running_var;
    static constexpr double eps = 1e-5;
    static constexpr double momentum = 0.1;
};

struct Stack {
    std::vector<LinearLayer> hidden;
    std::vector<BatchNormLayer> bn; // aligned with hidden for BatchAwareNN, else empty
    LinearLayer head;
};

struct EncoderParams {
    Stack mean_stack;
    Stack var_stack;  // unused hidden layers when shared_trunk; var head lives in var_stack.head
};

/// Per-cell Gaussian posterior moments.
struct LatentPosterior {
    Mat mean; // B x Q
    Mat var;  // B x Q, strictly positive
};

enum class Mode { train, eval };

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace detail {

inline LinearLayer init_linear(int out, int in, rng::Engine& g) {
    LinearLayer l;
    l.W.resize(out, in);
    l.b.resize(out);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (int i = 0; i < out; ++i)
        for (int j = 0; j < in; ++j) l.W(i, j) = (2.0 * rng::uniform(g) - 1.0) * bound;
    for (int i = 0; i < out; ++i) l.b[i] = (2.0 * rng::uniform(g) - 1.0) * bound;
    return l;
}

inline Stack init_stack(const EncoderSpec& spec, rng::Engine& g, bool with_hidden) {
    Stack s;
    int in = spec.net_input_dim();
    if (with_hidden) {
        for (int h : spec.hidden_dims) {
            s.hidden.push_back(init_linear(h, in, g));
            if (spec.batch_aware()) {
                BatchNormLayer bn;
                bn.gamma = Vec::Ones(h);
                bn.beta = Vec::Zero(h);
                bn.running_mean = Vec::Zero(h);
                bn.running_var = Vec::Ones(h);
                s.bn.push_back(std::move(bn));
            }
            in = h;
        }
    } else if (!spec.hidden_dims.empty()) {
        in = spec.hidden_dims.back();
    }
    s.head = init_linear(spec.q_latent, in, g);
    return s;
}

} // namespace detail

inline EncoderParams init_encoder(const EncoderSpec& spec, rng::Engine& g) {
    spec.validate();
    EncoderParams p;
    p.mean_stack = detail::init_stack(spec, g, true);
    p.var_stack = detail::init_stack(spec, g, !spec.shared_trunk);
    return p;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

namespace detail {

struct StackCache {
    std::vector<Mat> layer_in;   // input to each hidden linear
    std::vector<Mat> pre_bn;     // linear output
    std::vector<Mat> normalized; // (x - mu)/s before affine (BN layers)
    std::vector<Vec> batch_mean, batch_std;
    std::vector<Mat> pre_act;    // input to softplus
    Mat head_in;
    Mat head_out;
};

/// Runs one stack; train-mode BN consumes batch statistics and updates the
/// running ones in `params`.
inline Mat stack_forward(const EncoderSpec& spec, Stack& st, const Mat& input, Mode mode,
                         StackCache* cache) {
    Mat a = input;
    for (std::size_t li = 0; li < st.hidden.size(); ++li) {
        if (cache) cache->layer_in.push_back(a);
        Mat z = (a * st.hidden[li].W.transpose()).rowwise() + st.hidden[li].b.transpose();
        if (spec.batch_aware()) {
            if (cache) cache->pre_bn.push_back(z);
            BatchNormLayer& bn = st.bn[li];
            const auto b = static_cast<double>(z.rows());
            Vec mu, s;
            if (mode == Mode::train) {
                mu = z.colwise().mean();
                Vec var = ((z.rowwise() - mu.transpose()).array().square().colwise().sum() / b).matrix();
                s = (var.array() + BatchNormLayer::eps).sqrt();
                const double unbias = b > 1.0 ? b / (b - 1.0) : 1.0;
                bn.running_mean = (1.0 - BatchNormLayer::momentum) * bn.running_mean + BatchNormLayer::momentum * mu;
                bn.running_var =
                    (1.0 - BatchNormLayer::momentum) * bn.running_var + BatchNormLayer::momentum * (unbias * var);
            } else {
                mu = bn.running_mean;
                s = (bn.running_var.array() + BatchNormLayer::eps).sqrt();
            }
            Mat xhat = (z.rowwise() - mu.transpose()).array().rowwise() / s.transpose().array();
            if (cache) {
                cache->normalized.push_back(xhat);
                cache->batch_mean.push_back(mu);
                cache->batch_std.push_back(s);
            }
            z = (xhat.array().rowwise() * bn.gamma.transpose().array()).matrix().rowwise() + bn.beta.transpose();
        }
        if (cache) cache->pre_act.push_back(z);
        a = z.unaryExpr([](double v) { return softplus(v); });
    }
    if (cache) cache->head_in = a;
    Mat out = (a * st.head.W.transpose()).rowwise() + st.head.b.transpose();
    if (cache) cache->head_out = out;
    return out;
}

} // namespace detail

struct EncodeCache {
    Mat net_input;
    detail::StackCache mean_cache, var_cache;
    Mat raw_var; // pre-softplus variance head output
    Mode mode = Mode::eval;
};

/// rows: B x input_dim in the likelihood's processed representation
/// (log1p applied here); phi: B x D_covar one-hots (ignored by SimpleNN).
inline LatentPosterior encode(const EncoderSpec& spec, EncoderParams& params, const Mat& rows,
                              const Mat& phi, Mode mode, EncodeCache* cache = nullptr) {
    if (rows.cols() != spec.input_dim) throw ShapeMismatch("encode: row width != input_dim");
    Mat input(rows.rows(), spec.net_input_dim());
    input.leftCols(spec.input_dim) = rows.array().log1p();
    if (spec.batch_aware()) {
        if (phi.rows() != rows.rows() || phi.cols() != spec.d_covar)
            throw ShapeMismatch("encode: phi shape mismatch");
        input.rightCols(spec.d_covar) = phi;
    }
    if (cache) {
        *cache = EncodeCache{};
        cache->net_input = input;
        cache->mode = mode;
    }

    LatentPosterior post;
    detail::StackCache local_mean_cache;
    detail::StackCache* mc =
        cache ? &cache->mean_cache : (spec.shared_trunk ? &local_mean_cache : nullptr);
    post.mean = detail::stack_forward(spec, params.mean_stack, input, mode, mc);
    Mat raw;
    if (spec.shared_trunk) {
        raw = (mc->head_in * params.var_stack.head.W.transpose()).rowwise() +
              params.var_stack.head.b.transpose();
    } else {
        raw = detail::stack_forward(spec, params.var_stack, input, mode,
                                    cache ? &cache->var_cache : nullptr);
    }
    if (cache) cache->raw_var = raw;
    post.var = raw.unaryExpr([](double v) { return softplus(v) + 1e-6; });
    return post;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

namespace detail {

inline void stack_backward(const EncoderSpec& spec, const Stack& st, const StackCache& cache,
                           Mode mode, const Mat& d_head_out, Stack& grads,
                           const Mat* d_trunk_extra = nullptr) {
    Mat da = d_head_out * st.head.W;
    if (d_trunk_extra) da += *d_trunk_extra;
    grads.head.W += d_head_out.transpose() * cache.head_in;
    grads.head.b += d_head_out.colwise().sum();

    for (std::size_t li = st.hidden.size(); li-- > 0;) {
        // softplus activation
        Mat dz = (da.array() * cache.pre_act[li].unaryExpr([](double v) { return sigmoid(v); }).array()).matrix();
        if (spec.batch_aware()) {
            const BatchNormLayer& bn = st.bn[li];
            const Mat& xhat = cache.normalized[li];
            grads.bn[li].gamma += (dz.array() * xhat.array()).colwise().sum().matrix();
            grads.bn[li].beta += dz.colwise().sum();
            Mat dxhat = (dz.array().rowwise() * bn.gamma.transpose().array()).matrix();
            const Vec& s = cache.batch_std[li];
            if (mode == Mode::train) {
                const auto b = static_cast<double>(dz.rows());
                const Mat centered =
                    (cache.pre_bn[li].rowwise() - cache.batch_mean[li].transpose());
                const Vec inv_s = s.cwiseInverse();
                const Vec inv_s3 = inv_s.array().cube();
                Vec dvar = -0.5 * ((dxhat.array() * centered.array()).colwise().sum().transpose().array() *
                                   inv_s3.array())
                                      .matrix();
                Vec dmu = -(dxhat.array().rowwise() * inv_s.transpose().array()).colwise().sum().transpose();
                dmu -= (2.0 / b) * dvar.cwiseProduct(centered.colwise().sum().transpose());
                dz = (dxhat.array().rowwise() * inv_s.transpose().array()).matrix();
                dz += (2.0 / b) * (centered.array().rowwise() * dvar.transpose().array()).matrix();
                dz.rowwise() += (dmu / b).transpose();
            } else {
                dz = (dxhat.array().rowwise() * s.cwiseInverse().transpose().array()).matrix();
            }
        }
        grads.hidden[li].W += dz.transpose() * cache.layer_in[li];
        grads.hidden[li].b += dz.colwise().sum();
        if (li > 0) da = dz * st.hidden[li].W;
    }
}

} // namespace detail

/// Zero-valued gradient holder matching `params`' structure.
inline EncoderParams zero_like(const EncoderParams& params) {
    EncoderParams g = params;
    auto zero_stack = [](Stack& s) {
        for (auto& l : s.hidden) {
            l.W.setZero();
            l.b.setZero();
        }
        for (auto& bn : s.bn) {
            bn.gamma.setZero();
            bn.beta.setZero();
            bn.running_mean.setZero();
            bn.running_var.setZero();
        }
        s.head.W.setZero();
        s.head.b.setZero();
    };
    zero_stack(g.mean_stack);
    zero_stack(g.var_stack);
    return g;
}

/// Accumulates d loss/d params into `grads` given upstream d_mean, d_var
/// (gradients w.r.t. the posterior moments returned by encode()).
inline void encode_backward(const EncoderSpec& spec, const EncoderParams& params,
                            const EncodeCache& cache, const Mat& d_mean, const Mat& d_var,
                            EncoderParams& grads) {
    const Mat d_raw =
        (d_var.array() * cache.raw_var.unaryExpr([](double v) { return sigmoid(v); }).array()).matrix();
    if (spec.shared_trunk) {
        // both heads read the mean stack's trunk output
        grads.var_stack.head.W += d_raw.transpose() * cache.mean_cache.head_in;
        grads.var_stack.head.b += d_raw.colwise().sum();
        const Mat d_trunk_extra = d_raw * params.var_stack.head.W;
        detail::stack_backward(spec, params.mean_stack, cache.mean_cache, cache.mode, d_mean,
                               grads.mean_stack, &d_trunk_extra);
        return;
    }
    detail::stack_backward(spec, params.mean_stack, cache.mean_cache, cache.mode, d_mean,
                           grads.mean_stack);
    detail::stack_backward(spec, params.var_stack, cache.var_cache, cache.mode, d_raw,
                           grads.var_stack);
}

// ---------------------------------------------------------------------------
// Parameter visitation / gradient check
// ---------------------------------------------------------------------------

/// Visits every trainable scalar (weights, biases, BN affine; not running
/// stats) in a fixed order. fn(path, pointer).
template <typename F>
inline void visit_encoder_params(EncoderParams& p, F&& fn) {
    auto visit_stack = [&fn](Stack& s, const std::string& prefix) {
        for (std::size_t li = 0; li < s.hidden.size(); ++li) {
            const std::string base = prefix + ".hidden" + std::to_string(li);
            for (Eigen::Index i = 0; i < s.hidden[li].W.size(); ++i)
                fn(base + ".W", s.hidden[li].W.data() + i);
            for (Eigen::Index i = 0; i < s.hidden[li].b.size(); ++i)
                fn(base + ".b", s.hidden[li].b.data() + i);
            if (li < s.bn.size()) {
                for (Eigen::Index i = 0; i < s.bn[li].gamma.size(); ++i)
                    fn(base + ".bn_gamma", s.bn[li].gamma.data() + i);
                for (Eigen::Index i = 0; i < s.bn[li].beta.size(); ++i)
                    fn(base + ".bn_beta", s.bn[li].beta.data() + i);
            }
        }
        for (Eigen::Index i = 0; i < s.head.W.size(); ++i) fn(prefix + ".head.W", s.head.W.data() + i);
        for (Eigen::Index i = 0; i < s.head.b.size(); ++i) fn(prefix + ".head.b", s.head.b.data() + i);
    };
    visit_stack(p.mean_stack, "encoder.mean");
    visit_stack(p.var_stack, "encoder.var");
}

/// Backprop-vs-central-finite-difference check on the scalar test loss
/// sum(mean) + sum(var); returns the max relative error across weights.
inline double encoder_grad_check(const EncoderSpec& spec, EncoderParams params, const Mat& rows,
                                 const Mat& phi, Mode mode = Mode::eval) {
    EncodeCache cache;
    LatentPosterior post = encode(spec, params, rows, phi, mode, &cache);
    EncoderParams grads = zero_like(params);
    encode_backward(spec, params, cache, Mat::Ones(post.mean.rows(), post.mean.cols()),
                    Mat::Ones(post.var.rows(), post.var.cols()), grads);

    std::vector<double*> vals, grad_ptrs;
    visit_encoder_params(params, [&](const std::string&, double* ptr) { vals.push_back(ptr); });
    visit_encoder_params(grads, [&](const std::string&, double* ptr) { grad_ptrs.push_back(ptr); });

    auto loss = [&]() {
        LatentPosterior p2 = encode(spec, params, rows, phi, mode, nullptr);
        return p2.mean.sum() + p2.var.sum();
    };
    double max_rel = 0.0;
    const double h = 1e-6;
    for (std::size_t i = 0; i < vals.size(); ++i) {
        const double keep = *vals[i];
        *vals[i] = keep + h;
        const double up = loss();
        *vals[i] = keep - h;
        const double dn = loss();
        *vals[i] = keep;
        const double fd = (up - dn) / (2.0 * h);
        const double an = *grad_ptrs[i];
        const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1.0});
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

} // namespace scgplvm::enc
