#pragma once

#include "scgplvm/encoder.hpp"
#include "scgplvm/kernels.hpp"
#include "scgplvm/likelihoods.hpp"
#include "scgplvm/simulate.hpp"

#include <json.hpp>

#include <string>

/// @file serialize.hpp
/// JSON (de)serialization for the spec/config types used by training
/// configs, checkpoints and CLI manifests.

namespace scgplvm {

using Json = nlohmann::json;

// --- kernel ---

inline Json to_json(const kernel::KernelSpec& s) {
    return Json{{"form", kernel::to_string(s.form)},
                {"q_latent", s.q_latent},
                {"d_covar", s.d_covar},
                {"se_excludes_periodic_dim", s.se_excludes_periodic_dim}};
}

inline kernel::KernelSpec kernel_spec_from_json(const Json& j) {
    kernel::KernelSpec s;
    const std::string form = j.at("form").get<std::string>();
    if (form == "seard_plus_linear") s.form = kernel::KernelForm::SEARD_plus_Linear;
    else if (form == "perseard_plus_linear") s.form = kernel::KernelForm::PerSEARD_plus_Linear;
    else if (form == "augmented_linear") s.form = kernel::KernelForm::AugmentedLinear;
    else throw ParseError("unknown kernel form: " + form);
    s.q_latent = j.at("q_latent").get<int>();
    s.d_covar = j.at("d_covar").get<int>();
    s.se_excludes_periodic_dim = j.value("se_excludes_periodic_dim", false);
    return s;
}

// --- likelihood ---

inline Json to_json(const lik::LikelihoodSpec& s) {
    return Json{{"form", lik::to_string(s.form)},
                {"sigma_y2", s.sigma_y2},
                {"nb_scale", s.nb_scale},
                {"nb_dispersion", s.nb_dispersion}};
}

inline lik::LikelihoodSpec likelihood_spec_from_json(const Json& j) {
    lik::LikelihoodSpec s;
    const std::string form = j.at("form").get<std::string>();
    if (form == "gaussian") s.form = lik::LikelihoodForm::Gaussian;
    else if (form == "approx_poisson") s.form = lik::LikelihoodForm::ApproxPoisson;
    else if (form == "nb_learned_scale") s.form = lik::LikelihoodForm::NBLearnedScale;
    else throw ParseError("unknown likelihood form: " + form);
    s.sigma_y2 = j.value("sigma_y2", 1.0);
    s.nb_scale = j.value("nb_scale", 5000.0);
    s.nb_dispersion = j.value("nb_dispersion", 1e6);
    s.validate();
    return s;
}

// --- encoder ---

inline Json to_json(const enc::EncoderSpec& s) {
    return Json{{"form", enc::to_string(s.form)},
                {"input_dim", s.input_dim},
                {"hidden_dims", s.hidden_dims},
                {"q_latent", s.q_latent},
                {"d_covar", s.d_covar},
                {"shared_trunk", s.shared_trunk}};
}

inline enc::EncoderSpec encoder_spec_from_json(const Json& j) {
    enc::EncoderSpec s;
    const std::string form = j.at("form").get<std::string>();
    if (form == "simple_nn") s.form = enc::EncoderForm::SimpleNN;
    else if (form == "batch_aware_nn") s.form = enc::EncoderForm::BatchAwareNN;
    else throw ParseError("unknown encoder form: " + form);
    s.input_dim = j.at("input_dim").get<int>();
    s.hidden_dims = j.at("hidden_dims").get<std::vector<int>>();
    s.q_latent = j.at("q_latent").get<int>();
    s.d_covar = j.value("d_covar", 0);
    s.shared_trunk = j.value("shared_trunk", false);
    return s;
}

// --- simulation ---

inline Json to_json(const sim::SimConfig& c) {
    return Json{{"n_cells_per_batch", c.n_cells_per_batch},
                {"n_genes", c.n_genes},
                {"n_groups", c.n_groups},
                {"n_batches", c.n_batches},
                {"mean_shape", c.mean_shape},
                {"mean_rate", c.mean_rate},
                {"de_prob", c.de_prob},
                {"de_logfc_sigma", c.de_logfc_sigma},
                {"batch_logfc_sigma", c.batch_logfc_sigma},
                {"lib_loc", c.lib_loc},
                {"lib_scale", c.lib_scale},
                {"seed", c.seed}};
}

inline sim::SimConfig sim_config_from_json(const Json& j) {
    sim::SimConfig c;
    c.n_cells_per_batch = j.value("n_cells_per_batch", c.n_cells_per_batch);
    c.n_genes = j.value("n_genes", c.n_genes);
    c.n_groups = j.value("n_groups", c.n_groups);
    c.n_batches = j.value("n_batches", c.n_batches);
    c.mean_shape = j.value("mean_shape", c.mean_shape);
    c.mean_rate = j.value("mean_rate", c.mean_rate);
    c.de_prob = j.value("de_prob", c.de_prob);
    c.de_logfc_sigma = j.value("de_logfc_sigma", c.de_logfc_sigma);
    c.batch_logfc_sigma = j.value("batch_logfc_sigma", c.batch_logfc_sigma);
    c.lib_loc = j.value("lib_loc", c.lib_loc);
    c.lib_scale = j.value("lib_scale", c.lib_scale);
    c.seed = j.value("seed", c.seed);
    return c;
}

} // namespace scgplvm
