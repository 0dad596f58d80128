// Command-line orchestration of simulate -> train -> export -> evaluate
// pipelines with JSON configs and reproducible seeds.
//
// Exit codes: 0 ok, 1 IO error, 2 config/validation error, 3 numerical
// failure.

#include "scgplvm/dataset.hpp"
#include "scgplvm/metrics.hpp"
#include "scgplvm/serialize.hpp"
#include "scgplvm/sha256.hpp"
#include "scgplvm/simulate.hpp"
#include "scgplvm/svgp.hpp"
#include "scgplvm/trainer.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace scgplvm;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitIo = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

std::string timestamp_utc() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void write_json_atomic(const Json& j, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw IoError("cannot write " + path);
        out << j.dump(2) << '\n';
    }
    fs::rename(tmp, path);
}

/// Run manifest written at start and rewritten (atomically) at completion.
struct Manifest {
    Json j;
    std::string path;

    Manifest(const std::string& command, const std::string& out_dir, const Json& config_echo,
             const std::vector<std::string>& inputs) {
        fs::create_directories(out_dir);
        path = out_dir + "/run_manifest.json";
        j["command"] = command;
        j["config"] = config_echo;
        j["started_at"] = timestamp_utc();
        j["status"] = "running";
        Json hashes = Json::object();
        for (const auto& in : inputs) hashes[in] = sha256::hash_file(in);
        j["input_sha256"] = std::move(hashes);
        write_json_atomic(j, path);
    }

    void finish(const std::vector<std::string>& outputs) {
        j["finished_at"] = timestamp_utc();
        j["status"] = "completed";
        j["outputs"] = outputs;
        write_json_atomic(j, path);
    }
};

Json metrics_to_json(const metrics::MetricsReport& r) {
    return Json{{"nmi", r.nmi},
                {"ari", r.ari},
                {"cell_asw", r.cell_asw},
                {"batch_asw", r.batch_asw},
                {"graph_connectivity", r.graph_connectivity},
                {"avg_bio", r.avg_bio},
                {"avg_batch", r.avg_batch},
                {"clustering_meta", Json{{"resolution", r.resolution},
                                         {"n_clusters", r.n_clusters},
                                         {"knn_k", r.knn_k},
                                         {"seed", r.seed}}}};
}

Json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config: " + path);
    try {
        return Json::parse(in);
    } catch (const Json::parse_error& e) {
        throw ParseError(std::string("bad JSON in ") + path + ": " + e.what());
    }
}

// --- simulate ---------------------------------------------------------------

int cmd_simulate(const std::string& config_path, sim::SimConfig cfg, bool apply_qc,
                 long qc_min_counts, long qc_min_cells, const std::string& format,
                 const std::string& out_dir) {
    if (!config_path.empty()) {
        const Json base = load_json_file(config_path);
        cfg = sim_config_from_json(base);
    }
    cfg.validate();
    Manifest manifest("simulate", out_dir, scgplvm::to_json(cfg),
                      config_path.empty() ? std::vector<std::string>{} : std::vector<std::string>{config_path});

    data::CountDataset ds = sim::simulate(cfg);
    if (apply_qc) ds = data::filter_qc(ds, qc_min_counts, qc_min_cells);

    std::vector<std::string> outputs;
    const std::string meta_path = out_dir + "/meta.csv";
    data::save_metadata_csv(ds, meta_path);
    outputs.push_back(meta_path);
    if (format == "csv") {
        const std::string counts_path = out_dir + "/counts.csv";
        data::save_counts_csv(ds, counts_path);
        outputs.push_back(counts_path);
    } else {
        const std::string counts_path = out_dir + "/counts.mtx";
        std::ofstream out(counts_path);
        if (!out) throw IoError("cannot write " + counts_path);
        out << "%%shape " << ds.n_cells() << ' ' << ds.n_genes() << '\n';
        for (Eigen::Index i = 0; i < ds.counts.rows(); ++i)
            for (Eigen::Index j = 0; j < ds.counts.cols(); ++j)
                if (ds.counts(i, j) != 0) out << i + 1 << ' ' << j + 1 << ' ' << ds.counts(i, j) << '\n';
        outputs.push_back(counts_path);
    }
    const std::string cfg_path = out_dir + "/sim_config.json";
    write_json_atomic(scgplvm::to_json(cfg), cfg_path);
    outputs.push_back(cfg_path);
    manifest.finish(outputs);
    std::printf("simulated %ld cells x %ld genes -> %s\n", static_cast<long>(ds.n_cells()),
                static_cast<long>(ds.n_genes()), out_dir.c_str());
    return kExitOk;
}

// --- train ------------------------------------------------------------------

int cmd_train(const std::string& data_path, const std::string& meta_path,
              const std::string& format, const std::string& preset_name,
              const std::string& config_path, train::TrainConfig cfg, const std::string& out_dir) {
    if (!config_path.empty()) cfg = train::train_config_from_json(load_json_file(config_path));
    cfg.validate();
    cfg.out_dir = out_dir;

    const train::Preset preset = train::preset_from_string(preset_name);
    Json config_echo = train::to_json(cfg);
    config_echo["preset"] = preset_name;
    config_echo["data"] = data_path;
    config_echo["meta"] = meta_path;

    const auto ds = data::load_dataset(
        data_path, meta_path, format == "csv" ? data::CountFormat::csv : data::CountFormat::mtx_triplet);

    const auto design_probe = data::one_hot_design(ds.batch_labels);
    const auto ps = train::ablation_presets(preset, cfg, static_cast<int>(design_probe.phi.cols()));
    config_echo["pipeline"] = ps.preproc == train::Preproc::library_normalize ? "library_normalize"
                              : ps.preproc == train::Preproc::log_gaussian    ? "log_gaussian"
                                                                              : "raw_counts";
    config_echo["kernel_spec"] = scgplvm::to_json(ps.kspec);
    config_echo["likelihood_spec"] = scgplvm::to_json(ps.lspec);
    Manifest manifest("train", out_dir, config_echo, {data_path, meta_path});

    auto pd = train::prepare_data(ds, ps, cfg);
    auto state = train::build_model(ds, pd, ps, cfg);
    const auto log = train::train(state, pd, cfg);

    std::vector<std::string> outputs;
    const std::string log_path = out_dir + "/trainlog.csv";
    log.write_csv(log_path);
    outputs.push_back(log_path);

    const auto lat = svgp::export_latents(state, pd.y, pd.design.phi);
    metrics::LatentEmbedding emb{lat.mean, lat.var};
    const std::string emb_path = out_dir + "/embedding.csv";
    metrics::save_embedding_csv(emb, ds.cell_ids, emb_path);
    outputs.push_back(emb_path);
    metrics::LatentEmbedding emb_var{lat.var, Mat()};
    const std::string var_path = out_dir + "/embedding_var.csv";
    metrics::save_embedding_csv(emb_var, ds.cell_ids, var_path);
    outputs.push_back(var_path);

    const std::string final_dir = out_dir + "/checkpoint_final";
    train::save_checkpoint(state, static_cast<long>(log.steps.size()), ds.n_cells(), final_dir);
    outputs.push_back(final_dir + "/model.json");
    outputs.push_back(final_dir + "/params.bin");

    manifest.finish(outputs);
    std::printf("trained %s: %d epochs, final mean epoch ELBO %.4f -> %s\n", preset_name.c_str(),
                cfg.epochs, log.epochs.back().mean_elbo, out_dir.c_str());
    return kExitOk;
}

// --- eval -------------------------------------------------------------------

int cmd_eval(const std::string& emb_path, const std::string& meta_path, int knn_k,
             double resolution, std::uint64_t seed, const std::string& out_dir) {
    Json config_echo{{"embedding", emb_path}, {"meta", meta_path}, {"knn", knn_k},
                     {"resolution", resolution}, {"seed", seed}};
    Manifest manifest("eval", out_dir, config_echo, {emb_path, meta_path});

    std::vector<std::string> cell_ids;
    const auto emb = metrics::load_embedding_csv(emb_path, &cell_ids);
    const auto meta = data::detail::load_metadata(meta_path);
    if (meta.size() != cell_ids.size())
        throw ShapeMismatch("metadata rows != embedding rows");
    std::vector<std::string> batches, celltypes;
    for (const auto& id : cell_ids) {
        const auto it = meta.find(id);
        if (it == meta.end()) throw ShapeMismatch("metadata missing cell_id: " + id);
        batches.push_back(it->second.batch);
        celltypes.push_back(it->second.celltype);
    }
    const auto rep = metrics::evaluate(emb, batches, celltypes, knn_k, resolution, seed);

    const std::string out_path = out_dir + "/metrics.json";
    write_json_atomic(metrics_to_json(rep), out_path);
    manifest.finish({out_path});
    std::printf("nmi=%.4f ari=%.4f cell_asw=%.4f batch_asw=%.4f graph_connectivity=%.4f\n",
                rep.nmi, rep.ari, rep.cell_asw, rep.batch_asw, rep.graph_connectivity);
    std::printf("avg_bio=%.4f avg_batch=%.4f (leiden resolution %.2f -> %d clusters)\n", rep.avg_bio,
                rep.avg_batch, rep.resolution, rep.n_clusters);
    return kExitOk;
}

// --- gradcheck ---------------------------------------------------------------

int cmd_gradcheck(const std::string& preset_name, int n_params, double tolerance) {
    sim::SimConfig sc;
    sc.n_cells_per_batch = 3;
    sc.n_genes = 3;
    sc.n_groups = 2;
    sc.n_batches = 2;
    sc.seed = 5;
    const auto ds = sim::simulate(sc);

    train::TrainConfig cfg;
    cfg.q_latent = 2;
    cfg.m_inducing = 2;
    cfg.hidden_dims = {4};
    cfg.nb_scale = 50.0;
    cfg.seed = 7;

    std::vector<std::string> presets;
    if (preset_name == "all")
        presets = {"proposed", "gaussian_likelihood", "linear_kernel", "learned_library"};
    else
        presets = {preset_name};

    bool ok = true;
    for (const auto& name : presets) {
        const auto ps = train::ablation_presets(train::preset_from_string(name), cfg, 2);
        auto pd = train::prepare_data(ds, ps, cfg);
        auto state = train::build_model(ds, pd, ps, cfg);
        const auto rep = train::gradcheck(state, pd, cfg, n_params);
        std::printf("%s:\n", name.c_str());
        for (const auto& [group, err] : rep.max_rel_error)
            std::printf("  %-24s max rel err %.3e\n", group.c_str(), err);
        std::printf("  overall %.3e (%s)\n", rep.overall, rep.overall < tolerance ? "ok" : "FAIL");
        ok = ok && rep.overall < tolerance;
    }
    return ok ? kExitOk : kExitNumerical;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Amortized stochastic-variational Bayesian GPLVM for over-dispersed count matrices"};
    app.require_subcommand(1);
    int threads = 0;
    app.add_option("--threads", threads, "worker threads (0 = all cores; 1 = bit-deterministic)");

    // simulate
    auto* sim_cmd = app.add_subcommand("simulate", "generate a synthetic count dataset");
    std::string sim_config, sim_out, sim_format = "csv";
    sim::SimConfig sc;
    bool sim_qc = false;
    long qc_min_counts = 200, qc_min_cells = 3;
    sim_cmd->add_option("--config", sim_config, "SimConfig JSON (flags override nothing once set)");
    sim_cmd->add_option("--cells-per-batch", sc.n_cells_per_batch, "cells per batch");
    sim_cmd->add_option("--genes", sc.n_genes, "number of genes");
    sim_cmd->add_option("--groups", sc.n_groups, "number of cell types");
    sim_cmd->add_option("--batches", sc.n_batches, "number of batches");
    sim_cmd->add_option("--mean-shape", sc.mean_shape, "gene mean Gamma shape");
    sim_cmd->add_option("--mean-rate", sc.mean_rate, "gene mean Gamma rate");
    sim_cmd->add_option("--de-prob", sc.de_prob, "per-group DE probability");
    sim_cmd->add_option("--de-logfc-sigma", sc.de_logfc_sigma, "DE log-fold-change sigma");
    sim_cmd->add_option("--batch-logfc-sigma", sc.batch_logfc_sigma, "batch log-fold-change sigma");
    sim_cmd->add_option("--lib-loc", sc.lib_loc, "library log-normal location");
    sim_cmd->add_option("--lib-scale", sc.lib_scale, "library log-normal scale");
    sim_cmd->add_option("--seed", sc.seed, "simulation seed");
    sim_cmd->add_flag("--qc", sim_qc, "apply QC filtering after simulation");
    sim_cmd->add_option("--qc-min-counts", qc_min_counts, "QC min total counts per cell");
    sim_cmd->add_option("--qc-min-cells", qc_min_cells, "QC min cells per gene");
    sim_cmd->add_option("--format", sim_format, "counts format: csv | mtx")
        ->check(CLI::IsMember({"csv", "mtx"}));
    sim_cmd->add_option("--out", sim_out, "output directory")->required();

    // train
    auto* train_cmd = app.add_subcommand("train", "train a model on a count dataset");
    std::string tr_data, tr_meta, tr_format = "csv", tr_preset = "proposed", tr_config, tr_out;
    train::TrainConfig tc;
    train_cmd->add_option("--data", tr_data, "counts file")->required();
    train_cmd->add_option("--meta", tr_meta, "metadata CSV")->required();
    train_cmd->add_option("--format", tr_format, "counts format: csv | mtx")
        ->check(CLI::IsMember({"csv", "mtx"}));
    train_cmd->add_option("--preset", tr_preset,
                          "proposed | simple_nn | gaussian_likelihood | linear_kernel | learned_library");
    train_cmd->add_option("--config", tr_config, "TrainConfig JSON (flags below override)");
    train_cmd->add_option("--epochs", tc.epochs, "training epochs");
    train_cmd->add_option("--batch-size", tc.batch_size, "mini-batch size");
    train_cmd->add_option("--lr", tc.lr, "Adam learning rate");
    train_cmd->add_option("--seed", tc.seed, "training seed");
    train_cmd->add_option("--q-latent", tc.q_latent, "latent dimension Q");
    train_cmd->add_option("--n-mc", tc.n_mc, "MC samples per step");
    train_cmd->add_option("--m-inducing", tc.m_inducing, "inducing point count M");
    train_cmd->add_option("--nb-scale", tc.nb_scale, "NB scale (library target)");
    train_cmd->add_option("--nb-dispersion", tc.nb_dispersion, "NB inverse dispersion r");
    train_cmd->add_option("--checkpoint-every", tc.checkpoint_every, "checkpoint period (epochs)");
    train_cmd->add_option("--out", tr_out, "output directory")->required();

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "evaluate an embedding against labels");
    std::string ev_emb, ev_meta, ev_out;
    int ev_knn = 15;
    double ev_res = 1.0;
    std::uint64_t ev_seed = 0;
    eval_cmd->add_option("--embedding", ev_emb, "embedding CSV")->required();
    eval_cmd->add_option("--meta", ev_meta, "metadata CSV")->required();
    eval_cmd->add_option("--knn", ev_knn, "kNN graph neighbors");
    eval_cmd->add_option("--resolution", ev_res, "Leiden resolution");
    eval_cmd->add_option("--seed", ev_seed, "Leiden seed");
    eval_cmd->add_option("--out", ev_out, "output directory")->required();

    // gradcheck
    auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient check on a toy model");
    std::string gc_preset = "all";
    int gc_n = 6;
    double gc_tol = 1e-3;
    gc_cmd->add_option("--preset", gc_preset, "preset or 'all'");
    gc_cmd->add_option("--n-params", gc_n, "sampled coordinates per group");
    gc_cmd->add_option("--tolerance", gc_tol, "max relative error allowed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    threading::set_thread_count(threads > 0 ? threads
                                            : static_cast<int>(std::thread::hardware_concurrency()));
    try {
        if (sim_cmd->parsed())
            return cmd_simulate(sim_config, sc, sim_qc, qc_min_counts, qc_min_cells, sim_format, sim_out);
        if (train_cmd->parsed())
            return cmd_train(tr_data, tr_meta, tr_format, tr_preset, tr_config, tc, tr_out);
        if (eval_cmd->parsed()) return cmd_eval(ev_emb, ev_meta, ev_knn, ev_res, ev_seed, ev_out);
        if (gc_cmd->parsed()) return cmd_gradcheck(gc_preset, gc_n, gc_tol);
    } catch (const NonFiniteLoss& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const NotPositiveDefinite& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << '\n';
        return kExitIo;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "io error: " << e.what() << '\n';
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitConfig;
    }
    return kExitOk;
}
