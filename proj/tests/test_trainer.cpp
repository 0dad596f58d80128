#include "scgplvm/trainer.hpp"
#include "scgplvm/metrics.hpp"
#include "scgplvm/simulate.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

using namespace scgplvm;
namespace fs = std::filesystem;

namespace {

data::CountDataset tiny_dataset(std::uint64_t seed = 3, long cells_per_batch = 30, long genes = 12) {
    sim::SimConfig cfg;
    cfg.n_cells_per_batch = cells_per_batch;
    cfg.n_genes = genes;
    cfg.n_groups = 2;
    cfg.n_batches = 2;
    cfg.seed = seed;
    return data::filter_qc(sim::simulate(cfg), 1, 0);
}

train::TrainConfig tiny_config() {
    train::TrainConfig cfg;
    cfg.batch_size = 16;
    cfg.epochs = 2;
    cfg.q_latent = 2;
    cfg.m_inducing = 3;
    cfg.hidden_dims = {6};
    cfg.nb_scale = 100.0;
    cfg.lr = 0.02;
    return cfg;
}

} // namespace

TEST_CASE("adam matches the hand-computed reference update") {
    // one parameter, gradients g1 = 0.3, g2 = -0.1, lr = 0.1
    train::TrainConfig cfg;
    cfg.lr = 0.1;
    train::Adam adam(1, cfg);
    double theta = 1.0, grad = 0.3;
    std::vector<double*> ps{&theta}, gs{&grad};

    // step 1 by hand
    double m = 0.1 * 0.3, v = 0.001 * 0.3 * 0.3;
    double mhat = m / (1.0 - 0.9), vhat = v / (1.0 - 0.999);
    double expect = 1.0 - 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
    adam.step(ps, gs);
    REQUIRE(theta == Catch::Approx(expect).margin(1e-12));

    // step 2 by hand
    grad = -0.1;
    m = 0.9 * m + 0.1 * (-0.1);
    v = 0.999 * v + 0.001 * 0.01;
    mhat = m / (1.0 - 0.9 * 0.9);
    vhat = v / (1.0 - 0.999 * 0.999);
    expect = expect - 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
    adam.step(ps, gs);
    REQUIRE(theta == Catch::Approx(expect).margin(1e-12));
}

TEST_CASE("lr = 0 leaves parameters bit-identical") {
    const auto ds = tiny_dataset();
    auto cfg = tiny_config();
    cfg.lr = 0.0;
    const auto ps = train::ablation_presets(train::Preset::proposed, cfg, 2);
    const auto pd = train::prepare_data(ds, ps, cfg);
    auto state = train::build_model(ds, pd, ps, cfg);

    std::vector<double> before;
    svgp::visit_trainables(state, [&](svgp::Group, double* p) { before.push_back(*p); });
    train::train(state, pd, cfg);
    std::size_t i = 0;
    bool identical = true;
    svgp::visit_trainables(state, [&](svgp::Group, double* p) { identical = identical && (*p == before[i++]); });
    CHECK(identical);
}

TEST_CASE("training is deterministic given the seed") {
    const auto ds = tiny_dataset();
    auto cfg = tiny_config();
    cfg.seed = 42;
    const auto ps = train::ablation_presets(train::Preset::proposed, cfg, 2);
    const auto pd = train::prepare_data(ds, ps, cfg);

    auto s1 = train::build_model(ds, pd, ps, cfg);
    const auto log1 = train::train(s1, pd, cfg);
    auto s2 = train::build_model(ds, pd, ps, cfg);
    const auto log2 = train::train(s2, pd, cfg);
    REQUIRE(log1.steps.size() == log2.steps.size());
    for (std::size_t i = 0; i < log1.steps.size(); ++i)
        REQUIRE(log1.steps[i].elbo == log2.steps[i].elbo);
}

TEST_CASE("each epoch is a permutation over cells") {
    rng::Engine g = train::detail::epoch_stream(7, 3);
    const auto perm = rng::permutation(g, 100);
    std::vector<char> seen(100, 0);
    for (auto p : perm) {
        REQUIRE(p < 100);
        REQUIRE(!seen[p]);
        seen[p] = 1;
    }
}

TEST_CASE("training improves the elbo on a small simulation") {
    sim::SimConfig sc;
    sc.n_cells_per_batch = 60;
    sc.n_genes = 30;
    sc.n_groups = 2;
    sc.seed = 5;
    const auto ds = data::filter_qc(sim::simulate(sc), 1, 0);
    auto cfg = tiny_config();
    cfg.epochs = 12;
    cfg.lr = 0.05;
    const auto ps = train::ablation_presets(train::Preset::proposed, cfg, 2);
    const auto pd = train::prepare_data(ds, ps, cfg);
    auto state = train::build_model(ds, pd, ps, cfg);
    const auto log = train::train(state, pd, cfg);
    CHECK(log.epochs.back().mean_elbo > log.epochs.front().mean_elbo);
}

TEST_CASE("ablation presets switch one component at a time") {
    const auto cfg = tiny_config();
    const auto base = train::ablation_presets(train::Preset::proposed, cfg, 3);
    CHECK(base.kspec.form == kernel::KernelForm::SEARD_plus_Linear);
    CHECK(base.lspec.form == lik::LikelihoodForm::ApproxPoisson);
    CHECK(base.espec.form == enc::EncoderForm::BatchAwareNN);
    CHECK(base.preproc == train::Preproc::library_normalize);

    const auto snn = train::ablation_presets(train::Preset::simple_nn, cfg, 3);
    CHECK(snn.espec.form == enc::EncoderForm::SimpleNN);
    CHECK(snn.kspec.form == base.kspec.form);
    CHECK(snn.lspec.form == base.lspec.form);

    const auto gau = train::ablation_presets(train::Preset::gaussian_likelihood, cfg, 3);
    CHECK(gau.lspec.form == lik::LikelihoodForm::Gaussian);
    CHECK(gau.preproc == train::Preproc::log_gaussian);
    CHECK(gau.espec.form == base.espec.form);

    const auto lin = train::ablation_presets(train::Preset::linear_kernel, cfg, 3);
    CHECK(lin.kspec.form == kernel::KernelForm::AugmentedLinear);
    CHECK(lin.lspec.form == base.lspec.form);

    const auto ll = train::ablation_presets(train::Preset::learned_library, cfg, 3);
    CHECK(ll.lspec.form == lik::LikelihoodForm::NBLearnedScale);
    CHECK(ll.preproc == train::Preproc::raw_counts);

    CHECK_THROWS_AS(train::preset_from_string("bogus"), UnknownPreset);
}

TEST_CASE("checkpoint round trip reproduces the elbo exactly") {
    const auto ds = tiny_dataset(11);
    auto cfg = tiny_config();
    cfg.epochs = 1;
    const auto ps = train::ablation_presets(train::Preset::proposed, cfg, 2);
    const auto pd = train::prepare_data(ds, ps, cfg);
    auto state = train::build_model(ds, pd, ps, cfg);
    train::train(state, pd, cfg);

    const auto dir = (fs::temp_directory_path() / "scgplvm_ckpt_test").string();
    fs::remove_all(dir);
    train::save_checkpoint(state, 99, ds.n_cells(), dir);
    long step = 0;
    auto loaded = train::load_checkpoint(dir, &step);
    CHECK(step == 99);

    // frozen batch: identical ELBO to the bit
    svgp::MiniBatch mb;
    mb.y = pd.y.topRows(8);
    mb.phi = pd.design.phi.topRows(8);
    mb.tag = pd.tag;
    for (long i = 0; i < 8; ++i) mb.cell_index.push_back(i);
    rng::Engine g1(5), g2(5);
    const double a = svgp::elbo_minibatch(state, mb, ds.n_cells(), 2, g1, enc::Mode::eval).elbo;
    const double b = svgp::elbo_minibatch(loaded, mb, ds.n_cells(), 2, g2, enc::Mode::eval).elbo;
    REQUIRE(a == Catch::Approx(b).margin(1e-12));
    fs::remove_all(dir);
}

TEST_CASE("gradcheck across presets on toy dims") {
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
    for (auto preset : {train::Preset::proposed, train::Preset::gaussian_likelihood,
                        train::Preset::linear_kernel, train::Preset::learned_library}) {
        const auto ps = train::ablation_presets(preset, cfg, 2);
        const auto pd = train::prepare_data(ds, ps, cfg);
        auto state = train::build_model(ds, pd, ps, cfg);
        const auto rep = train::gradcheck(state, pd, cfg, 4);
        INFO("preset " << train::to_string(preset));
        CHECK(rep.overall < 1e-3);
    }
}

TEST_CASE("non-finite loss aborts with diagnostics") {
    const auto ds = tiny_dataset(13);
    auto cfg = tiny_config();
    cfg.lr = 1e9; // blow the parameters up immediately
    cfg.epochs = 30;
    const auto ps = train::ablation_presets(train::Preset::proposed, cfg, 2);
    const auto pd = train::prepare_data(ds, ps, cfg);
    auto state = train::build_model(ds, pd, ps, cfg);
    CHECK_THROWS_AS(train::train(state, pd, cfg), NonFiniteLoss);
}

TEST_CASE("pipeline mismatch is rejected at train time") {
    const auto ds = tiny_dataset(17);
    auto cfg = tiny_config();
    const auto ps = train::ablation_presets(train::Preset::proposed, cfg, 2);
    auto pd = train::prepare_data(ds, ps, cfg);
    pd.tag = lik::ObsTag::LogGaussian; // contradicts ApproxPoisson
    auto state = train::build_model(ds, pd, ps, cfg);
    CHECK_THROWS_AS(train::train(state, pd, cfg), PipelineMismatch);
}
