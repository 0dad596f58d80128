#include "scgplvm/likelihoods.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace scgplvm;
using lik::LikelihoodForm;

TEST_CASE("nb_logpmf closed forms") {
    // y = 0 reduces to r log(r/(r+mu)) exactly
    for (double mu : {0.5, 3.0, 42.0})
        for (double r : {2.0, 1e6})
            CHECK(lik::nb_logpmf(0.0, mu, r) == Catch::Approx(r * std::log(r / (r + mu))).epsilon(1e-12));

    // hand arithmetic: y=2, mu=3, r=2 -> log 3 + 2 log(2/5) + 2 log(3/5)
    const double hand = std::log(3.0) + 2.0 * std::log(0.4) + 2.0 * std::log(0.6);
    CHECK(hand == Catch::Approx(-1.7556204).margin(1e-6));
    CHECK(lik::nb_logpmf(2.0, 3.0, 2.0) == Catch::Approx(hand).epsilon(1e-12));

    // near-Poisson at r = 1e6
    CHECK(lik::nb_logpmf(1.0, 1.0, 1e6) == Catch::Approx(-1.0).margin(1e-5));

    CHECK_THROWS_AS(lik::nb_logpmf(1.0, 0.0, 2.0), DomainError);
    CHECK_THROWS_AS(lik::nb_logpmf(1.0, -1.0, 2.0), DomainError);
}

TEST_CASE("nb_logpmf normalizes over the support") {
    for (double mu : {0.5, 5.0, 50.0}) {
        for (double r : {2.0, 1e6}) {
            const double ymax = mu + 20.0 * std::sqrt(mu + mu * mu / r);
            double total = 0.0;
            for (long y = 0; y <= static_cast<long>(ymax); ++y)
                total += std::exp(lik::nb_logpmf(static_cast<double>(y), mu, r));
            REQUIRE(total >= 1.0 - 1e-8);
            REQUIRE(total <= 1.0 + 1e-8);
        }
    }
}

TEST_CASE("nb sampler moments") {
    rng::Engine g(99);
    const double mu = 7.0, r = 3.0;
    const long n = 100000;
    double s = 0, s2 = 0, s4 = 0;
    std::vector<double> xs(n);
    for (long i = 0; i < n; ++i) {
        const double x = static_cast<double>(lik::nb_sample(g, mu, r));
        xs[static_cast<std::size_t>(i)] = x;
        s += x;
    }
    const double mean = s / n;
    for (double x : xs) {
        const double d = x - mean;
        s2 += d * d;
        s4 += d * d * d * d;
    }
    const double var = s2 / (n - 1);
    const double expect_var = mu + mu * mu / r;
    const double se_mean = std::sqrt(expect_var / n);
    CHECK(std::abs(mean - mu) < 3.0 * se_mean);
    const double m4 = s4 / n;
    const double se_var = std::sqrt(std::max(m4 - var * var, 0.0) / n);
    CHECK(std::abs(var - expect_var) < 3.0 * se_var);
}

TEST_CASE("softmax_link") {
    // uniform input -> scale/D each
    Vec f = Vec::Constant(4, 2.5);
    const Vec mu = lik::softmax_link(f, 5000.0);
    for (int j = 0; j < 4; ++j) CHECK(mu[j] == Catch::Approx(1250.0));

    // shift invariance
    Vec f2(3);
    f2 << 0.3, -1.2, 2.0;
    const Vec a = lik::softmax_link(f2, 5000.0);
    const Vec b = lik::softmax_link((f2.array() + 17.0).matrix(), 5000.0);
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-9);

    // hand values: f = (log 1, log 3) -> (1250, 3750)
    Vec f3(2);
    f3 << std::log(1.0), std::log(3.0);
    const Vec c = lik::softmax_link(f3, 5000.0);
    CHECK(c[0] == Catch::Approx(1250.0));
    CHECK(c[1] == Catch::Approx(3750.0));

    // strictly positive, sums to scale
    rng::Engine g(7);
    for (int rep = 0; rep < 30; ++rep) {
        Vec fr = Vec::NullaryExpr(20, [&](Eigen::Index) { return 5.0 * rng::normal(g); });
        const Vec m = lik::softmax_link(fr, 5000.0);
        CHECK((m.array() > 0.0).all());
        CHECK(std::abs(m.sum() - 5000.0) / 5000.0 < 1e-9);
    }
}

TEST_CASE("loglik_row forms and pipeline checks") {
    lik::LikelihoodSpec gauss;
    gauss.form = LikelihoodForm::Gaussian;
    gauss.sigma_y2 = 0.7;
    Vec y(3), f(3);
    y << 0.1, -0.5, 2.0;
    f = y;
    // zero residual -> -(D/2) log(2 pi sigma^2)
    CHECK(lik::loglik_row(gauss, y, f, lik::ObsTag::LogGaussian) ==
          Catch::Approx(-1.5 * std::log(2.0 * M_PI * 0.7)));
    CHECK_THROWS_AS(lik::loglik_row(gauss, y, f, lik::ObsTag::LibraryNormalized), PipelineMismatch);

    // ApproxPoisson at softmax-matched means equals the sum of nb_logpmf terms
    lik::LikelihoodSpec ap;
    ap.form = LikelihoodForm::ApproxPoisson;
    ap.nb_scale = 5000.0;
    ap.nb_dispersion = 1e6;
    Vec y2(2), f2(2);
    y2 << 1250.0, 3750.0;
    f2 << std::log(1.0), std::log(3.0);
    const double expect = lik::nb_logpmf(1250.0, 1250.0, 1e6) + lik::nb_logpmf(3750.0, 3750.0, 1e6);
    CHECK(lik::loglik_row(ap, y2, f2, lik::ObsTag::LibraryNormalized) == Catch::Approx(expect).epsilon(1e-12));
    CHECK_THROWS_AS(lik::loglik_row(ap, y2, f2, lik::ObsTag::RawCounts), PipelineMismatch);

    // NBLearnedScale with log_scale = log(nb_scale) matches ApproxPoisson
    lik::LikelihoodSpec nbl = ap;
    nbl.form = LikelihoodForm::NBLearnedScale;
    CHECK(lik::loglik_row(nbl, y2, f2, lik::ObsTag::RawCounts, std::log(5000.0)) ==
          Catch::Approx(lik::loglik_row(ap, y2, f2, lik::ObsTag::LibraryNormalized)).epsilon(1e-12));
}

TEST_CASE("loglik_row gradients match finite differences") {
    rng::Engine g(13);
    const double h = 1e-6;
    for (int form = 0; form < 3; ++form) {
        lik::LikelihoodSpec spec;
        lik::ObsTag tag;
        if (form == 0) {
            spec.form = LikelihoodForm::Gaussian;
            spec.sigma_y2 = 0.8;
            tag = lik::ObsTag::LogGaussian;
        } else if (form == 1) {
            spec.form = LikelihoodForm::ApproxPoisson;
            spec.nb_scale = 100.0;
            spec.nb_dispersion = 50.0;
            tag = lik::ObsTag::LibraryNormalized;
        } else {
            spec.form = LikelihoodForm::NBLearnedScale;
            spec.nb_dispersion = 50.0;
            tag = lik::ObsTag::RawCounts;
        }
        for (int rep = 0; rep < 5; ++rep) {
            const int d = 6;
            Vec y = Vec::NullaryExpr(d, [&](Eigen::Index) {
                return form == 0 ? rng::normal(g) : std::floor(20.0 * rng::uniform(g));
            });
            Vec f = Vec::NullaryExpr(d, [&](Eigen::Index) { return rng::normal(g); });
            const double ls = std::log(60.0);
            const auto grad = lik::loglik_row_grad(spec, y, f, tag, ls);
            for (int j = 0; j < d; ++j) {
                Vec fp = f, fm = f;
                fp[j] += h;
                fm[j] -= h;
                const double fd = (lik::loglik_row(spec, y, fp, tag, ls) -
                                   lik::loglik_row(spec, y, fm, tag, ls)) / (2 * h);
                REQUIRE(std::abs(grad.d_f[j] - fd) / std::max({std::abs(fd), std::abs(grad.d_f[j]), 1.0}) < 1e-6);
            }
            if (spec.form == LikelihoodForm::Gaussian) {
                auto sp = spec, sm = spec;
                sp.sigma_y2 += h;
                sm.sigma_y2 -= h;
                const double fd = (lik::loglik_row(sp, y, f, tag) - lik::loglik_row(sm, y, f, tag)) / (2 * h);
                REQUIRE(std::abs(grad.d_sigma_y2 - fd) / std::max(std::abs(fd), 1.0) < 1e-5);
            }
            if (spec.form == LikelihoodForm::NBLearnedScale) {
                const double fd = (lik::loglik_row(spec, y, f, tag, ls + h) -
                                   lik::loglik_row(spec, y, f, tag, ls - h)) / (2 * h);
                REQUIRE(std::abs(grad.d_log_scale - fd) / std::max(std::abs(fd), 1.0) < 1e-6);
            }
        }
    }
}

TEST_CASE("nb_poisson_limit_check") {
    // deviations strictly decreasing in r
    const auto rep = lik::nb_poisson_limit_check(5.0, 5);
    CHECK(rep.monotone_decreasing);

    // y = 0: deviation = |r log(r/(r+mu)) + mu| -> 0 for large r
    const auto rep0 = lik::nb_poisson_limit_check(2.0, 0);
    CHECK(rep0.deviations[2] < 1e-5);
    CHECK(rep0.deviations[2] ==
          Catch::Approx(std::abs(1e6 * std::log(1e6 / (1e6 + 2.0)) + 2.0)).epsilon(1e-6));

    // small mu, larger count
    const auto rep2 = lik::nb_poisson_limit_check(0.1, 3);
    CHECK(rep2.deviations[2] < 1e-5);
}
