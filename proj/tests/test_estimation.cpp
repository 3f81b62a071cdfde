#include "fixtures.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace csm;

namespace {

CountSeries constant_half_series() {
    std::vector<std::vector<std::uint64_t>> rows(10, {500, 500});
    return CountSeries::from_rows(rows);
}

double max_simplex_violation(const CsmFit& fit) {
    double worst = 0.0;
    double s = 0.0;
    for (double v : fit.initial) {
        worst = std::max(worst, -v);
        s += v;
    }
    worst = std::max(worst, std::abs(s - 1.0));
    for (std::size_t c = 0; c < fit.kernel.n_conditions(); ++c) {
        double cs = 0.0;
        for (double v : fit.kernel.column(c)) {
            worst = std::max(worst, -v);
            cs += v;
        }
        worst = std::max(worst, std::abs(cs - 1.0));
    }
    return worst;
}

double gradient_error(const CsmObjective& obj, std::mt19937_64& rng) {
    const auto start = detail::random_start(obj.n_categories(), obj.memory(), rng());
    const auto layout = obj.layout_for(start.first, start.second);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> x(layout.n_free());
    for (double& v : x) v = normal(rng);
    const auto [value, grad] = obj.value_and_gradient(layout, x);
    EXPECT_NEAR(value, obj.value(layout, x), 1e-9 * std::max(1.0, std::abs(value)));
    const auto fd = oracle::central_difference([&](const std::vector<double>& y) { return obj.value(layout, y); }, x);
    double diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        diff = std::max(diff, std::abs(grad[i] - fd[i]));
        scale = std::max(scale, std::abs(grad[i]));
    }
    return diff / std::max(scale, 1e-300);
}

TrajectorySet gapped_panel(std::mt19937_64& rng, std::size_t n, std::size_t q, int horizon) {
    std::vector<Trajectory> trs;
    for (std::size_t i = 0; i < q; ++i) {
        Trajectory tr{std::to_string(i), {}, {}};
        for (int t = static_cast<int>(rng() % 3); t < horizon; ++t)
            if (rng() % 4 != 0) {
                tr.times.push_back(t);
                tr.categories.push_back(static_cast<int>(rng() % n));
            }
        if (tr.times.empty()) {
            tr.times.push_back(0);
            tr.categories.push_back(0);
        }
        trs.push_back(tr);
    }
    return TrajectorySet(n, trs);
}

CountSeries random_series(std::mt19937_64& rng, std::size_t n, std::size_t horizon) {
    CountSeries c(n, horizon);
    for (std::size_t t = 0; t < horizon; ++t)
        for (std::size_t k = 0; k < n; ++k) c.set(t, k, 1 + rng() % 200);
    return c;
}

}  // namespace

TEST(Dof, TableValues) {
    EXPECT_EQ(dof(3, 0), 8u);
    EXPECT_EQ(dof(3, 1), 26u);
    EXPECT_EQ(dof(3, 2), 80u);
    const std::size_t two[] = {3, 7, 15, 31, 63, 127};
    for (std::size_t lam = 0; lam < 6; ++lam) EXPECT_EQ(dof(2, lam), two[lam]);
    EXPECT_EQ(mlr_dof(3), 4u);
    EXPECT_EQ(mlr_dof(2), 2u);
    // one free initial coordinate plus two free kernel coordinates
    EXPECT_EQ(dof(2, 0), (2u - 1u) + 2u * (2u - 1u));
}

TEST(SimplexLayout, EncodeDecodeRoundTrip) {
    const std::vector<double> probs{0.2, 0.5, 0.3, 0.9, 0.1};
    const SimplexLayout layout({3, 2}, probs);
    EXPECT_EQ(layout.blocks()[0].reference, 1u);
    EXPECT_EQ(layout.blocks()[1].reference, 0u);
    const auto x = layout.encode(probs);
    ASSERT_EQ(x.size(), 3u);
    const auto back = layout.decode<double>(x);
    for (std::size_t i = 0; i < probs.size(); ++i) EXPECT_NEAR(back[i], probs[i], 1e-15);
    // huge coordinates stay finite
    const auto extreme = layout.decode<double>(std::vector<double>{800.0, -800.0, 900.0});
    for (double v : extreme) EXPECT_TRUE(std::isfinite(v));
}

TEST(Gradient, CrossSectional) {
    std::mt19937_64 rng(100);
    DataSources d;
    d.cross_sectional = random_series(rng, 3, 8);
    const CsmObjective obj(d, 0);
    for (int i = 0; i < 20; ++i) EXPECT_LT(gradient_error(obj, rng), 1e-5);
}

TEST(Gradient, Longitudinal) {
    std::mt19937_64 rng(101);
    DataSources d;
    d.longitudinal = gapped_panel(rng, 3, 40, 7);
    const CsmObjective obj(d, 0);
    for (int i = 0; i < 20; ++i) EXPECT_LT(gradient_error(obj, rng), 1e-5);
}

TEST(Gradient, Memory) {
    std::mt19937_64 rng(102);
    DataSources d;
    d.longitudinal = gapped_panel(rng, 2, 40, 7);
    d.cross_sectional = random_series(rng, 2, 6);
    for (std::size_t lam : {1u, 2u}) {
        const CsmObjective obj(d, lam);
        for (int i = 0; i < 20; ++i) EXPECT_LT(gradient_error(obj, rng), 1e-5);
    }
}

TEST(Gradient, Penalised) {
    std::mt19937_64 rng(103);
    DataSources d;
    d.cross_sectional = random_series(rng, 3, 8);
    const CsmObjective ridge(d, 0, PenaltyConfig{PenaltyKind::ridge_to_target, 50.0, 0.6});
    const CsmObjective jump(d, 0, PenaltyConfig{PenaltyKind::structured_jump, 500.0, 0.0, 1});
    for (int i = 0; i < 20; ++i) {
        EXPECT_LT(gradient_error(ridge, rng), 1e-5);
        EXPECT_LT(gradient_error(jump, rng), 1e-5);
    }
}

TEST(Gradient, Anonymised) {
    std::mt19937_64 rng(104);
    CountSeries c(3, 6);
    for (std::size_t t = 0; t < 6; ++t) {
        const std::uint64_t a = 1 + rng() % 100, b = 1 + rng() % 100;
        c.set(t, 0, a);
        c.set(t, 1, b);
        c.set(t, 2, 300 - a - b);
    }
    DataSources d;
    d.anonymised = c;
    const CsmObjective obj(d, 0);
    for (int i = 0; i < 20; ++i) EXPECT_LT(gradient_error(obj, rng), 1e-5);
}

TEST(FitCsm, RidgeSelectsIdentityBranch) {
    DataSources d;
    d.cross_sectional = constant_half_series();
    FitOptions o;
    o.penalty = {PenaltyKind::ridge_to_target, 10.0, 1.0};
    const auto fit = fit_csm(d, o);
    for (std::size_t l = 0; l < 2; ++l)
        for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(fit.kernel(k, l), k == l ? 1.0 : 0.0, 0.01);
}

TEST(FitCsm, RidgeSelectsUniformBranch) {
    DataSources d;
    d.cross_sectional = constant_half_series();
    FitOptions o;
    o.penalty = {PenaltyKind::ridge_to_target, 10.0, 0.0};
    const auto fit = fit_csm(d, o);
    for (std::size_t l = 0; l < 2; ++l)
        for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(fit.kernel(k, l), 0.5, 0.01);
}

TEST(FitCsm, ExactTwoPointFit) {
    DataSources d;
    d.cross_sectional = CountSeries::from_rows({{100000, 0}, {0, 100000}});
    const auto fit = fit_csm(d, FitOptions{});
    EXPECT_NEAR(fit.initial[0], 1.0, 1e-3);
    EXPECT_NEAR(fit.kernel(0, 0), 0.0, 1e-3);
    EXPECT_NEAR(fit.kernel(1, 0), 1.0, 1e-3);
    // grid search over (p0_0, pi_00, pi_01): no grid point beats the fit
    double best = -1e300;
    for (int a = 0; a <= 20; ++a)
        for (int b = 0; b <= 20; ++b)
            for (int c = 0; c <= 20; ++c) {
                const double p = a / 20.0, u = b / 20.0, v = c / 20.0;
                const auto k = TransitionKernel::from_rows({{u, v}, {1 - u, 1 - v}});
                best = std::max(best, cs_log_likelihood(*d.cross_sectional, CategoricalDistribution({p, 1 - p}), k));
            }
    EXPECT_GE(fit.log_likelihood, best - 1e-6);
}

TEST(FitCsm, SimplexAndReproducibility) {
    std::mt19937_64 rng(200);
    DataSources d;
    d.cross_sectional = random_series(rng, 3, 10);
    d.longitudinal = gapped_panel(rng, 3, 60, 10);
    for (std::size_t lam : {0u, 1u}) {
        FitOptions o;
        o.memory = lam;
        o.multistart = 4;
        o.seed = 9;
        const auto fit = fit_csm(d, o);
        EXPECT_LE(max_simplex_violation(fit), 1e-12);
        const double recomputed = cs_log_likelihood(*d.cross_sectional, fit.initial, fit.kernel) +
                                  long_log_likelihood(*d.longitudinal, fit.initial, fit.kernel);
        EXPECT_NEAR(fit.log_likelihood, recomputed, 1e-8);
        EXPECT_EQ(fit.dof, dof(3, lam));
        for (const auto& r : fit.restarts) EXPECT_GE(fit.objective, r.objective);
        const auto again = fit_csm(d, o);
        EXPECT_EQ(again.kernel, fit.kernel);
        EXPECT_EQ(again.initial, fit.initial);
    }
}

TEST(FitCsm, ZeroStrengthPenaltyMatchesUnpenalised) {
    std::mt19937_64 rng(201);
    DataSources d;
    d.cross_sectional = random_series(rng, 3, 8);
    const CsmObjective plain(d, 0);
    const CsmObjective zero(d, 0, PenaltyConfig{PenaltyKind::ridge_to_target, 0.0, 0.5});
    for (int i = 0; i < 10; ++i) {
        const auto [q, k] = detail::random_start(3, 0, rng());
        EXPECT_NEAR(plain.objective(q, k), zero.objective(q, k), 1e-12);
    }
    FitOptions o;
    o.multistart = 2;
    const auto a = fit_csm(d, o);
    o.penalty = {PenaltyKind::ridge_to_target, 0.0, 0.5};
    const auto b = fit_csm(d, o);
    EXPECT_NEAR(a.objective, b.objective, 1e-12);
}

TEST(FitCsm, RefitErrorShrinksWithSampleSize) {
    const auto truth = TransitionKernel::from_rows({{0.85, 0.1, 0.05}, {0.1, 0.8, 0.25}, {0.05, 0.1, 0.7}});
    auto frobenius_at = [&](std::size_t q) {
        GeneratorSpec g{CategoricalDistribution({0.5, 0.3, 0.2}), truth, q, 8, 77};
        DataSources d;
        d.longitudinal = generate_synthetic(g);
        FitOptions o;
        o.multistart = 2;
        const auto fit = fit_csm(d, o);
        double s = 0.0;
        for (std::size_t i = 0; i < 9; ++i) s += std::pow(fit.kernel.entries()[i] - truth.entries()[i], 2);
        return std::sqrt(s);
    };
    const double small = frobenius_at(200), large = frobenius_at(20000);
    EXPECT_LT(large, small);
    EXPECT_LT(large, 0.02);
}

TEST(FitCsm, AnonymisedAndMixedData) {
    const auto truth = TransitionKernel::from_rows({{0.9, 0.3}, {0.1, 0.7}});
    CountSeries anon(2, 8);
    std::vector<double> p{0.8, 0.2};
    for (std::size_t t = 0; t < 8; ++t) {
        const auto a = static_cast<std::uint64_t>(std::llround(100000 * p[0]));
        anon.set(t, 0, a);
        anon.set(t, 1, 100000 - a);
        p = step(truth, p);
    }
    DataSources d;
    d.anonymised = anon;
    FitOptions o;
    o.multistart = 3;
    const auto fit = fit_csm(d, o);
    // anonymised data constrain pi only through pi p_obs, so check the predicted shares
    const auto pred = fit.trend(8);
    for (std::size_t t = 0; t < 8; ++t) EXPECT_NEAR(pred[t][0], anon.empirical(t)[0], 0.01);
    o.memory = 1;
    EXPECT_THROW(fit_csm(d, o), DataError);
}

TEST(FitCsm, Errors) {
    EXPECT_THROW(fit_csm(DataSources{}, FitOptions{}), DataError);
    DataSources d;
    d.cross_sectional = CountSeries::from_rows({{1, 2}, {2, 1}});
    d.longitudinal = TrajectorySet(3, {Trajectory{"a", {0}, {2}}});
    EXPECT_THROW(fit_csm(d, FitOptions{}), DimensionMismatch);
    FitOptions bad;
    bad.multistart = 0;
    DataSources ok;
    ok.cross_sectional = CountSeries::from_rows({{1, 2}, {2, 1}});
    EXPECT_THROW(fit_csm(ok, bad), DataError);
    FitOptions structured;
    structured.memory = 1;
    structured.penalty = {PenaltyKind::structured_jump, 1.0, 0.0, 1};
    EXPECT_THROW(fit_csm(ok, structured), DataError);
}

TEST(FitCsm, WarmStartIsUsed) {
    std::mt19937_64 rng(300);
    DataSources d;
    d.cross_sectional = random_series(rng, 3, 8);
    FitOptions o;
    o.multistart = 1;
    const auto first = fit_csm(d, o);
    o.warm_start = std::make_pair(first.initial, first.kernel);
    const auto warm = fit_csm(d, o);
    EXPECT_GE(warm.objective, first.objective - 1e-6);
    EXPECT_LT(warm.restarts[0].evaluations, first.restarts[0].evaluations);
}

TEST(FitMlr, RecoversLogisticTrend) {
    CountSeries c(2, 20);
    for (std::size_t t = 0; t < 20; ++t) {
        const double e = std::exp(0.3 - 0.1 * static_cast<double>(t));
        const auto n1 = static_cast<std::uint64_t>(std::llround(100000 * e / (1 + e)));
        c.set(t, 0, 100000 - n1);
        c.set(t, 1, n1);
    }
    const auto fit = fit_mlr(c);
    EXPECT_NEAR(fit.intercepts[1], 0.3, 0.02);
    EXPECT_NEAR(fit.slopes[1], -0.1, 0.02);
    EXPECT_EQ(fit.dof, 2u);
}

TEST(FitMlr, ConstantSeriesHasNoSlope) {
    CountSeries c(3, 6);
    for (std::size_t t = 0; t < 6; ++t) {
        c.set(t, 0, 300);
        c.set(t, 1, 500);
        c.set(t, 2, 200);
    }
    const auto fit = fit_mlr(c);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(fit.slopes[k], 0.0, 0.01);
    EXPECT_EQ(fit.dof, 4u);
    EXPECT_NEAR(fit.predict(2.5)[1], 0.5, 1e-6);
}

TEST(FitMlr, NeedsTwoTimePoints) {
    CountSeries c(2, 3);
    c.set(1, 0, 5);
    EXPECT_THROW(fit_mlr(c), DataError);
}

TEST(FitMlr, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(400);
    const auto c = random_series(rng, 3, 10);
    std::normal_distribution<double> normal(0.0, 0.5);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<double> x(4);
        for (double& v : x) v = normal(rng);
        std::vector<Dual> vars;
        for (std::size_t i = 0; i < 4; ++i) vars.push_back(Dual::variable(x[i], i, 4));
        const Dual v = detail::mlr_log_likelihood<Dual>(c, std::span<const Dual>(vars));
        const auto fd = oracle::central_difference(
            [&](const std::vector<double>& y) { return detail::mlr_log_likelihood<double>(c, std::span<const double>(y)); },
            x);
        double diff = 0.0, scale = 0.0;
        for (std::size_t i = 0; i < 4; ++i) {
            diff = std::max(diff, std::abs(v.derivative(i) - fd[i]));
            scale = std::max(scale, std::abs(v.derivative(i)));
        }
        EXPECT_LT(diff / scale, 1e-5);
    }
}

TEST(Minimizer, Rosenbrock) {
    auto f = [](const std::vector<double>& x) {
        return 100 * std::pow(x[1] - x[0] * x[0], 2) + std::pow(1 - x[0], 2);
    };
    auto fg = [&](const std::vector<double>& x) {
        std::vector<double> g{-400 * x[0] * (x[1] - x[0] * x[0]) - 2 * (1 - x[0]), 200 * (x[1] - x[0] * x[0])};
        return std::make_pair(f(x), g);
    };
    const auto r = minimize(fg, f, {-1.2, 1.0}, MinimizerOptions{10000, 1e-14});
    EXPECT_TRUE(r.converged);
    EXPECT_NEAR(r.x[0], 1.0, 1e-4);
    EXPECT_NEAR(r.x[1], 1.0, 1e-4);
}

TEST(Minimizer, FallsBackWhenGradientIsWrong) {
    auto f = [](const std::vector<double>& x) { return (x[0] - 3) * (x[0] - 3) + (x[1] + 1) * (x[1] + 1); };
    auto fg = [&](const std::vector<double>& x) {
        // deliberately inverted gradient: every line search fails
        return std::make_pair(f(x), std::vector<double>{-2 * (x[0] - 3), -2 * (x[1] + 1)});
    };
    const auto r = minimize(fg, f, {0.0, 0.0}, MinimizerOptions{20000, 1e-12});
    EXPECT_TRUE(r.used_fallback);
    EXPECT_NEAR(r.x[0], 3.0, 1e-4);
    EXPECT_NEAR(r.x[1], -1.0, 1e-4);
}
