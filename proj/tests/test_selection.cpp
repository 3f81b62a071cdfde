#include "fixtures.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <numbers>
#include <random>

using namespace csm;

namespace {

/// Predicts the empirical distribution of the full series at every time.
ModelRecipe interpolating_recipe(const CountSeries& full, std::atomic<int>* calls = nullptr) {
    return {"interp", [full, calls](const DataSources&) {
                if (calls) ++*calls;
                FittedModel m;
                m.dof = full.horizon() * (full.n_categories() - 1);
                m.predict = [full](std::size_t t) { return full.empirical(t); };
                return m;
            }};
}

/// Memoryless model with the kernel frozen at the identity: only p0 is fitted.
ModelRecipe frozen_identity_recipe() {
    return {"frozen", [](const DataSources& d) {
                const auto& c = *d.cross_sectional;
                std::vector<double> pooled(c.n_categories(), 0.0);
                for (std::size_t t = 0; t < c.horizon(); ++t)
                    for (std::size_t k = 0; k < c.n_categories(); ++k) pooled[k] += static_cast<double>(c.count(t, k));
                auto p = CategoricalDistribution::normalized(pooled);
                FittedModel m;
                m.dof = c.n_categories() - 1;
                m.predict = [p](std::size_t) { return p; };
                return m;
            }};
}

CountSeries linear_trend_series() {
    CountSeries c(2, 10);
    for (std::size_t t = 0; t < 10; ++t) {
        const auto a = static_cast<std::uint64_t>(std::llround(10000 * (0.8 - 0.05 * static_cast<double>(t))));
        c.set(t, 0, a);
        c.set(t, 1, 10000 - a);
    }
    return c;
}

/// Exact expected counts of a chain, n per time point.
CountSeries expected_counts(const CategoricalDistribution& q0, const TransitionKernel& k, std::size_t horizon,
                            double n) {
    CountSeries c(k.n_categories(), horizon);
    auto q = q0;
    for (std::size_t t = 0; t < horizon; ++t) {
        const auto p = reduce_distribution(q, k.n_categories());
        for (std::size_t j = 0; j < p.size(); ++j) c.set(t, j, static_cast<std::uint64_t>(std::llround(n * p[j])));
        q = CategoricalDistribution::normalized(step(k, q.probs()));
    }
    return c;
}

TrajectorySet small_panel(std::uint64_t seed) {
    GeneratorSpec g{CategoricalDistribution({0.5, 0.5}), TransitionKernel::from_rows({{0.8, 0.3}, {0.2, 0.7}}), 40, 6,
                    seed};
    return generate_synthetic(g);
}

}  // namespace

TEST(InformationCriteria, Examples) {
    EXPECT_DOUBLE_EQ(information_criteria(8, 1, 0.0).aic, 16.0);
    EXPECT_DOUBLE_EQ(information_criteria(8, 12345, 0.0).aic, 16.0);
    const auto ic = information_criteria(8, 100, -50.0);
    EXPECT_NEAR(ic.bic, 8 * (std::log(100.0) - std::log(2 * std::numbers::pi)) + 100, 1e-12);
    EXPECT_NEAR(ic.bic, 122.138, 1e-3);
    const auto a = information_criteria(5, 1000, -10.0), b = information_criteria(6, 1000, -10.0);
    EXPECT_LT(a.aic, b.aic);
    EXPECT_LT(a.bic, b.bic);
    EXPECT_THROW(information_criteria(3, 0, 0.0), DataError);
}

TEST(InformationCriteria, AffineInLogLikelihood) {
    for (double l : {-100.0, -3.0, 0.0, 7.5}) {
        const auto base = information_criteria(4, 50, l), shifted = information_criteria(4, 50, l + 1.0);
        EXPECT_NEAR(shifted.aic - base.aic, -2.0, 1e-12);
        EXPECT_NEAR(shifted.bic - base.bic, -2.0, 1e-12);
    }
}

TEST(Loocv, InterpolatingModelScoresZero) {
    const auto c = linear_trend_series();
    EXPECT_NEAR(loocv(c, interpolating_recipe(c)), 0.0, 1e-6);
}

TEST(Loocv, MissingPointsTriggerNoRefit) {
    auto c = linear_trend_series();
    const std::size_t drop[] = {4};
    c = c.masked(drop);
    std::atomic<int> calls{0};
    loocv(c, interpolating_recipe(c, &calls));
    EXPECT_EQ(calls.load(), 8);  // t = 1..9 without t = 4
}

TEST(Loocv, CsmBeatsFrozenIdentity) {
    const auto c = linear_trend_series();
    FitOptions o;
    o.multistart = 2;
    EXPECT_LT(loocv(c, csm_recipe("csm0", o)), loocv(c, frozen_identity_recipe()));
}

TEST(Loocv, TooFewPoints) {
    EXPECT_THROW(loocv(CountSeries::from_rows({{1, 2}, {2, 1}}), frozen_identity_recipe()), DataError);
}

TEST(Loocv, WeightingScalesByCounts) {
    const auto c = linear_trend_series();
    CvOptions plain;
    plain.weighted = false;
    const double w = loocv(c, frozen_identity_recipe());
    const double u = loocv(c, frozen_identity_recipe(), plain);
    EXPECT_NEAR(w, 10000 * u, 1e-6 * w);
}

TEST(Kfcv, DeterministicForFixedSeed) {
    const auto c = linear_trend_series();
    FitOptions o;
    o.multistart = 1;
    CvOptions cv;
    cv.iterations = 1;
    cv.seed = 5;
    EXPECT_EQ(kfcv(c, csm_recipe("csm0", o), cv), kfcv(c, csm_recipe("csm0", o), cv));
    const auto theta = small_panel(3);
    EXPECT_EQ(kfcv(theta, csm_recipe("csm0", o), cv), kfcv(theta, csm_recipe("csm0", o), cv));
}

TEST(Kfcv, InterpolatingModelScoresZero) {
    const auto c = linear_trend_series();
    CvOptions cv;
    cv.iterations = 3;
    EXPECT_NEAR(kfcv(c, interpolating_recipe(c), cv), 0.0, 1e-6);
}

TEST(Kfcv, InvariantToTrajectoryOrder) {
    const auto theta = small_panel(8);
    std::vector<Trajectory> reversed(theta.trajectories().rbegin(), theta.trajectories().rend());
    FitOptions o;
    o.multistart = 1;
    CvOptions cv;
    cv.iterations = 2;
    cv.seed = 17;
    EXPECT_NEAR(kfcv(theta, csm_recipe("csm0", o), cv), kfcv(TrajectorySet(2, reversed), csm_recipe("csm0", o), cv),
                1e-9);
}

TEST(Kfcv, FoldsCoverEveryObservationOnce) {
    std::vector<std::size_t> order(17);
    std::iota(order.begin(), order.end(), std::size_t{0});
    detail::seeded_shuffle(order, 1, 0);
    const auto folds = detail::make_folds(order, 5);
    std::vector<int> seen(17, 0);
    for (std::size_t f = 0; f < 5; ++f) {
        EXPECT_EQ(folds[f].size(), f < 2 ? 4u : 3u);
        for (std::size_t i : folds[f]) ++seen[i];
    }
    for (int s : seen) EXPECT_EQ(s, 1);
}

TEST(Kfcv, TooFewObservations) {
    const auto c = CountSeries::from_rows({{1, 2}, {2, 1}, {1, 1}});
    EXPECT_THROW(kfcv(c, frozen_identity_recipe()), DataError);
    const TrajectorySet tiny(2, {Trajectory{"a", {0}, {1}}, Trajectory{"b", {0}, {0}}});
    EXPECT_THROW(kfcv(tiny, csm_recipe("csm0", FitOptions{})), DataError);
}

TEST(Kfcv, ScoresAreNonNegativeForCounts) {
    const auto c = linear_trend_series();
    FitOptions o;
    o.multistart = 1;
    EXPECT_GE(kfcv(c, csm_recipe("csm0", o)), 0.0);
    EXPECT_GE(tscv(c, csm_recipe("csm0", o)), 0.0);
    EXPECT_GE(loocv(c, csm_recipe("csm0", o)), 0.0);
}

TEST(Tscv, SelfConsistentTrendScoresNearZero) {
    const auto k = TransitionKernel::from_rows({{0.9, 0.15}, {0.1, 0.85}});
    const auto c = expected_counts(CategoricalDistribution({0.95, 0.05}), k, 10, 1e7);
    CvOptions cv;
    cv.weighted = false;
    const auto recipe = csm_recipe("csm0", FitOptions{});
    // a two-point prefix does not pin down the kernel; every later cut is exact
    const auto first = recipe.fit(detail::cs_only(c.truncated(2)));
    const double first_term = kl_divergence(c.empirical(2), first.predict(2));
    EXPECT_NEAR(tscv(c, recipe, cv), first_term, 1e-6);
    EXPECT_LT(tscv(c.truncated(10), recipe, cv) - tscv(c.truncated(4), recipe, cv), 1e-6);
}

TEST(Tscv, SingleStepEqualsOneTerm) {
    const auto c = CountSeries::from_rows({{60, 40}, {50, 50}, {45, 55}});
    FitOptions o;
    o.multistart = 2;
    const auto recipe = csm_recipe("csm0", o);
    const auto model = recipe.fit(detail::cs_only(c.truncated(2)));
    const double expected = 100.0 * kl_divergence(c.empirical(2), model.predict(2));
    EXPECT_NEAR(tscv(c, recipe), expected, 1e-12);
}

TEST(Tscv, MemoryHelpsOnRegimeChange) {
    // trend rises then falls: a memoryless two-state chain cannot turn around
    std::vector<double> entries(16);
    for (std::size_t cond = 0; cond < 8; ++cond) {
        const std::size_t x0 = cond % 2, x2 = cond / 4;
        const double stay = x0 == x2 ? 0.5 : 0.95;
        entries[cond * 2 + x0] = stay;
        entries[cond * 2 + 1 - x0] = 1.0 - stay;
    }
    const TransitionKernel k(2, 2, entries);
    std::vector<double> q0(8, 0.0);
    q0[0] = 0.9;
    q0[7] = 0.1;
    const auto c = expected_counts(CategoricalDistribution(q0), k, 30, 1e5);
    FitOptions o0, o2;
    o2.memory = 2;
    EXPECT_LT(tscv(c, csm_recipe("csm2", o2)), tscv(c, csm_recipe("csm0", o0)));
}

TEST(Tscv, LongitudinalDifferenceOfLogLikelihoods) {
    const auto theta = small_panel(12);
    FitOptions o;
    o.multistart = 1;
    const auto recipe = csm_recipe("csm0", o);
    double expected = 0.0;
    for (int cut = 2; cut < 6; ++cut) {
        const auto model = recipe.fit(detail::long_only(theta.truncated(cut)));
        expected -= model.trajectory_log_likelihood(theta.truncated(cut + 1)) -
                    model.trajectory_log_likelihood(theta.truncated(cut));
    }
    EXPECT_NEAR(tscv(theta, recipe), expected, 1e-9);
    EXPECT_GT(expected, 0.0);
}

TEST(Tscv, TooFewTimePoints) {
    EXPECT_THROW(tscv(CountSeries::from_rows({{1, 2}, {2, 1}}), frozen_identity_recipe()), DataError);
}

TEST(ScoreModel, TableRowsAndDeltas) {
    const auto c = linear_trend_series();
    DataSources d;
    d.cross_sectional = c;
    FitOptions o;
    o.multistart = 2;
    SelectionOptions so;
    so.cv.iterations = 2;
    const auto scores = compare_models(d, {csm_recipe("CSM(0)", o), mlr_recipe()}, so);
    ASSERT_EQ(scores.size(), 2u);
    for (const auto& s : scores) {
        EXPECT_NEAR(s.aic, 2.0 * s.dof - 2.0 * s.log_likelihood, 1e-9);
        EXPECT_TRUE(s.loocv && s.kfcv && s.tscv);
        EXPECT_GE(s.fit_error, -1e-9);
    }
    EXPECT_EQ(scores[0].dof, 3u);
    EXPECT_EQ(scores[1].dof, 2u);
    const double wkl = weighted_kl(c, [&](std::size_t t) { return scores[0].log_likelihood, fit_csm(d, o).predict(t); });
    EXPECT_NEAR(scores[0].fit_error, wkl, 1e-6);
    const auto deltas = score_deltas(scores);
    EXPECT_EQ(std::min(deltas[0].aic, deltas[1].aic), 0.0);
    EXPECT_EQ(std::min(*deltas[0].kfcv, *deltas[1].kfcv), 0.0);
}

TEST(ScoreModel, LongitudinalSampleSizeIsTrajectoryCount) {
    const auto theta = small_panel(2);
    DataSources d;
    d.longitudinal = theta;
    EXPECT_EQ(d.sample_size(), 40u);
    FitOptions o;
    o.multistart = 1;
    SelectionOptions so;
    so.run_kfcv = so.run_tscv = false;
    const auto s = score_model(d, csm_recipe("CSM(0)", o), so);
    EXPECT_NEAR(s.bic, information_criteria(3, 40, s.log_likelihood).bic, 1e-9);
    EXPECT_FALSE(s.loocv.has_value());
    EXPECT_NEAR(s.fit_error, -s.log_likelihood, 1e-12);
}
