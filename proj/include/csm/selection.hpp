#pragma once

#include "csm/estimation.hpp"
#include "csm/likelihood.hpp"
#include "csm/parallel.hpp"
#include "csm/random.hpp"
#include "csm/types.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace csm {

struct InformationCriteria {
    double aic = 0.0;
    double bic = 0.0;
};

/// aic = 2k - 2 l_max, bic = k (ln n - ln 2 pi) - 2 l_max.
inline InformationCriteria information_criteria(std::size_t dof, std::size_t n, double l_max) {
    if (n < 1) throw DataError("sample size must be at least 1");
    const double k = static_cast<double>(dof);
    return {2.0 * k - 2.0 * l_max,
            k * (std::log(static_cast<double>(n)) - std::log(2.0 * std::numbers::pi)) - 2.0 * l_max};
}

/// A fitted candidate as seen by the scoring routines.
struct FittedModel {
    std::size_t dof = 0;
    double log_likelihood = 0.0;
    std::function<CategoricalDistribution(std::size_t)> predict;
    /// Log-likelihood of other trajectories; empty for models without individual dynamics.
    std::function<double(const TrajectorySet&)> trajectory_log_likelihood;
    std::optional<CsmFit> csm;
    std::optional<MlrFit> mlr;
};

inline FittedModel fitted_model(CsmFit fit) {
    FittedModel m;
    m.dof = fit.dof;
    m.log_likelihood = fit.log_likelihood;
    auto shared = std::make_shared<const CsmFit>(std::move(fit));
    m.predict = [shared](std::size_t t) { return shared->predict(t); };
    m.trajectory_log_likelihood = [shared](const TrajectorySet& theta) {
        const auto compiled = detail::compile_trajectories(theta, shared->memory());
        return compiled_log_likelihood(compiled, shared->initial, shared->kernel);
    };
    m.csm = *shared;
    return m;
}

inline FittedModel fitted_model(MlrFit fit) {
    FittedModel m;
    m.dof = fit.dof;
    m.log_likelihood = fit.log_likelihood;
    auto shared = std::make_shared<const MlrFit>(std::move(fit));
    m.predict = [shared](std::size_t t) { return shared->predict(static_cast<double>(t)); };
    m.mlr = *shared;
    return m;
}

/// How to fit one candidate model to any data subset.
struct ModelRecipe {
    std::string label;
    std::function<FittedModel(const DataSources&)> fit;
};

inline ModelRecipe csm_recipe(std::string label, FitOptions options) {
    return {std::move(label), [options](const DataSources& data) { return fitted_model(fit_csm(data, options)); }};
}

inline ModelRecipe mlr_recipe(std::string label = "MLR") {
    return {std::move(label), [](const DataSources& data) {
                if (!data.cross_sectional || data.longitudinal || data.anonymised)
                    throw DataError("logistic regression baseline takes cross-sectional counts only");
                return fitted_model(fit_mlr(*data.cross_sectional));
            }};
}

struct CvOptions {
    std::size_t folds = 5;
    std::size_t iterations = 1;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    bool weighted = true;  ///< weight each cross-sectional D_KL by the sample size at that time
};

namespace detail {

inline DataSources cs_only(CountSeries counts) {
    DataSources d;
    d.cross_sectional = std::move(counts);
    return d;
}

inline DataSources long_only(TrajectorySet theta) {
    DataSources d;
    d.longitudinal = std::move(theta);
    return d;
}

inline double held_out_divergence(const CountSeries& counts, std::size_t t, const FittedModel& model,
                                  const CvOptions& options) {
    const double d = kl_divergence(counts.empirical(t), model.predict(t));
    return options.weighted ? static_cast<double>(counts.total(t)) * d : d;
}

/// Fisher-Yates shuffle driven by a Philox substream.
inline void seeded_shuffle(std::vector<std::size_t>& items, std::uint64_t seed, std::uint64_t stream) {
    Philox rng(seed, stream);
    for (std::size_t i = items.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(items[i - 1], items[j]);
    }
}

/// Contiguous folds of a permutation; the first (size mod k) folds get one extra element.
inline std::vector<std::vector<std::size_t>> make_folds(const std::vector<std::size_t>& order, std::size_t k) {
    std::vector<std::vector<std::size_t>> folds(k);
    const std::size_t base = order.size() / k, extra = order.size() % k;
    std::size_t pos = 0;
    for (std::size_t f = 0; f < k; ++f) {
        const std::size_t size = base + (f < extra ? 1 : 0);
        folds[f].assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                        order.begin() + static_cast<std::ptrdiff_t>(pos + size));
        std::sort(folds[f].begin(), folds[f].end());
        pos += size;
    }
    return folds;
}

inline double sum_in_order(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

}  // namespace detail

/// Leave-one-out over t in [1, T): refit without p_t, score D_KL(p_t || prediction).
inline double loocv(const CountSeries& counts, const ModelRecipe& recipe, const CvOptions& options = {}) {
    const auto times = counts.observed_times();
    if (times.size() < 3) throw DataError("leave-one-out needs at least three observed time points");
    std::vector<std::size_t> held;
    for (std::size_t t : times)
        if (t >= 1) held.push_back(t);
    std::vector<double> terms(held.size(), 0.0);
    parallel_for(held.size(), options.threads, [&](std::size_t i) {
        const std::size_t t = held[i];
        const std::size_t mask[] = {t};
        const FittedModel model = recipe.fit(detail::cs_only(counts.masked(mask)));
        terms[i] = detail::held_out_divergence(counts, t, model, options);
    });
    return detail::sum_in_order(terms);
}

/// k-fold over observed time points; mean over seeded partitionings.
inline double kfcv(const CountSeries& counts, const ModelRecipe& recipe, const CvOptions& options = {}) {
    const auto times = counts.observed_times();
    if (options.folds < 2) throw DataError("k-fold validation needs at least two folds");
    if (times.size() < options.folds) throw DataError("fewer observed time points than folds");
    if (options.iterations < 1) throw DataError("k-fold validation needs at least one iteration");
    const std::size_t tasks = options.iterations * options.folds;
    std::vector<double> terms(tasks, 0.0);
    std::vector<std::vector<std::vector<std::size_t>>> partitions(options.iterations);
    for (std::size_t it = 0; it < options.iterations; ++it) {
        std::vector<std::size_t> order(times.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        detail::seeded_shuffle(order, options.seed, it);
        partitions[it] = detail::make_folds(order, options.folds);
    }
    parallel_for(tasks, options.threads, [&](std::size_t task) {
        const auto& fold = partitions[task / options.folds][task % options.folds];
        std::vector<std::size_t> held;
        for (std::size_t i : fold) held.push_back(times[i]);
        const FittedModel model = recipe.fit(detail::cs_only(counts.masked(held)));
        double s = 0.0;
        for (std::size_t t : held) s += detail::held_out_divergence(counts, t, model, options);
        terms[task] = s;
    });
    return detail::sum_in_order(terms) / static_cast<double>(options.iterations);
}

/// k-fold over trajectories: refit on the complement, score minus the held-out log-likelihood.
inline double kfcv(const TrajectorySet& theta, const ModelRecipe& recipe, const CvOptions& options = {}) {
    if (options.folds < 2) throw DataError("k-fold validation needs at least two folds");
    if (theta.size() < options.folds) throw DataError("fewer trajectories than folds");
    if (options.iterations < 1) throw DataError("k-fold validation needs at least one iteration");
    // canonical order makes the partition independent of the input ordering
    std::vector<std::size_t> canonical(theta.size());
    std::iota(canonical.begin(), canonical.end(), std::size_t{0});
    std::stable_sort(canonical.begin(), canonical.end(),
                     [&](std::size_t a, std::size_t b) { return theta[a] < theta[b]; });
    const std::size_t tasks = options.iterations * options.folds;
    std::vector<std::vector<std::vector<std::size_t>>> partitions(options.iterations);
    for (std::size_t it = 0; it < options.iterations; ++it) {
        std::vector<std::size_t> order(theta.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        detail::seeded_shuffle(order, options.seed, it);
        partitions[it] = detail::make_folds(order, options.folds);
    }
    std::vector<double> terms(tasks, 0.0);
    parallel_for(tasks, options.threads, [&](std::size_t task) {
        const std::size_t it = task / options.folds, f = task % options.folds;
        std::vector<std::size_t> train, test;
        for (std::size_t g = 0; g < options.folds; ++g)
            for (std::size_t pos : partitions[it][g]) (g == f ? test : train).push_back(canonical[pos]);
        std::sort(train.begin(), train.end());
        std::sort(test.begin(), test.end());
        const FittedModel model = recipe.fit(detail::long_only(theta.subset(train)));
        if (!model.trajectory_log_likelihood) throw DataError(recipe.label + " cannot score trajectories");
        terms[task] = -model.trajectory_log_likelihood(theta.subset(test));
    });
    return detail::sum_in_order(terms) / static_cast<double>(options.iterations);
}

/// Forward validation: for T' in [2, T) fit on [0, T') and score p_{T'}. Cut points
/// with fewer than two observed times before them are skipped.
inline double tscv(const CountSeries& counts, const ModelRecipe& recipe, const CvOptions& options = {}) {
    if (counts.horizon() < 3) throw DataError("time-series validation needs at least three time points");
    std::vector<std::size_t> cuts;
    for (std::size_t cut = 2; cut < counts.horizon(); ++cut)
        if (!counts.missing(cut) && counts.truncated(cut).observed_times().size() >= 2) cuts.push_back(cut);
    std::vector<double> terms(cuts.size(), 0.0);
    parallel_for(cuts.size(), options.threads, [&](std::size_t i) {
        const FittedModel model = recipe.fit(detail::cs_only(counts.truncated(cuts[i])));
        terms[i] = detail::held_out_divergence(counts, cuts[i], model, options);
    });
    return detail::sum_in_order(terms);
}

/// Forward validation on trajectories: fit on times < T', score
/// -(l(times <= T') - l(times <= T'-1)) for T' in [2, T).
inline double tscv(const TrajectorySet& theta, const ModelRecipe& recipe, const CvOptions& options = {}) {
    const std::size_t horizon = theta.horizon();
    if (horizon < 3) throw DataError("time-series validation needs at least three time points");
    std::vector<int> cuts;
    for (std::size_t cut = 2; cut < horizon; ++cut) {
        const int c = static_cast<int>(cut);
        if (!theta.truncated(c).empty()) cuts.push_back(c);
    }
    std::vector<double> terms(cuts.size(), 0.0);
    parallel_for(cuts.size(), options.threads, [&](std::size_t i) {
        const int cut = cuts[i];
        const auto train = theta.truncated(cut);
        const FittedModel model = recipe.fit(detail::long_only(train));
        if (!model.trajectory_log_likelihood) throw DataError(recipe.label + " cannot score trajectories");
        const auto with_next = theta.truncated(cut + 1);
        terms[i] = -(model.trajectory_log_likelihood(with_next) - model.trajectory_log_likelihood(train));
    });
    return detail::sum_in_order(terms);
}

/// One row of a model-comparison table.
struct ModelScore {
    std::string model_label;
    std::size_t dof = 0;
    double log_likelihood = 0.0;
    double fit_error = 0.0;  ///< weighted KL for counts, minus log-likelihood for trajectories
    double aic = 0.0;
    double bic = 0.0;
    std::optional<double> loocv;
    std::optional<double> kfcv;
    std::optional<double> tscv;
};

struct SelectionOptions {
    CvOptions cv{};
    bool run_loocv = true;
    bool run_kfcv = true;
    bool run_tscv = true;
};

/// Scores one recipe on a data set; cross-validation needs a single data kind.
inline ModelScore score_model(const DataSources& data, const ModelRecipe& recipe, const SelectionOptions& options = {}) {
    const FittedModel model = recipe.fit(data);
    ModelScore score;
    score.model_label = recipe.label;
    score.dof = model.dof;
    score.log_likelihood = model.log_likelihood;
    score.fit_error = -model.log_likelihood;
    if (data.cross_sectional) score.fit_error += cs_entropy_constant(*data.cross_sectional);
    if (data.anonymised) score.fit_error += cs_entropy_constant(*data.anonymised);
    const auto ic = information_criteria(model.dof, data.sample_size(), model.log_likelihood);
    score.aic = ic.aic;
    score.bic = ic.bic;
    const bool cs = data.cross_sectional && !data.longitudinal && !data.anonymised;
    const bool lg = data.longitudinal && !data.cross_sectional && !data.anonymised;
    if (cs) {
        if (options.run_loocv) score.loocv = loocv(*data.cross_sectional, recipe, options.cv);
        if (options.run_kfcv) score.kfcv = kfcv(*data.cross_sectional, recipe, options.cv);
        if (options.run_tscv) score.tscv = tscv(*data.cross_sectional, recipe, options.cv);
    } else if (lg) {
        if (options.run_kfcv) score.kfcv = kfcv(*data.longitudinal, recipe, options.cv);
        if (options.run_tscv) score.tscv = tscv(*data.longitudinal, recipe, options.cv);
    }
    return score;
}

/// Differences from the per-column minimum, computed for presentation.
struct ScoreDeltas {
    double aic = 0.0;
    double bic = 0.0;
    std::optional<double> loocv;
    std::optional<double> kfcv;
    std::optional<double> tscv;
};

inline std::vector<ScoreDeltas> score_deltas(const std::vector<ModelScore>& scores) {
    auto column_min = [&](auto get) {
        double m = std::numeric_limits<double>::infinity();
        for (const auto& s : scores)
            if (auto v = get(s)) m = std::min(m, *v);
        return m;
    };
    const double aic = column_min([](const ModelScore& s) { return std::optional<double>(s.aic); });
    const double bic = column_min([](const ModelScore& s) { return std::optional<double>(s.bic); });
    const double lo = column_min([](const ModelScore& s) { return s.loocv; });
    const double kf = column_min([](const ModelScore& s) { return s.kfcv; });
    const double ts = column_min([](const ModelScore& s) { return s.tscv; });
    std::vector<ScoreDeltas> out;
    for (const auto& s : scores) {
        ScoreDeltas d{s.aic - aic, s.bic - bic, {}, {}, {}};
        if (s.loocv) d.loocv = *s.loocv - lo;
        if (s.kfcv) d.kfcv = *s.kfcv - kf;
        if (s.tscv) d.tscv = *s.tscv - ts;
        out.push_back(d);
    }
    return out;
}

inline std::vector<ModelScore> compare_models(const DataSources& data, const std::vector<ModelRecipe>& recipes,
                                              const SelectionOptions& options = {}) {
    std::vector<ModelScore> scores;
    scores.reserve(recipes.size());
    for (const auto& r : recipes) scores.push_back(score_model(data, r, options));
    return scores;
}

}  // namespace csm
