#pragma once

#include "csm/core.hpp"
#include "csm/dual.hpp"
#include "csm/likelihood.hpp"
#include "csm/optimize.hpp"
#include "csm/parallel.hpp"
#include "csm/random.hpp"
#include "csm/types.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace csm {

/// Free parameters of a CSM(lambda) model: initial Z-state simplex plus one simplex per kernel column.
inline std::size_t dof(std::size_t n_categories, std::size_t memory) {
    const std::size_t states = ipow(n_categories, memory + 1);
    return (states - 1) + states * (n_categories - 1);
}

inline std::size_t mlr_dof(std::size_t n_categories) { return 2 * (n_categories - 1); }

/// Any combination of the three data kinds; all present sources share N.
struct DataSources {
    std::optional<CountSeries> cross_sectional;
    std::optional<TrajectorySet> longitudinal;
    std::optional<CountSeries> anonymised;

    bool empty() const { return !cross_sectional && !longitudinal && !anonymised; }

    std::size_t n_categories() const {
        std::size_t n = 0;
        auto check = [&n](std::size_t m) {
            if (n != 0 && m != n) throw DimensionMismatch("data sources disagree on the number of categories");
            n = m;
        };
        if (cross_sectional) check(cross_sectional->n_categories());
        if (longitudinal) check(longitudinal->n_categories());
        if (anonymised) check(anonymised->n_categories());
        if (n == 0) throw DataError("no data supplied");
        return n;
    }

    /// Sample size entering BIC: survey responses plus trajectories.
    std::size_t sample_size() const {
        std::size_t n = 0;
        if (cross_sectional) n += cross_sectional->grand_total();
        if (longitudinal) n += longitudinal->size();
        if (anonymised) n += anonymised->grand_total();
        return n;
    }
};

struct FitOptions {
    std::size_t memory = 0;
    PenaltyConfig penalty{};
    std::size_t multistart = 10;
    std::size_t max_evaluations = 200000;
    double rel_tolerance = 1e-10;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    /// Replaces the heuristic start of restart 0 when set.
    std::optional<std::pair<CategoricalDistribution, TransitionKernel>> warm_start;

    void validate() const {
        if (multistart < 1) throw DataError("multistart must be at least 1");
        if (!(rel_tolerance > 0.0)) throw DataError("relative tolerance must be positive");
        if (max_evaluations < 1) throw DataError("evaluation budget must be positive");
        penalty.validate();
    }
};

/**
 * Log-ratio coordinates for a product of simplices. Each block has one pinned
 * reference coordinate; the remaining size-1 coordinates are free reals.
 */
class SimplexLayout {
public:
    struct Block {
        std::size_t offset;  ///< into the probability vector
        std::size_t size;
        std::size_t reference;
    };

    SimplexLayout() = default;

    /// Blocks of `sizes`; reference = argmax of the matching block of `anchor`.
    SimplexLayout(const std::vector<std::size_t>& sizes, std::span<const double> anchor) {
        std::size_t offset = 0;
        for (std::size_t size : sizes) {
            std::size_t ref = 0;
            for (std::size_t j = 1; j < size; ++j)
                if (anchor[offset + j] > anchor[offset + ref]) ref = j;
            blocks_.push_back({offset, size, ref});
            offset += size;
            free_ += size - 1;
        }
        total_ = offset;
    }

    std::size_t n_free() const { return free_; }
    std::size_t n_probabilities() const { return total_; }
    const std::vector<Block>& blocks() const { return blocks_; }

    std::vector<double> encode(std::span<const double> probs) const {
        std::vector<double> x;
        x.reserve(free_);
        for (const Block& b : blocks_) {
            const double ref = std::log(std::max(probs[b.offset + b.reference], 1e-12));
            for (std::size_t j = 0; j < b.size; ++j)
                if (j != b.reference) x.push_back(std::log(std::max(probs[b.offset + j], 1e-12)) - ref);
        }
        return x;
    }

    /// Softmax per block; T is double or Dual.
    template <class T>
    std::vector<T> decode(std::span<const T> x) const {
        std::vector<T> probs(total_);
        std::size_t xi = 0;
        using std::exp;
        for (const Block& b : blocks_) {
            double shift = 0.0;
            for (std::size_t j = 0, i = xi; j < b.size; ++j)
                if (j != b.reference) shift = std::max(shift, value_of(x[i++]));
            T sum(0.0);
            for (std::size_t j = 0; j < b.size; ++j) {
                T& p = probs[b.offset + j];
                p = j == b.reference ? T(std::exp(-shift)) : exp(x[xi++] - shift);
                sum += p;
            }
            for (std::size_t j = 0; j < b.size; ++j) probs[b.offset + j] /= sum;
        }
        return probs;
    }

private:
    std::vector<Block> blocks_;
    std::size_t free_ = 0;
    std::size_t total_ = 0;
};

/**
 * Penalised log-likelihood of a CSM(lambda) model over a data mixture, as a
 * function of the unconstrained coordinates of a SimplexLayout. Probability
 * vector layout: initial Z-state block first, then kernel columns.
 */
class CsmObjective {
public:
    CsmObjective(const DataSources& data, std::size_t memory, PenaltyConfig penalty = {})
        : data_(&data), n_(data.n_categories()), memory_(memory), penalty_(penalty) {
        penalty_.validate();
        if (data.anonymised && memory_ != 0)
            throw DataError("anonymised cohort data requires a memoryless model");
        if (penalty_.kind == PenaltyKind::structured_jump && memory_ != 0)
            throw DataError("structured jump penalty requires a memoryless kernel");
        if (data.anonymised) detail::validate_anonymised(*data.anonymised);
        if (data.longitudinal) {
            if (data.longitudinal->empty()) throw DataError("trajectory set is empty");
            compiled_ = detail::compile_trajectories(*data.longitudinal, memory_);
        }
        horizon_ = 1;
        if (data.cross_sectional) horizon_ = std::max(horizon_, data.cross_sectional->horizon());
        if (compiled_) horizon_ = std::max(horizon_, static_cast<std::size_t>(compiled_->max_start_time) + 1);
        states_ = ipow(n_, memory_ + 1);
    }

    std::size_t n_categories() const { return n_; }
    std::size_t memory() const { return memory_; }
    std::size_t n_states() const { return states_; }
    const PenaltyConfig& penalty_config() const { return penalty_; }

    std::vector<std::size_t> block_sizes() const {
        std::vector<std::size_t> sizes{states_};
        sizes.insert(sizes.end(), states_, n_);
        return sizes;
    }

    SimplexLayout layout_for(const CategoricalDistribution& initial, const TransitionKernel& kernel) const {
        const auto probs = pack(initial, kernel);
        return SimplexLayout(block_sizes(), probs);
    }

    std::vector<double> pack(const CategoricalDistribution& initial, const TransitionKernel& kernel) const {
        detail::require_dimension(initial.size(), states_, "objective initial state");
        detail::require_dimension(kernel.n_conditions(), states_, "objective kernel");
        std::vector<double> probs(initial.begin(), initial.end());
        probs.insert(probs.end(), kernel.entries().begin(), kernel.entries().end());
        return probs;
    }

    /// Exactly normalised parameters from unconstrained coordinates.
    std::pair<CategoricalDistribution, TransitionKernel> unpack(const SimplexLayout& layout,
                                                                std::span<const double> x) const {
        std::vector<double> probs = layout.decode<double>(x);
        for (const auto& b : layout.blocks()) {
            double sum = 0.0;
            for (std::size_t j = 0; j < b.size; ++j) sum += probs[b.offset + j];
            for (std::size_t j = 0; j < b.size; ++j) probs[b.offset + j] /= sum;
        }
        std::vector<double> q0(probs.begin(), probs.begin() + static_cast<std::ptrdiff_t>(states_));
        std::vector<double> kernel(probs.begin() + static_cast<std::ptrdiff_t>(states_), probs.end());
        return {CategoricalDistribution(std::move(q0)), TransitionKernel(n_, memory_, std::move(kernel))};
    }

    /// Unpenalised log-likelihood on probability-space parameters.
    template <class T>
    T log_likelihood(std::span<const T> q0, std::span<const T> kernel) const {
        const double floor = kTolerances.log_floor;
        T total(0.0);
        if (data_->cross_sectional || compiled_) {
            const auto trend = detail::zstate_trend<T>(n_, memory_, q0, kernel, horizon_);
            if (data_->cross_sectional) total += detail::cs_term<T>(*data_->cross_sectional, trend, floor);
            if (compiled_) total += detail::longitudinal_term<T>(*compiled_, trend, kernel, floor);
        }
        if (data_->anonymised) total += detail::anonymised_term<T>(*data_->anonymised, q0, kernel, floor);
        return total;
    }

    template <class T>
    T penalised(std::span<const T> probs) const {
        const auto q0 = probs.subspan(0, states_);
        const auto kernel = probs.subspan(states_);
        T value = log_likelihood<T>(q0, kernel);
        value -= detail::penalty_value<T>(n_, memory_, kernel, penalty_);
        return value;
    }

    double log_likelihood(const CategoricalDistribution& initial, const TransitionKernel& kernel) const {
        const auto probs = pack(initial, kernel);
        const std::span<const double> all(probs);
        return log_likelihood<double>(all.subspan(0, states_), all.subspan(states_));
    }

    double objective(const CategoricalDistribution& initial, const TransitionKernel& kernel) const {
        const auto probs = pack(initial, kernel);
        return penalised<double>(probs);
    }

    /// Penalised log-likelihood at unconstrained coordinates.
    double value(const SimplexLayout& layout, std::span<const double> x) const {
        const auto probs = layout.decode<double>(x);
        return penalised<double>(probs);
    }

    /// Value and gradient by forward-mode differentiation.
    std::pair<double, std::vector<double>> value_and_gradient(const SimplexLayout& layout,
                                                              std::span<const double> x) const {
        const std::size_t m = x.size();
        std::vector<Dual> vars;
        vars.reserve(m);
        for (std::size_t i = 0; i < m; ++i) vars.push_back(Dual::variable(x[i], i, m));
        const auto probs = layout.decode<Dual>(vars);
        const Dual v = penalised<Dual>(probs);
        std::vector<double> g(m);
        for (std::size_t i = 0; i < m; ++i) g[i] = v.derivative(i);
        return {v.value(), std::move(g)};
    }

private:
    const DataSources* data_;
    std::size_t n_;
    std::size_t memory_;
    PenaltyConfig penalty_;
    std::optional<detail::CompiledTrajectories> compiled_;
    std::size_t horizon_ = 1;
    std::size_t states_ = 1;
};

struct RestartInfo {
    double objective = 0.0;
    std::size_t evaluations = 0;
    bool converged = false;
    bool used_fallback = false;
};

/// Fitted CSM(lambda) parameters.
struct CsmFit {
    CategoricalDistribution initial;  ///< over N^(lambda+1) Z-states
    TransitionKernel kernel;
    double log_likelihood = 0.0;      ///< excludes the penalty
    double objective = 0.0;           ///< log_likelihood - penalty
    std::size_t dof = 0;
    PenaltyConfig penalty{};
    std::size_t best_restart = 0;
    std::vector<RestartInfo> restarts;

    std::size_t n_categories() const { return kernel.n_categories(); }
    std::size_t memory() const { return kernel.memory(); }

    /// q_t for t in [0, horizon).
    std::vector<CategoricalDistribution> zstate_trend(std::size_t horizon) const {
        std::vector<CategoricalDistribution> out;
        if (horizon == 0) return out;
        out.push_back(initial);
        for (std::size_t t = 1; t < horizon; ++t)
            out.emplace_back(CategoricalDistribution::normalized(step(kernel, out.back().probs())));
        return out;
    }

    /// p_t for t in [0, horizon).
    std::vector<CategoricalDistribution> trend(std::size_t horizon) const {
        auto q = zstate_trend(horizon);
        if (memory() == 0) return q;
        std::vector<CategoricalDistribution> out;
        out.reserve(q.size());
        for (const auto& d : q) out.push_back(reduce_distribution(d, n_categories()));
        return out;
    }

    CategoricalDistribution predict(std::size_t t) const { return trend(t + 1).back(); }
};

namespace detail {

/// Add-one smoothed first observed category distribution.
inline std::vector<double> first_observed_distribution(const DataSources& data, std::size_t n) {
    std::vector<double> counts(n, 1.0);
    auto from_series = [&](const CountSeries& s) {
        const auto times = s.observed_times();
        if (times.empty()) return false;
        for (std::size_t k = 0; k < n; ++k) counts[k] += static_cast<double>(s.count(times.front(), k));
        return true;
    };
    if (data.cross_sectional && from_series(*data.cross_sectional)) {
    } else if (data.longitudinal && !data.longitudinal->empty()) {
        int first = std::numeric_limits<int>::max();
        for (const auto& tr : *data.longitudinal) first = std::min(first, tr.first_time());
        for (const auto& tr : *data.longitudinal)
            if (tr.first_time() == first) counts[static_cast<std::size_t>(tr.categories.front())] += 1.0;
    } else if (data.anonymised) {
        from_series(*data.anonymised);
    }
    double sum = 0.0;
    for (double c : counts) sum += c;
    for (double& c : counts) c /= sum;
    return counts;
}

inline std::pair<CategoricalDistribution, TransitionKernel> heuristic_start(const DataSources& data, std::size_t n,
                                                                            std::size_t memory) {
    const auto p = first_observed_distribution(data, n);
    const std::size_t states = ipow(n, memory + 1);
    const double spread = static_cast<double>(ipow(n, memory));
    std::vector<double> q0(states), kernel(states * n);
    for (std::size_t xi = 0; xi < states; ++xi) {
        q0[xi] = p[xi % n] / spread;
        for (std::size_t k = 0; k < n; ++k) kernel[xi * n + k] = (k == xi % n ? 0.8 : 0.0) + 0.2 / static_cast<double>(n);
    }
    return {CategoricalDistribution::normalized(std::move(q0)), TransitionKernel(n, memory, std::move(kernel))};
}

inline std::vector<double> dirichlet_uniform(std::size_t size, Philox& rng) {
    // Dirichlet(1,...,1) via normalised unit exponentials.
    std::exponential_distribution<double> expo(1.0);
    std::vector<double> w(size);
    double sum = 0.0;
    for (double& v : w) {
        v = std::max(expo(rng), 1e-300);
        sum += v;
    }
    for (double& v : w) v /= sum;
    return w;
}

inline std::pair<CategoricalDistribution, TransitionKernel> random_start(std::size_t n, std::size_t memory,
                                                                         std::uint64_t seed) {
    Philox rng(seed);
    const std::size_t states = ipow(n, memory + 1);
    auto q0 = dirichlet_uniform(states, rng);
    std::vector<double> kernel;
    kernel.reserve(states * n);
    for (std::size_t xi = 0; xi < states; ++xi) {
        const auto col = dirichlet_uniform(n, rng);
        kernel.insert(kernel.end(), col.begin(), col.end());
    }
    return {CategoricalDistribution::normalized(std::move(q0)), TransitionKernel(n, memory, std::move(kernel))};
}

}  // namespace detail

/**
 * Maximum (penalised) likelihood fit of a CSM(lambda) model to any mixture of
 * cross-sectional, longitudinal and anonymised data. Restart 0 starts from the
 * empirical heuristic (or the warm start); the others from seeded Dirichlet draws.
 */
inline CsmFit fit_csm(const DataSources& data, const FitOptions& options) {
    options.validate();
    if (data.empty()) throw DataError("no data supplied");
    const CsmObjective objective(data, options.memory, options.penalty);
    const std::size_t n = objective.n_categories();

    struct Outcome {
        std::vector<double> probs;
        SimplexLayout layout;
        std::vector<double> x;
        RestartInfo info;
    };
    std::vector<Outcome> outcomes(options.multistart);
    parallel_for(options.multistart, options.threads, [&](std::size_t r) {
        auto start = r == 0 ? (options.warm_start ? *options.warm_start
                                                  : detail::heuristic_start(data, n, options.memory))
                            : detail::random_start(n, options.memory, derive_seed(options.seed, r));
        const SimplexLayout layout = objective.layout_for(start.first, start.second);
        const auto x0 = layout.encode(objective.pack(start.first, start.second));
        auto fg = [&](const std::vector<double>& x) {
            auto [v, g] = objective.value_and_gradient(layout, x);
            for (double& gi : g) gi = -gi;
            return std::make_pair(-v, std::move(g));
        };
        auto f = [&](const std::vector<double>& x) { return -objective.value(layout, x); };
        MinimizerOptions mo{options.max_evaluations, options.rel_tolerance};
        MinimizerResult res = minimize(fg, f, x0, mo);
        outcomes[r] = Outcome{{}, layout, std::move(res.x),
                              RestartInfo{-res.value, res.evaluations, res.converged, res.used_fallback}};
    });

    std::size_t best = outcomes.size();
    for (std::size_t r = 0; r < outcomes.size(); ++r) {
        const double v = outcomes[r].info.objective;
        if (!std::isfinite(v)) continue;
        if (best == outcomes.size() || v > outcomes[best].info.objective) best = r;
    }
    if (best == outcomes.size()) throw OptimizationFailure("no restart reached a finite objective");

    CsmFit fit;
    auto [initial, kernel] = objective.unpack(outcomes[best].layout, outcomes[best].x);
    fit.initial = std::move(initial);
    fit.kernel = std::move(kernel);
    fit.log_likelihood = objective.log_likelihood(fit.initial, fit.kernel);
    fit.objective = objective.objective(fit.initial, fit.kernel);
    fit.dof = dof(n, options.memory);
    fit.penalty = options.penalty;
    fit.best_restart = best;
    for (auto& o : outcomes) fit.restarts.push_back(o.info);
    if (!outcomes[best].info.converged)
        throw OptimizationFailure("optimiser did not converge within " + std::to_string(options.max_evaluations) +
                                  " evaluations (best objective " + std::to_string(fit.objective) + ", restart " +
                                  std::to_string(best) + ")");
    return fit;
}

// ---------------------------------------------------------------------------
// Multinomial logistic regression baseline: p_kt ∝ exp(a_k + b_k t), a_0 = b_0 = 0.
// ---------------------------------------------------------------------------

struct MlrFit {
    std::vector<double> intercepts;  ///< size N, entry 0 fixed at 0
    std::vector<double> slopes;      ///< size N, entry 0 fixed at 0
    double log_likelihood = 0.0;
    std::size_t dof = 0;

    std::size_t n_categories() const { return intercepts.size(); }

    CategoricalDistribution predict(double t) const {
        const std::size_t n = intercepts.size();
        std::vector<double> eta(n);
        double top = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < n; ++k) {
            eta[k] = intercepts[k] + slopes[k] * t;
            top = std::max(top, eta[k]);
        }
        for (double& e : eta) e = std::exp(e - top);
        return CategoricalDistribution::normalized(std::move(eta));
    }
};

namespace detail {

template <class T>
T mlr_log_likelihood(const CountSeries& counts, std::span<const T> params) {
    const std::size_t n = counts.n_categories();
    using std::exp;
    using std::log;
    T total(0.0);
    std::vector<T> eta(n);
    for (std::size_t t = 0; t < counts.horizon(); ++t) {
        if (counts.missing(t)) continue;
        const double tt = static_cast<double>(t);
        double top = 0.0;
        eta[0] = T(0.0);
        for (std::size_t k = 1; k < n; ++k) {
            eta[k] = params[2 * (k - 1)] + params[2 * (k - 1) + 1] * tt;
            top = std::max(top, value_of(eta[k]));
        }
        T sum(0.0);
        for (std::size_t k = 0; k < n; ++k) sum += exp(eta[k] - top);
        const T log_norm = log(sum) + top;
        for (std::size_t k = 0; k < n; ++k) {
            const auto c = counts.count(t, k);
            if (c > 0) add_scaled(total, static_cast<double>(c), eta[k] - log_norm);
        }
    }
    return total;
}

}  // namespace detail

inline MlrFit fit_mlr(const CountSeries& counts, const MinimizerOptions& minimizer = {}) {
    const auto times = counts.observed_times();
    if (times.size() < 2) throw DataError("multinomial logistic regression needs at least two observed time points");
    const std::size_t n = counts.n_categories();
    const std::size_t m = 2 * (n - 1);

    std::vector<double> pooled(n, 0.5);
    for (std::size_t t : times)
        for (std::size_t k = 0; k < n; ++k) pooled[k] += static_cast<double>(counts.count(t, k));
    std::vector<double> x0(m, 0.0);
    for (std::size_t k = 1; k < n; ++k) x0[2 * (k - 1)] = std::log(pooled[k] / pooled[0]);

    auto fg = [&](const std::vector<double>& x) {
        std::vector<Dual> vars;
        for (std::size_t i = 0; i < m; ++i) vars.push_back(Dual::variable(x[i], i, m));
        const Dual v = detail::mlr_log_likelihood<Dual>(counts, std::span<const Dual>(vars));
        std::vector<double> g(m);
        for (std::size_t i = 0; i < m; ++i) g[i] = -v.derivative(i);
        return std::make_pair(-v.value(), std::move(g));
    };
    auto f = [&](const std::vector<double>& x) {
        return -detail::mlr_log_likelihood<double>(counts, std::span<const double>(x));
    };
    const MinimizerResult res = minimize(fg, f, x0, minimizer);
    if (!std::isfinite(res.value)) throw OptimizationFailure("logistic regression objective is not finite");

    MlrFit fit;
    fit.intercepts.assign(n, 0.0);
    fit.slopes.assign(n, 0.0);
    for (std::size_t k = 1; k < n; ++k) {
        fit.intercepts[k] = res.x[2 * (k - 1)];
        fit.slopes[k] = res.x[2 * (k - 1) + 1];
    }
    fit.log_likelihood = -res.value;
    fit.dof = mlr_dof(n);
    return fit;
}

}  // namespace csm
