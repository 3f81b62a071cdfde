#pragma once

#include "csm/core.hpp"
#include "csm/estimation.hpp"
#include "csm/parallel.hpp"
#include "csm/random.hpp"
#include "csm/types.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace csm {

/// Parameters of a synthetic longitudinal panel.
struct GeneratorSpec {
    CategoricalDistribution initial_joint;  ///< over Z-states (x_0, x_-1, ..., x_-lambda)
    TransitionKernel kernel;
    std::size_t n_trajectories = 0;
    std::size_t length = 0;
    std::uint64_t seed = 0;

    void validate() const {
        if (initial_joint.size() != kernel.n_conditions())
            throw DimensionMismatch("generator initial state has " + std::to_string(initial_joint.size()) +
                                    " entries, kernel expects " + std::to_string(kernel.n_conditions()));
        if (n_trajectories == 0) throw DataError("generator needs at least one trajectory");
        if (length == 0) throw DataError("generator trajectory length must be positive");
    }
};

namespace detail {

inline double unit_uniform(Philox& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline std::size_t draw_categorical(std::span<const double> probs, Philox& rng) {
    const double u = unit_uniform(rng);
    double acc = 0.0;
    for (std::size_t k = 0; k < probs.size(); ++k) {
        acc += probs[k];
        if (u < acc) return k;
    }
    for (std::size_t k = probs.size(); k-- > 0;)
        if (probs[k] > 0.0) return k;
    return probs.size() - 1;
}

}  // namespace detail

/// Complete trajectories t = 0..length-1; trajectory i uses substream i of the seed.
inline TrajectorySet generate_synthetic(const GeneratorSpec& spec, std::size_t threads = 1) {
    spec.validate();
    const std::size_t n = spec.kernel.n_categories();
    const std::size_t shift = ipow(n, spec.kernel.memory());
    std::vector<Trajectory> out(spec.n_trajectories);
    parallel_for(spec.n_trajectories, threads, [&](std::size_t i) {
        Philox rng(spec.seed, i);
        std::size_t z = detail::draw_categorical(spec.initial_joint.probs(), rng);
        Trajectory& tr = out[i];
        tr.id = std::to_string(i);
        tr.times.resize(spec.length);
        tr.categories.resize(spec.length);
        for (std::size_t t = 0; t < spec.length; ++t) {
            if (t > 0) {
                const std::size_t k = detail::draw_categorical(spec.kernel.column(z), rng);
                z = k + n * (z % shift);
            }
            tr.times[t] = static_cast<int>(t);
            tr.categories[t] = static_cast<int>(z % n);
        }
    });
    return TrajectorySet(n, std::move(out));
}

/// n_lt = number of observations of category l at time t (times >= horizon ignored).
inline CountSeries reduce_to_cross_sectional(const TrajectorySet& theta, std::size_t horizon) {
    CountSeries counts(theta.n_categories(), horizon);
    for (const auto& tr : theta)
        for (std::size_t s = 0; s < tr.size(); ++s) {
            const auto t = static_cast<std::size_t>(tr.times[s]);
            if (t >= horizon) continue;
            const auto k = static_cast<std::size_t>(tr.categories[s]);
            counts.set(t, k, counts.count(t, k) + 1);
        }
    return counts;
}

inline CountSeries reduce_to_cross_sectional(const TrajectorySet& theta) {
    return reduce_to_cross_sectional(theta, theta.empty() ? 0 : theta.horizon());
}

/// Piecewise-homogeneous ageing-cohort schedule.
struct CohortSpec {
    std::vector<TransitionKernel> bracket_kernels;  ///< one memoryless kernel per age bracket, in order
    std::size_t bracket_length = 1;                 ///< years per bracket
    CategoricalDistribution start;
    std::size_t horizon = 0;                        ///< number of years projected
};

/// p_0 .. p_horizon; bracket j drives years [j*l, (j+1)*l), the last one every year after.
inline std::vector<CategoricalDistribution> cohort_project(const CohortSpec& spec) {
    if (spec.bracket_kernels.empty()) throw DataError("cohort projection needs at least one bracket");
    if (spec.bracket_length == 0) throw DataError("bracket length must be positive");
    const std::size_t n = spec.bracket_kernels.front().n_categories();
    for (const auto& k : spec.bracket_kernels) {
        detail::require_memoryless(k, "cohort_project");
        detail::require_dimension(k.n_categories(), n, "cohort_project");
    }
    detail::require_dimension(spec.start.size(), n, "cohort_project");
    std::vector<CategoricalDistribution> out{spec.start};
    for (std::size_t year = 0; year < spec.horizon; ++year) {
        const std::size_t j = std::min(year / spec.bracket_length, spec.bracket_kernels.size() - 1);
        out.push_back(CategoricalDistribution::normalized(step(spec.bracket_kernels[j], out.back().probs())));
    }
    return out;
}

/**
 * Joint law of (X_t, ..., X_{t+steps}) at one time point. Entries are indexed
 * like Z-states: x_{t+steps} + N x_{t+steps-1} + ... + N^steps x_t.
 */
struct JointTransitionTable {
    std::size_t time = 0;
    std::size_t steps = 1;
    std::vector<double> probs;
    bool model_implied = false;  ///< the horizon exceeds the estimated memory (Markov chaining)

    double operator()(std::span<const std::size_t> future_to_current, std::size_t n) const {
        return probs[zstate_index(future_to_current, n)];
    }
};

/// Tables for t in [0, horizon) along the fitted trend.
inline std::vector<JointTransitionTable> joint_transition_probabilities(const CsmFit& fit, std::size_t horizon,
                                                                        std::size_t steps) {
    if (steps < 1) throw DataError("joint transition needs at least one step");
    const std::size_t n = fit.n_categories();
    const std::size_t states = fit.kernel.n_conditions();
    const std::size_t keep = ipow(n, steps + 1);
    const auto q = fit.zstate_trend(horizon);
    std::vector<JointTransitionTable> out;
    out.reserve(horizon);
    for (std::size_t t = 0; t < horizon; ++t) {
        // extended state (x_{t+s}, ..., x_t, ..., x_{t-lambda})
        std::vector<double> ext(q[t].begin(), q[t].end());
        for (std::size_t s = 0; s < steps; ++s) {
            std::vector<double> next(ext.size() * n, 0.0);
            for (std::size_t e = 0; e < ext.size(); ++e) {
                if (ext[e] == 0.0) continue;
                const std::size_t cond = e % states;  // the most recent lambda+1 coordinates
                const auto col = fit.kernel.column(cond);
                for (std::size_t k = 0; k < n; ++k) next[k + n * e] += col[k] * ext[e];
            }
            ext = std::move(next);
        }
        JointTransitionTable table{t, steps, std::vector<double>(keep, 0.0), steps > fit.memory() + 1};
        for (std::size_t e = 0; e < ext.size(); ++e) table.probs[e % keep] += ext[e];
        out.push_back(std::move(table));
    }
    return out;
}

}  // namespace csm
