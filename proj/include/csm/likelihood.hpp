#pragma once

#include "csm/core.hpp"
#include "csm/dual.hpp"
#include "csm/types.hpp"

#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace csm {

// ---------------------------------------------------------------------------
// Regularisation
// ---------------------------------------------------------------------------

enum class PenaltyKind { none, ridge_to_target, structured_jump };

/**
 * ridge_to_target:  lambda1 * sum_{k,xi} (pi_{k,xi} - lambda2 * delta(k, xi_0))^2
 * structured_jump:  lambda1 * sum_{|k-l| > jump_threshold} pi_{kl}^2   (memoryless only)
 */
struct PenaltyConfig {
    PenaltyKind kind = PenaltyKind::none;
    double lambda1 = 0.0;
    double lambda2 = 0.0;
    std::size_t jump_threshold = 1;

    void validate() const {
        if (!(lambda1 >= 0.0)) throw DataError("penalty strength must be non-negative");
        if (!(lambda2 >= 0.0 && lambda2 <= 1.0)) throw DataError("penalty target must lie in [0,1]");
        if (kind == PenaltyKind::structured_jump && jump_threshold < 1)
            throw DataError("jump threshold must be positive");
    }

    friend bool operator==(const PenaltyConfig&, const PenaltyConfig&) = default;
};

inline const char* to_string(PenaltyKind kind) {
    switch (kind) {
        case PenaltyKind::none: return "none";
        case PenaltyKind::ridge_to_target: return "ridge";
        case PenaltyKind::structured_jump: return "structured";
    }
    return "none";
}

namespace detail {

template <class T>
T clamped_log(const T& x, double floor) {
    using std::log;
    if (value_of(x) < floor) {
        if constexpr (std::is_same_v<T, Dual>) {
            std::vector<double> d = x.tangent();
            for (double& v : d) v /= floor;
            return Dual(std::log(floor), std::move(d));
        } else {
            return T(std::log(floor));
        }
    }
    return log(x);
}

template <class T>
T penalty_value(std::size_t n, std::size_t memory, std::span<const T> kernel, const PenaltyConfig& config) {
    T total(0.0);
    if (config.kind == PenaltyKind::none || config.lambda1 == 0.0) return total;
    const std::size_t conditions = ipow(n, memory + 1);
    if (config.kind == PenaltyKind::ridge_to_target) {
        for (std::size_t xi = 0; xi < conditions; ++xi)
            for (std::size_t k = 0; k < n; ++k) {
                T diff = kernel[xi * n + k];
                if (k == xi % n) diff -= config.lambda2;
                fma_into(total, diff, diff);
            }
    } else {
        if (memory != 0) throw DataError("structured jump penalty requires a memoryless kernel");
        for (std::size_t l = 0; l < n; ++l)
            for (std::size_t k = 0; k < n; ++k) {
                const std::size_t jump = k > l ? k - l : l - k;
                if (jump > config.jump_threshold) fma_into(total, kernel[l * n + k], kernel[l * n + k]);
            }
    }
    total *= config.lambda1;
    return total;
}

/// q_t = zeta^t q_0 for t in [0, horizon).
template <class T>
std::vector<std::vector<T>> zstate_trend(std::size_t n, std::size_t memory, std::span<const T> q0,
                                         std::span<const T> kernel, std::size_t horizon) {
    std::vector<std::vector<T>> trend;
    trend.reserve(horizon);
    if (horizon == 0) return trend;
    trend.emplace_back(q0.begin(), q0.end());
    for (std::size_t t = 1; t < horizon; ++t) {
        std::vector<T> next(q0.size());
        step_zstate<T, T>(n, memory, kernel, std::span<const T>(trend.back()), std::span<T>(next));
        trend.push_back(std::move(next));
    }
    return trend;
}

template <class T>
T cs_term(const CountSeries& counts, const std::vector<std::vector<T>>& trend, double floor) {
    const std::size_t n = counts.n_categories();
    T total(0.0);
    std::vector<T> p(n);
    for (std::size_t t = 0; t < counts.horizon(); ++t) {
        if (counts.missing(t)) continue;
        reduce_zstate<T>(n, std::span<const T>(trend[t]), std::span<T>(p));
        for (std::size_t k = 0; k < n; ++k) {
            const auto c = counts.count(t, k);
            if (c == 0) continue;
            add_scaled(total, static_cast<double>(c), clamped_log(p[k], floor));
        }
    }
    return total;
}

/// Per-time totals must agree and no interior point may be missing.
inline std::vector<std::size_t> validate_anonymised(const CountSeries& counts) {
    const auto times = counts.observed_times();
    if (times.empty()) throw DataError("anonymised series has no observations");
    for (std::size_t i = 1; i < times.size(); ++i) {
        if (times[i] != times[i - 1] + 1)
            throw DataError("anonymised series has a missing interior time point at t=" +
                            std::to_string(times[i - 1] + 1));
        if (counts.total(times[i]) != counts.total(times[0]))
            throw DataError("anonymised series has unequal per-time totals (t=" + std::to_string(times[i]) + ")");
    }
    return times;
}

template <class T>
T anonymised_term(const CountSeries& counts, std::span<const T> p0, std::span<const T> kernel, double floor) {
    const auto times = validate_anonymised(counts);
    const std::size_t n = counts.n_categories();
    T total(0.0);
    // First observed point: unconditional model prediction pi^{t0} p0.
    std::vector<T> p(p0.begin(), p0.end()), next(n);
    for (std::size_t s = 0; s < times.front(); ++s) {
        step_zstate<T, T>(n, 0, kernel, std::span<const T>(p), std::span<T>(next));
        std::swap(p, next);
    }
    auto add_term = [&](std::size_t t, const std::vector<T>& pred) {
        for (std::size_t k = 0; k < n; ++k) {
            const auto c = counts.count(t, k);
            if (c == 0) continue;
            add_scaled(total, static_cast<double>(c), clamped_log(pred[k], floor));
        }
    };
    add_term(times.front(), p);
    for (std::size_t i = 1; i < times.size(); ++i) {
        const auto observed = counts.empirical(times[i - 1]);
        std::vector<T> pred(n, T(0.0));
        for (std::size_t l = 0; l < n; ++l) {
            if (observed[l] == 0.0) continue;
            for (std::size_t k = 0; k < n; ++k) fma_into(pred[k], kernel[l * n + k], observed[l]);
        }
        add_term(times[i], pred);
    }
    return total;
}

// ---------------------------------------------------------------------------
// Compiled trajectories. Each trajectory is split at the times where its Z-state
// is fully observed; identical pieces are merged with a multiplicity. Single-step
// pieces between determined states collapse into transition counts.
// ---------------------------------------------------------------------------

struct TrajectoryPiece {
    bool from_initial = false;
    int start_time = 0;                     ///< from_initial: time of the first observation
    std::size_t start_state = 0;            ///< !from_initial: determined Z-state at piece start
    std::vector<std::pair<int, int>> steps; ///< (time increment, observed category); from_initial starts with (0, k0)

    friend auto operator<=>(const TrajectoryPiece&, const TrajectoryPiece&) = default;
    friend bool operator==(const TrajectoryPiece&, const TrajectoryPiece&) = default;
};

struct CompiledTrajectories {
    std::size_t n_categories = 0;
    std::size_t memory = 0;
    std::vector<std::pair<TrajectoryPiece, double>> pieces;
    std::vector<double> transition_counts;  ///< [xi * N + k]
    int max_start_time = 0;
    std::size_t n_trajectories = 0;
};

inline CompiledTrajectories compile_trajectories(const TrajectorySet& theta, std::size_t memory) {
    const std::size_t n = theta.n_categories();
    CompiledTrajectories out;
    out.n_categories = n;
    out.memory = memory;
    out.n_trajectories = theta.size();
    out.transition_counts.assign(ipow(n, memory + 1) * n, 0.0);
    std::map<TrajectoryPiece, double> merged;

    auto finish = [&](TrajectoryPiece&& piece) {
        if (!piece.from_initial && piece.steps.size() == 1 && piece.steps[0].first == 1) {
            out.transition_counts[piece.start_state * n + static_cast<std::size_t>(piece.steps[0].second)] += 1.0;
            return;
        }
        if (piece.from_initial) out.max_start_time = std::max(out.max_start_time, piece.start_time);
        merged[std::move(piece)] += 1.0;
    };

    for (const Trajectory& tr : theta) {
        TrajectoryPiece piece;
        piece.from_initial = true;
        piece.start_time = tr.times[0];
        piece.steps.emplace_back(0, tr.categories[0]);
        for (std::size_t s = 0; s < tr.size(); ++s) {
            if (s > 0) piece.steps.emplace_back(tr.times[s] - tr.times[s - 1], tr.categories[s]);
            bool determined = s >= memory;
            for (std::size_t j = 1; determined && j <= memory; ++j)
                determined = tr.times[s - j] == tr.times[s] - static_cast<int>(j);
            if (determined && s + 1 < tr.size()) {
                std::size_t state = 0, scale = 1;
                for (std::size_t j = 0; j <= memory; ++j) {
                    state += static_cast<std::size_t>(tr.categories[s - j]) * scale;
                    scale *= n;
                }
                finish(std::move(piece));
                piece = TrajectoryPiece{};
                piece.start_state = state;
            }
        }
        finish(std::move(piece));
    }
    out.pieces.assign(merged.begin(), merged.end());
    return out;
}

/// Probability of one piece; `initial_trend[t]` must hold q_t for t <= max_start_time.
template <class T>
T piece_probability(const CompiledTrajectories& compiled, const TrajectoryPiece& piece,
                    const std::vector<std::vector<T>>& initial_trend, std::span<const T> kernel) {
    const std::size_t n = compiled.n_categories;
    const std::size_t dim = ipow(n, compiled.memory + 1);
    const std::size_t shift = ipow(n, compiled.memory);
    std::vector<T> cur(dim), next(dim);
    std::vector<char> active(dim, 0), next_active(dim, 0);
    std::vector<std::size_t> support, next_support;

    std::size_t first_step = 0;
    if (piece.from_initial) {
        const auto& q = initial_trend[static_cast<std::size_t>(piece.start_time)];
        const auto k0 = static_cast<std::size_t>(piece.steps[0].second);
        for (std::size_t xi = k0; xi < dim; xi += n) {
            cur[xi] = q[xi];
            active[xi] = 1;
            support.push_back(xi);
        }
        first_step = 1;
    } else {
        cur[piece.start_state] = T(1.0);
        active[piece.start_state] = 1;
        support.push_back(piece.start_state);
    }

    for (std::size_t s = first_step; s < piece.steps.size(); ++s) {
        const auto [dt, category] = piece.steps[s];
        for (int sub = 0; sub < dt; ++sub) {
            const bool last = sub + 1 == dt;
            next_support.clear();
            for (std::size_t xi : support) {
                const std::size_t base = n * (xi % shift);
                const std::size_t k_lo = last ? static_cast<std::size_t>(category) : 0;
                const std::size_t k_hi = last ? k_lo + 1 : n;
                for (std::size_t k = k_lo; k < k_hi; ++k) {
                    const std::size_t row = base + k;
                    if (!next_active[row]) {
                        next_active[row] = 1;
                        next[row] = T(0.0);
                        next_support.push_back(row);
                    }
                    fma_into(next[row], kernel[xi * n + k], cur[xi]);
                }
            }
            for (std::size_t xi : support) active[xi] = 0;
            std::swap(cur, next);
            std::swap(active, next_active);
            std::swap(support, next_support);
        }
    }
    T total(0.0);
    for (std::size_t xi : support) total += cur[xi];
    return total;
}

template <class T>
T longitudinal_term(const CompiledTrajectories& compiled, const std::vector<std::vector<T>>& initial_trend,
                    std::span<const T> kernel, double floor) {
    T total(0.0);
    for (std::size_t i = 0; i < compiled.transition_counts.size(); ++i) {
        const double c = compiled.transition_counts[i];
        if (c == 0.0) continue;
        add_scaled(total, c, clamped_log(kernel[i], floor));
    }
    for (const auto& [piece, multiplicity] : compiled.pieces) {
        const T p = piece_probability(compiled, piece, initial_trend, kernel);
        add_scaled(total, multiplicity, clamped_log(p, floor));
    }
    return total;
}

inline void check_initial(const CategoricalDistribution& initial, const TransitionKernel& kernel, const char* op) {
    require_dimension(initial.size(), kernel.n_conditions(), op);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Public objective functions (double precision)
// ---------------------------------------------------------------------------

/**
 * Cross-sectional log-likelihood sum_t sum_k n_kt ln p_kt with p_t the reduction
 * of zeta^t q_0 (p_t = pi^t p_0 for a memoryless kernel). Missing time points
 * contribute nothing.
 */
inline double cs_log_likelihood(const CountSeries& counts, const CategoricalDistribution& initial,
                                const TransitionKernel& kernel, const Tolerances& tol = kTolerances) {
    detail::require_dimension(counts.n_categories(), kernel.n_categories(), "cs_log_likelihood");
    detail::check_initial(initial, kernel, "cs_log_likelihood");
    const auto trend = detail::zstate_trend<double>(kernel.n_categories(), kernel.memory(), initial.probs(),
                                                    kernel.entries(), counts.horizon());
    double total = 0.0;
    std::vector<double> p(counts.n_categories());
    for (std::size_t t = 0; t < counts.horizon(); ++t) {
        if (counts.missing(t)) continue;
        detail::reduce_zstate<double>(counts.n_categories(), trend[t], p);
        for (std::size_t k = 0; k < p.size(); ++k)
            if (counts.count(t, k) > 0)
                total += static_cast<double>(counts.count(t, k)) * std::log(std::max(p[k], tol.log_floor));
    }
    return total;
}

/// Likelihood of one memoryless trajectory, gaps bridged by matrix powers.
inline double trajectory_likelihood(const Trajectory& traj, const CategoricalDistribution& p0,
                                    const TransitionKernel& kernel) {
    detail::require_memoryless(kernel, "trajectory_likelihood");
    detail::require_dimension(p0.size(), kernel.n_categories(), "trajectory_likelihood");
    const std::size_t n = kernel.n_categories();
    const auto start = propagate(p0, kernel, static_cast<std::size_t>(traj.times[0]));
    double likelihood = start[static_cast<std::size_t>(traj.categories[0])];
    std::map<int, std::vector<double>> powers;
    for (std::size_t s = 1; s < traj.size(); ++s) {
        const int gap = traj.times[s] - traj.times[s - 1];
        auto it = powers.find(gap);
        if (it == powers.end()) it = powers.emplace(gap, matrix_power(kernel, static_cast<std::size_t>(gap))).first;
        const auto k = static_cast<std::size_t>(traj.categories[s]);
        const auto l = static_cast<std::size_t>(traj.categories[s - 1]);
        likelihood *= it->second[l * n + k];
    }
    return likelihood;
}

/// Admissible Z-states per time point of a trajectory.
struct SigmaSet {
    std::size_t n_categories = 0;
    std::size_t memory = 0;
    int first_time = 0;
    std::vector<std::vector<std::size_t>> admissible;  ///< admissible[t - first_time], sorted Z-state indices

    const std::vector<std::size_t>& at(int t) const { return admissible.at(static_cast<std::size_t>(t - first_time)); }

    /// Members at time t as sequences (x_t, x_{t-1}, ..., x_{t-memory}).
    std::vector<std::vector<std::size_t>> sequences(int t) const {
        std::vector<std::vector<std::size_t>> out;
        for (std::size_t xi : at(t)) out.push_back(zstate_sequence(xi, n_categories, memory + 1));
        return out;
    }
};

/**
 * For every t in [t_first, t_last], all xi in [0,N-1]^(lambda+1) whose coordinate j
 * agrees with the observation at t-j wherever one exists.
 */
inline SigmaSet sigma_sets(const Trajectory& traj, std::size_t memory, std::size_t n_categories) {
    SigmaSet sigma{n_categories, memory, traj.first_time(), {}};
    const std::size_t dim = ipow(n_categories, memory + 1);
    std::map<int, std::size_t> observed;
    for (std::size_t s = 0; s < traj.size(); ++s)
        observed[traj.times[s]] = static_cast<std::size_t>(traj.categories[s]);
    for (int t = traj.first_time(); t <= traj.last_time(); ++t) {
        std::vector<std::size_t> members;
        for (std::size_t xi = 0; xi < dim; ++xi) {
            const auto seq = zstate_sequence(xi, n_categories, memory + 1);
            bool ok = true;
            for (std::size_t j = 0; ok && j <= memory; ++j) {
                auto it = observed.find(t - static_cast<int>(j));
                if (it != observed.end()) ok = it->second == seq[j];
            }
            if (ok) members.push_back(xi);
        }
        sigma.admissible.push_back(std::move(members));
    }
    return sigma;
}

/**
 * Likelihood of a trajectory under a memory kernel: sum over admissible Z-state
 * paths of q_{xi_0, t_first} times the product of zeta entries, evaluated as a
 * forward recursion restricted to the sigma sets.
 */
inline double memory_trajectory_likelihood(const Trajectory& traj, const CategoricalDistribution& q0,
                                           const TransitionKernel& kernel) {
    detail::check_initial(q0, kernel, "memory_trajectory_likelihood");
    const std::size_t n = kernel.n_categories();
    const SigmaSet sigma = sigma_sets(traj, kernel.memory(), n);
    const auto start = propagate_zstates(q0, kernel, static_cast<std::size_t>(traj.first_time()));
    const std::size_t dim = kernel.n_conditions();

    auto restrict_to = [&](std::vector<double>& alpha, int t) {
        std::vector<double> kept(dim, 0.0);
        for (std::size_t xi : sigma.at(t)) kept[xi] = alpha[xi];
        alpha = std::move(kept);
    };
    std::vector<double> alpha = start.vector();
    restrict_to(alpha, traj.first_time());
    for (int t = traj.first_time() + 1; t <= traj.last_time(); ++t) {
        alpha = step(kernel, alpha);
        restrict_to(alpha, t);
    }
    double total = 0.0;
    for (double a : alpha) total += a;
    return total;
}

/**
 * Sum over trajectories of the log-likelihood. Memoryless kernels use the
 * matrix-power product, memory kernels the sigma-set recursion.
 * Throws ImpossibleObservation for a zero-probability trajectory.
 */
inline double long_log_likelihood(const TrajectorySet& theta, const CategoricalDistribution& initial,
                                  const TransitionKernel& kernel) {
    detail::require_dimension(theta.n_categories(), kernel.n_categories(), "long_log_likelihood");
    detail::check_initial(initial, kernel, "long_log_likelihood");
    double total = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double p = kernel.memory() == 0 ? trajectory_likelihood(theta[i], initial, kernel)
                                              : memory_trajectory_likelihood(theta[i], initial, kernel);
        if (p <= 0.0) throw ImpossibleObservation(i);
        total += std::log(p);
    }
    return total;
}

/// Same objective through the compiled-piece route used by the estimator.
inline double compiled_log_likelihood(const detail::CompiledTrajectories& compiled, const CategoricalDistribution& initial,
                                      const TransitionKernel& kernel, const Tolerances& tol = kTolerances) {
    const auto trend = detail::zstate_trend<double>(kernel.n_categories(), kernel.memory(), initial.probs(),
                                                    kernel.entries(),
                                                    static_cast<std::size_t>(compiled.max_start_time) + 1);
    return detail::longitudinal_term<double>(compiled, trend, kernel.entries(), tol.log_floor);
}

/**
 * Anonymised-cohort log-likelihood: the first observed point is scored against
 * pi^t p_0, every later point against pi applied to the previous observed
 * distribution.
 */
inline double anonymised_log_likelihood(const CountSeries& counts, const CategoricalDistribution& p0,
                                        const TransitionKernel& kernel, const Tolerances& tol = kTolerances) {
    detail::require_memoryless(kernel, "anonymised_log_likelihood");
    detail::require_dimension(counts.n_categories(), kernel.n_categories(), "anonymised_log_likelihood");
    detail::require_dimension(p0.size(), kernel.n_categories(), "anonymised_log_likelihood");
    return detail::anonymised_term<double>(counts, p0.probs(), kernel.entries(), tol.log_floor);
}

/// Regularisation term subtracted from the log-likelihood.
inline double penalty(const TransitionKernel& kernel, const PenaltyConfig& config) {
    config.validate();
    return detail::penalty_value<double>(kernel.n_categories(), kernel.memory(), kernel.entries(), config);
}

/// D_KL(p_obs || p_model) with 0 ln 0 = 0 and the model probability clamped at the log floor.
inline double kl_divergence(const CategoricalDistribution& p_obs, const CategoricalDistribution& p_model,
                            const Tolerances& tol = kTolerances) {
    detail::require_dimension(p_model.size(), p_obs.size(), "kl_divergence");
    double d = 0.0;
    for (std::size_t k = 0; k < p_obs.size(); ++k) {
        if (p_obs[k] == 0.0) continue;
        d += p_obs[k] * (std::log(p_obs[k]) - std::log(std::max(p_model[k], tol.log_floor)));
    }
    return std::max(d, 0.0);
}

/// sum_t n_t D_KL(p_obs_t || predicted(t)) over non-missing time points.
template <class Predict>
double weighted_kl(const CountSeries& counts, Predict&& predicted) {
    double total = 0.0;
    for (std::size_t t = 0; t < counts.horizon(); ++t) {
        if (counts.missing(t)) continue;
        total += static_cast<double>(counts.total(t)) * kl_divergence(counts.empirical(t), predicted(t));
    }
    return total;
}

/// Data-only constant C with cs_log_likelihood = -weighted_kl + C, i.e. sum n_kt ln p_obs_kt.
inline double cs_entropy_constant(const CountSeries& counts) {
    double c = 0.0;
    for (std::size_t t = 0; t < counts.horizon(); ++t) {
        const double n = static_cast<double>(counts.total(t));
        for (std::size_t k = 0; k < counts.n_categories(); ++k) {
            const double nk = static_cast<double>(counts.count(t, k));
            if (nk > 0.0) c += nk * std::log(nk / n);
        }
    }
    return c;
}

}  // namespace csm
