#pragma once

#include "csm/types.hpp"

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace csm {

namespace detail {

inline void fma_into(double& acc, double a, double b) { acc += a * b; }

/// out = zeta * q for the Z-state chain of a memory-lambda kernel (kernel laid
/// out as entries[xi * N + k]). Column xi only feeds rows k + N * (xi mod N^lambda).
template <class T, class K>
void step_zstate(std::size_t n, std::size_t memory, std::span<const K> kernel, std::span<const T> q,
                 std::span<T> out) {
    const std::size_t dim = q.size();
    const std::size_t shift = ipow(n, memory);
    for (auto& v : out) v = T(0.0);
    for (std::size_t xi = 0; xi < dim; ++xi) {
        const std::size_t base = n * (xi % shift);
        const T& mass = q[xi];
        for (std::size_t k = 0; k < n; ++k) fma_into(out[base + k], kernel[xi * n + k], mass);
    }
}

/// Marginal over the most recent coordinate of a Z-state distribution.
template <class T>
void reduce_zstate(std::size_t n, std::span<const T> q, std::span<T> out) {
    for (auto& v : out) v = T(0.0);
    for (std::size_t xi = 0; xi < q.size(); ++xi) out[xi % n] += q[xi];
}

inline std::vector<double> multiply_dense(std::size_t n, std::span<const double> a,
                                          std::span<const double> b) {
    // column-major n x n products
    std::vector<double> c(n * n, 0.0);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t l = 0; l < n; ++l) {
            const double blj = b[j * n + l];
            if (blj == 0.0) continue;
            for (std::size_t i = 0; i < n; ++i) c[j * n + i] += a[l * n + i] * blj;
        }
    return c;
}

inline void require_memoryless(const TransitionKernel& kernel, const char* op) {
    if (kernel.memory() != 0)
        throw DimensionMismatch(std::string(op) + " requires a memoryless kernel");
}

inline void require_dimension(std::size_t got, std::size_t expected, const char* op) {
    if (got != expected)
        throw DimensionMismatch(std::string(op) + ": dimension " + std::to_string(got) +
                                " does not match " + std::to_string(expected));
}

}  // namespace detail

/// One step of the Z-state chain: returns zeta * q (q over N^(memory+1) states).
inline std::vector<double> step(const TransitionKernel& kernel, std::span<const double> q) {
    detail::require_dimension(q.size(), kernel.n_conditions(), "step");
    std::vector<double> out(q.size());
    detail::step_zstate<double, double>(kernel.n_categories(), kernel.memory(), kernel.entries(), q, out);
    return out;
}

/// p_t = pi^t p_0.
inline CategoricalDistribution propagate(const CategoricalDistribution& p0, const TransitionKernel& kernel,
                                         std::size_t t) {
    detail::require_memoryless(kernel, "propagate");
    detail::require_dimension(p0.size(), kernel.n_categories(), "propagate");
    std::vector<double> p = p0.vector();
    for (std::size_t s = 0; s < t; ++s) p = step(kernel, p);
    return CategoricalDistribution(std::move(p));
}

/// Distribution over Z-states after t steps, q_t = zeta^t q_0.
inline CategoricalDistribution propagate_zstates(const CategoricalDistribution& q0,
                                                 const TransitionKernel& kernel, std::size_t t) {
    detail::require_dimension(q0.size(), kernel.n_conditions(), "propagate_zstates");
    std::vector<double> q = q0.vector();
    for (std::size_t s = 0; s < t; ++s) q = step(kernel, q);
    return CategoricalDistribution(std::move(q));
}

/// (pi^t) as a dense column-major N x N matrix, by repeated multiplication.
inline std::vector<double> matrix_power(const TransitionKernel& kernel, std::size_t t) {
    detail::require_memoryless(kernel, "matrix_power");
    const std::size_t n = kernel.n_categories();
    std::vector<double> result(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) result[i * n + i] = 1.0;
    const std::span<const double> pi = kernel.entries();
    for (std::size_t s = 0; s < t; ++s) result = detail::multiply_dense(n, pi, result);
    return result;
}

/**
 * Builds the N^(lambda+1)-state chain
 *   zeta_{xi', xi} = delta(xi'_1..lambda, xi_0..lambda-1) * pi_{xi'_0, xi}.
 */
inline EmbeddedKernel embed_memory(const TransitionKernel& kernel) {
    const std::size_t n = kernel.n_categories();
    const std::size_t dim = kernel.n_conditions();
    const std::size_t shift = ipow(n, kernel.memory());
    EmbeddedKernel z{kernel, dim, std::vector<double>(dim * dim, 0.0)};
    for (std::size_t xi = 0; xi < dim; ++xi) {
        const std::size_t base = n * (xi % shift);
        for (std::size_t k = 0; k < n; ++k) z.matrix[xi * dim + base + k] = kernel(k, xi);
    }
    return z;
}

/// Marginalises a Z-state distribution onto its most recent coordinate.
inline CategoricalDistribution reduce_distribution(const CategoricalDistribution& q, std::size_t n_categories) {
    memory_from_dimension(q.size(), n_categories);
    std::vector<double> p(n_categories);
    detail::reduce_zstate<double>(n_categories, q.probs(), p);
    return CategoricalDistribution(std::move(p));
}

/// Signed change of each category share after `steps` transitions:
/// sum_l ((pi^steps)_{kl} - delta_{kl}) p_l.
inline std::vector<double> category_flow(const CategoricalDistribution& p, const TransitionKernel& kernel,
                                         std::size_t steps) {
    detail::require_memoryless(kernel, "category_flow");
    detail::require_dimension(p.size(), kernel.n_categories(), "category_flow");
    const std::size_t n = p.size();
    const std::vector<double> power = matrix_power(kernel, steps);
    std::vector<double> flow(n, 0.0);
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t l = 0; l < n; ++l)
            flow[k] += (power[l * n + k] - (k == l ? 1.0 : 0.0)) * p[l];
    return flow;
}

namespace detail {

struct PowerIterationResult {
    std::vector<double> p;
    bool converged = false;
    bool oscillating = false;
};

inline double l1_distance(std::span<const double> a, std::span<const double> b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d += std::abs(a[i] - b[i]);
    return d;
}

/// Power iteration with detection of short periodic orbits.
inline PowerIterationResult power_iterate(const TransitionKernel& kernel, std::vector<double> p,
                                          const Tolerances& tol) {
    constexpr std::size_t kMaxPeriod = 8;
    std::array<std::vector<double>, kMaxPeriod + 1> history;
    for (std::size_t it = 0; it < tol.steady_state_max_iterations; ++it) {
        std::vector<double> next = step(kernel, p);
        const double residual = l1_distance(next, p);
        if (residual < tol.steady_state) {
            double sum = 0.0;
            for (double v : next) sum += v;
            for (double& v : next) v /= sum;
            return {std::move(next), true, false};
        }
        history[it % (kMaxPeriod + 1)] = p;
        for (std::size_t period = 2; period <= kMaxPeriod && period <= it; ++period) {
            const auto& back = history[(it + 1 - period) % (kMaxPeriod + 1)];
            if (l1_distance(next, back) < tol.steady_state * 1e-2) return {std::move(next), false, true};
        }
        p = std::move(next);
    }
    return {std::move(p), false, false};
}

}  // namespace detail

/**
 * Fixed point of a column-stochastic chain over its full state space (N states
 * for a memoryless kernel, N^(lambda+1) Z-states otherwise). Power iteration from
 * the uniform distribution; two vertex starts probe for periodicity and for a
 * non-unique fixed point.
 */
inline CategoricalDistribution steady_state_zstates(const TransitionKernel& kernel,
                                                    const Tolerances& tol = kTolerances) {
    const std::size_t dim = kernel.n_conditions();
    auto from_uniform = detail::power_iterate(kernel, std::vector<double>(dim, 1.0 / dim), tol);
    if (!from_uniform.converged)
        throw NonConvergence(from_uniform.oscillating ? "power iteration oscillates (periodic chain)"
                                                      : "power iteration did not converge");
    for (std::size_t vertex : {std::size_t{0}, dim - 1}) {
        std::vector<double> start(dim, 0.0);
        start[vertex] = 1.0;
        auto probe = detail::power_iterate(kernel, std::move(start), tol);
        if (!probe.converged)
            throw NonConvergence(probe.oscillating ? "power iteration oscillates (periodic chain)"
                                                   : "power iteration did not converge");
        if (detail::l1_distance(probe.p, from_uniform.p) > tol.uniqueness)
            throw NonUniqueSteadyState("kernel has more than one stationary distribution");
    }
    return CategoricalDistribution(std::move(from_uniform.p));
}

/// Stationary distribution p with pi p = p of a memoryless kernel; for a memory
/// kernel, the reduction of the stationary Z-state distribution.
inline CategoricalDistribution steady_state(const TransitionKernel& kernel, const Tolerances& tol = kTolerances) {
    auto q = steady_state_zstates(kernel, tol);
    if (kernel.memory() == 0) return q;
    return reduce_distribution(q, kernel.n_categories());
}

inline CategoricalDistribution steady_state(const EmbeddedKernel& embedded, const Tolerances& tol = kTolerances) {
    return steady_state_zstates(embedded.base, tol);
}

}  // namespace csm
