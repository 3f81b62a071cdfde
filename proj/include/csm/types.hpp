#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace csm {

/// Numerical tolerances shared by every module.
struct Tolerances {
    double simplex = 1e-9;              ///< allowed |sum - 1| of a probability vector
    double steady_state = 1e-10;        ///< L1 residual of the power iteration
    std::size_t steady_state_max_iterations = 100000;
    double uniqueness = 1e-8;           ///< max disagreement between two power-iteration starts
    double log_floor = 1e-300;          ///< lower clamp of every logarithm argument
};

inline constexpr Tolerances kTolerances{};

// ---------------------------------------------------------------------------
// Errors. DataError maps to CLI exit code 1, NumericalError to exit code 2.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DataError : public Error {
public:
    using Error::Error;
};

class NumericalError : public Error {
public:
    using Error::Error;
};

class DimensionMismatch : public DataError {
public:
    using DataError::DataError;
};

class ParseError : public DataError {
public:
    ParseError(const std::string& source, std::size_t line, const std::string& what)
        : DataError(source + ":" + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class ImpossibleObservation : public DataError {
public:
    explicit ImpossibleObservation(std::size_t trajectory)
        : DataError("trajectory " + std::to_string(trajectory) +
                    " has zero probability under the model (structural zero in the kernel)"),
          trajectory_(trajectory) {}

    std::size_t trajectory_index() const noexcept { return trajectory_; }

private:
    std::size_t trajectory_;
};

class NonConvergence : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class NonUniqueSteadyState : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class OptimizationFailure : public NumericalError {
public:
    using NumericalError::NumericalError;
};

// ---------------------------------------------------------------------------
// Z-state indexing. A sequence xi = (x_t, x_{t-1}, ..., x_{t-lambda}) maps to
// sum_j xi_j N^j, so the most recent coordinate varies fastest.
// ---------------------------------------------------------------------------

inline std::size_t ipow(std::size_t base, std::size_t exponent) {
    std::size_t r = 1;
    for (std::size_t i = 0; i < exponent; ++i) r *= base;
    return r;
}

inline std::size_t zstate_index(std::span<const std::size_t> sequence, std::size_t n_categories) {
    std::size_t index = 0;
    std::size_t scale = 1;
    for (std::size_t c : sequence) {
        index += c * scale;
        scale *= n_categories;
    }
    return index;
}

inline std::vector<std::size_t> zstate_sequence(std::size_t index, std::size_t n_categories,
                                                std::size_t length) {
    std::vector<std::size_t> seq(length);
    for (std::size_t j = 0; j < length; ++j) {
        seq[j] = index % n_categories;
        index /= n_categories;
    }
    return seq;
}

/// Returns lambda such that dimension == n^(lambda+1), or throws.
inline std::size_t memory_from_dimension(std::size_t dimension, std::size_t n_categories) {
    if (n_categories < 1) throw DimensionMismatch("number of categories must be positive");
    std::size_t power = n_categories;
    std::size_t memory = 0;
    if (n_categories == 1) {
        if (dimension == 1) return 0;
        throw DimensionMismatch("dimension is not a power of the number of categories");
    }
    while (power < dimension) {
        power *= n_categories;
        ++memory;
    }
    if (power != dimension)
        throw DimensionMismatch("dimension " + std::to_string(dimension) +
                                " is not a power of " + std::to_string(n_categories));
    return memory;
}

// ---------------------------------------------------------------------------
// CategoricalDistribution
// ---------------------------------------------------------------------------

/// Probability vector over a finite set of categories (or Z-states).
class CategoricalDistribution {
public:
    CategoricalDistribution() = default;

    /// Validates the simplex invariant. Round-off below zero (> -1e-12) is clamped.
    explicit CategoricalDistribution(std::vector<double> probs, double tolerance = kTolerances.simplex)
        : probs_(std::move(probs)) {
        if (probs_.empty()) throw DataError("distribution must have at least one category");
        double sum = 0.0;
        for (double& p : probs_) {
            if (!std::isfinite(p)) throw DataError("distribution entry is not finite");
            if (p < 0.0 && p > -1e-12) p = 0.0;
            if (p < 0.0 || p > 1.0 + 1e-12)
                throw DataError("distribution entry " + std::to_string(p) + " outside [0,1]");
            p = std::min(p, 1.0);
            sum += p;
        }
        if (std::abs(sum - 1.0) > tolerance)
            throw DataError("distribution sums to " + std::to_string(sum) + ", expected 1");
    }

    static CategoricalDistribution uniform(std::size_t n) {
        return CategoricalDistribution(std::vector<double>(n, 1.0 / static_cast<double>(n)));
    }

    static CategoricalDistribution point_mass(std::size_t n, std::size_t k) {
        std::vector<double> p(n, 0.0);
        p.at(k) = 1.0;
        return CategoricalDistribution(std::move(p));
    }

    /// Normalises non-negative weights (sum > 0) into a distribution.
    static CategoricalDistribution normalized(std::vector<double> weights) {
        double sum = 0.0;
        for (double w : weights) {
            if (!(w >= 0.0)) throw DataError("negative or NaN weight");
            sum += w;
        }
        if (!(sum > 0.0)) throw DataError("weights sum to zero");
        for (double& w : weights) w /= sum;
        return CategoricalDistribution(std::move(weights));
    }

    std::size_t size() const noexcept { return probs_.size(); }
    double operator[](std::size_t k) const { return probs_[k]; }
    std::span<const double> probs() const noexcept { return probs_; }
    const std::vector<double>& vector() const noexcept { return probs_; }
    auto begin() const noexcept { return probs_.begin(); }
    auto end() const noexcept { return probs_.end(); }

    friend bool operator==(const CategoricalDistribution&, const CategoricalDistribution&) = default;

private:
    std::vector<double> probs_;
};

// ---------------------------------------------------------------------------
// TransitionKernel
// ---------------------------------------------------------------------------

/**
 * Column-stochastic table pi_{k,xi} = P(X_{t+1} = k | Z_t = xi) where xi is the
 * condition sequence (x_t, ..., x_{t-memory}). Storage is column-major over the
 * flattened condition index: entries[xi * N + k].
 */
class TransitionKernel {
public:
    TransitionKernel() = default;

    TransitionKernel(std::size_t n_categories, std::size_t memory, std::vector<double> entries,
                     double tolerance = kTolerances.simplex)
        : n_(n_categories), memory_(memory), entries_(std::move(entries)) {
        if (n_ < 1) throw DataError("kernel needs at least one category");
        const std::size_t conditions = ipow(n_, memory_ + 1);
        if (entries_.size() != conditions * n_)
            throw DimensionMismatch("kernel has " + std::to_string(entries_.size()) +
                                    " entries, expected " + std::to_string(conditions * n_));
        for (std::size_t c = 0; c < conditions; ++c) {
            double sum = 0.0;
            for (std::size_t k = 0; k < n_; ++k) {
                double& v = entries_[c * n_ + k];
                if (!std::isfinite(v)) throw DataError("kernel entry is not finite");
                if (v < 0.0 && v > -1e-12) v = 0.0;
                if (v < 0.0 || v > 1.0 + 1e-12)
                    throw DataError("kernel entry " + std::to_string(v) + " outside [0,1]");
                v = std::min(v, 1.0);
                sum += v;
            }
            if (std::abs(sum - 1.0) > tolerance)
                throw DataError("kernel column " + std::to_string(c) + " sums to " +
                                std::to_string(sum));
        }
    }

    /// Memoryless kernel from a matrix given as rows: matrix[k][l] = pi_{kl}.
    static TransitionKernel from_rows(const std::vector<std::vector<double>>& matrix) {
        const std::size_t n = matrix.size();
        std::vector<double> entries(n * n);
        for (std::size_t k = 0; k < n; ++k) {
            if (matrix[k].size() != n) throw DimensionMismatch("transition matrix is not square");
            for (std::size_t l = 0; l < n; ++l) entries[l * n + k] = matrix[k][l];
        }
        return TransitionKernel(n, 0, std::move(entries));
    }

    static TransitionKernel identity(std::size_t n) {
        std::vector<double> entries(n * n, 0.0);
        for (std::size_t l = 0; l < n; ++l) entries[l * n + l] = 1.0;
        return TransitionKernel(n, 0, std::move(entries));
    }

    static TransitionKernel uniform(std::size_t n, std::size_t memory = 0) {
        return TransitionKernel(n, memory,
                                std::vector<double>(ipow(n, memory + 1) * n, 1.0 / static_cast<double>(n)));
    }

    std::size_t n_categories() const noexcept { return n_; }
    std::size_t memory() const noexcept { return memory_; }
    /// Number of condition sequences, N^(memory+1).
    std::size_t n_conditions() const noexcept { return ipow(n_, memory_ + 1); }

    double operator()(std::size_t k, std::size_t condition) const { return entries_[condition * n_ + k]; }

    std::span<const double> column(std::size_t condition) const {
        return std::span<const double>(entries_).subspan(condition * n_, n_);
    }

    std::span<const double> entries() const noexcept { return entries_; }

    friend bool operator==(const TransitionKernel&, const TransitionKernel&) = default;

private:
    std::size_t n_ = 0;
    std::size_t memory_ = 0;
    std::vector<double> entries_;
};

// ---------------------------------------------------------------------------
// EmbeddedKernel
// ---------------------------------------------------------------------------

/// Memoryless chain over Z-states equivalent to a finite-memory kernel.
struct EmbeddedKernel {
    TransitionKernel base;
    std::size_t dimension = 0;        ///< N^(memory+1)
    std::vector<double> matrix;       ///< dense, column-major: matrix[col * dimension + row]

    double operator()(std::size_t row, std::size_t col) const { return matrix[col * dimension + row]; }
};

// ---------------------------------------------------------------------------
// CountSeries
// ---------------------------------------------------------------------------

/// Cross-sectional counts n_{kt}; a time point with all-zero counts is missing.
class CountSeries {
public:
    CountSeries() = default;

    CountSeries(std::size_t n_categories, std::size_t horizon)
        : n_(n_categories), horizon_(horizon), counts_(n_categories * horizon, 0) {
        if (n_ < 1) throw DataError("count series needs at least one category");
    }

    /// rows[t][k] = n_{kt}.
    static CountSeries from_rows(const std::vector<std::vector<std::uint64_t>>& rows) {
        if (rows.empty()) throw DataError("count series has no time points");
        CountSeries series(rows.front().size(), rows.size());
        for (std::size_t t = 0; t < rows.size(); ++t) {
            if (rows[t].size() != series.n_) throw DimensionMismatch("ragged count rows");
            for (std::size_t k = 0; k < series.n_; ++k) series.set(t, k, rows[t][k]);
        }
        return series;
    }

    std::size_t n_categories() const noexcept { return n_; }
    std::size_t horizon() const noexcept { return horizon_; }

    std::uint64_t count(std::size_t t, std::size_t k) const { return counts_[t * n_ + k]; }
    void set(std::size_t t, std::size_t k, std::uint64_t value) { counts_[t * n_ + k] = value; }

    std::span<const std::uint64_t> row(std::size_t t) const {
        return std::span<const std::uint64_t>(counts_).subspan(t * n_, n_);
    }

    std::uint64_t total(std::size_t t) const {
        const auto r = row(t);
        return std::accumulate(r.begin(), r.end(), std::uint64_t{0});
    }

    std::uint64_t grand_total() const {
        return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
    }

    bool missing(std::size_t t) const { return total(t) == 0; }

    std::vector<std::size_t> observed_times() const {
        std::vector<std::size_t> times;
        for (std::size_t t = 0; t < horizon_; ++t)
            if (!missing(t)) times.push_back(t);
        return times;
    }

    /// Empirical distribution at a non-missing time point.
    CategoricalDistribution empirical(std::size_t t) const {
        const double n = static_cast<double>(total(t));
        if (n == 0.0) throw DataError("time point " + std::to_string(t) + " is missing");
        std::vector<double> p(n_);
        for (std::size_t k = 0; k < n_; ++k) p[k] = static_cast<double>(count(t, k)) / n;
        return CategoricalDistribution::normalized(std::move(p));
    }

    /// Copy with the given time points zeroed (treated as missing).
    CountSeries masked(std::span<const std::size_t> times) const {
        CountSeries out = *this;
        for (std::size_t t : times)
            for (std::size_t k = 0; k < n_; ++k) out.set(t, k, 0);
        return out;
    }

    /// Copy restricted to times [0, new_horizon).
    CountSeries truncated(std::size_t new_horizon) const {
        CountSeries out(n_, std::min(new_horizon, horizon_));
        std::copy_n(counts_.begin(), out.counts_.size(), out.counts_.begin());
        return out;
    }

    friend bool operator==(const CountSeries&, const CountSeries&) = default;

private:
    std::size_t n_ = 0;
    std::size_t horizon_ = 0;
    std::vector<std::uint64_t> counts_;
};

// ---------------------------------------------------------------------------
// TrajectorySet
// ---------------------------------------------------------------------------

struct Trajectory {
    std::string id;
    std::vector<int> times;        ///< strictly increasing, non-negative
    std::vector<int> categories;   ///< same length as times

    std::size_t size() const noexcept { return times.size(); }
    int first_time() const { return times.front(); }
    int last_time() const { return times.back(); }

    friend bool operator==(const Trajectory&, const Trajectory&) = default;
    friend auto operator<=>(const Trajectory& a, const Trajectory& b) {
        if (auto c = a.times <=> b.times; c != 0) return c;
        if (auto c = a.categories <=> b.categories; c != 0) return c;
        return a.id <=> b.id;
    }
};

/// Set of (possibly gapped) longitudinal trajectories over N categories.
class TrajectorySet {
public:
    TrajectorySet() = default;

    TrajectorySet(std::size_t n_categories, std::vector<Trajectory> trajectories)
        : n_(n_categories), trajectories_(std::move(trajectories)) {
        if (n_ < 1) throw DataError("trajectory set needs at least one category");
        for (std::size_t i = 0; i < trajectories_.size(); ++i) validate(i);
    }

    std::size_t n_categories() const noexcept { return n_; }
    std::size_t size() const noexcept { return trajectories_.size(); }
    bool empty() const noexcept { return trajectories_.empty(); }
    const Trajectory& operator[](std::size_t i) const { return trajectories_[i]; }
    const std::vector<Trajectory>& trajectories() const noexcept { return trajectories_; }
    auto begin() const noexcept { return trajectories_.begin(); }
    auto end() const noexcept { return trajectories_.end(); }

    /// One past the last observed time.
    std::size_t horizon() const {
        int last = -1;
        for (const auto& tr : trajectories_) last = std::max(last, tr.last_time());
        return static_cast<std::size_t>(last + 1);
    }

    /// Subset by index, order preserved.
    TrajectorySet subset(std::span<const std::size_t> indices) const {
        std::vector<Trajectory> out;
        out.reserve(indices.size());
        for (std::size_t i : indices) out.push_back(trajectories_.at(i));
        return TrajectorySet(n_, std::move(out));
    }

    /// Observations at times >= cutoff removed; trajectories left empty are dropped.
    TrajectorySet truncated(int cutoff) const {
        std::vector<Trajectory> out;
        for (const auto& tr : trajectories_) {
            Trajectory cut{tr.id, {}, {}};
            for (std::size_t s = 0; s < tr.size() && tr.times[s] < cutoff; ++s) {
                cut.times.push_back(tr.times[s]);
                cut.categories.push_back(tr.categories[s]);
            }
            if (!cut.times.empty()) out.push_back(std::move(cut));
        }
        return TrajectorySet(n_, std::move(out));
    }

    friend bool operator==(const TrajectorySet&, const TrajectorySet&) = default;

private:
    void validate(std::size_t i) const {
        const Trajectory& tr = trajectories_[i];
        const std::string where = "trajectory " + std::to_string(i);
        if (tr.times.empty()) throw DataError(where + " is empty");
        if (tr.times.size() != tr.categories.size())
            throw DataError(where + ": times and categories differ in length");
        for (std::size_t s = 0; s < tr.size(); ++s) {
            if (tr.times[s] < 0) throw DataError(where + ": negative time");
            if (s > 0 && tr.times[s] <= tr.times[s - 1])
                throw DataError(where + ": times not strictly increasing");
            if (tr.categories[s] < 0 || static_cast<std::size_t>(tr.categories[s]) >= n_)
                throw DataError(where + ": category " + std::to_string(tr.categories[s]) +
                                " out of range");
        }
    }

    std::size_t n_ = 0;
    std::vector<Trajectory> trajectories_;
};

}  // namespace csm
