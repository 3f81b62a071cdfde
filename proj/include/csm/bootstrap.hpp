#pragma once

#include "csm/estimation.hpp"
#include "csm/likelihood.hpp"
#include "csm/parallel.hpp"
#include "csm/random.hpp"
#include "csm/types.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace csm {

struct BootstrapConfig {
    std::size_t replicates = 500;
    double alpha = 0.95;
    std::size_t horizon = 0;  ///< T2; 0 means the data horizon
    std::uint64_t seed = 0;
    std::size_t threads = 1;

    void validate() const {
        if (replicates < 2) throw DataError("bootstrap needs at least two replicates");
        if (!(alpha > 0.0 && alpha < 1.0)) throw DataError("confidence level must lie in (0,1)");
    }
};

/// Replicates dropped by the KL ranking: ceil((1 - alpha) R).
inline std::size_t removed_replicates(std::size_t replicates, double alpha) {
    const double x = (1.0 - alpha) * static_cast<double>(replicates);
    return std::min(replicates, static_cast<std::size_t>(std::ceil(x - 1e-9)));
}

/// Posterior resample of counts: p' ~ Dirichlet(1 + n_t), then n_t draws from p'.
inline CountSeries resample_cross_sectional(const CountSeries& counts, std::uint64_t seed) {
    const std::size_t n = counts.n_categories();
    CountSeries out(n, counts.horizon());
    std::vector<double> w(n);
    for (std::size_t t = 0; t < counts.horizon(); ++t) {
        const std::uint64_t total = counts.total(t);
        if (total == 0) continue;
        Philox rng(seed, t);
        double sum = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            std::gamma_distribution<double> gamma(1.0 + static_cast<double>(counts.count(t, k)), 1.0);
            sum += (w[k] = gamma(rng));
        }
        // multinomial by sequential conditional binomials
        std::uint64_t left = total;
        double mass = 1.0;
        for (std::size_t k = 0; k + 1 < n && left > 0; ++k) {
            const double p = std::clamp((w[k] / sum) / mass, 0.0, 1.0);
            std::binomial_distribution<std::uint64_t> binom(left, p);
            const std::uint64_t draw = binom(rng);
            out.set(t, k, draw);
            left -= draw;
            mass -= w[k] / sum;
            if (mass <= 0.0) break;
        }
        out.set(t, n - 1, out.count(t, n - 1) + left);
    }
    return out;
}

/// Q trajectories drawn uniformly with replacement.
inline TrajectorySet resample_longitudinal(const TrajectorySet& theta, std::uint64_t seed) {
    if (theta.empty()) throw DataError("cannot resample an empty trajectory set");
    Philox rng(seed, std::uint64_t{1} << 40);
    std::uniform_int_distribution<std::size_t> pick(0, theta.size() - 1);
    std::vector<Trajectory> out;
    out.reserve(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) out.push_back(theta[pick(rng)]);
    return TrajectorySet(theta.n_categories(), std::move(out));
}

/// Coordinate-wise envelopes of the surviving replicates.
struct TrendBand {
    std::vector<CategoricalDistribution> point;
    std::vector<std::vector<double>> lower;  ///< [t][k]
    std::vector<std::vector<double>> upper;
    std::vector<std::size_t> survivors;      ///< replicate indices kept for the trend band

    TransitionKernel kernel_point;
    std::vector<double> kernel_lower;        ///< same layout as TransitionKernel::entries()
    std::vector<double> kernel_upper;
    std::vector<std::size_t> kernel_survivors;

    std::size_t horizon() const { return point.size(); }
};

namespace detail {

/// Indices of the R - ceil((1-alpha)R) smallest scores, ties by index.
inline std::vector<std::size_t> rank_survivors(const std::vector<double>& scores, double alpha) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    order.resize(scores.size() - removed_replicates(scores.size(), alpha));
    std::sort(order.begin(), order.end());
    return order;
}

inline double kernel_divergence(const TransitionKernel& point, const TransitionKernel& replicate) {
    double d = 0.0;
    for (std::size_t c = 0; c < point.n_conditions(); ++c)
        d += kl_divergence(CategoricalDistribution::normalized({point.column(c).begin(), point.column(c).end()}),
                           CategoricalDistribution::normalized({replicate.column(c).begin(), replicate.column(c).end()}));
    return d;
}

}  // namespace detail

/**
 * Ranks replicate trends by sum_t D_KL(point_t || replicate_t), drops the
 * furthest ceil((1-alpha)R) and takes min/max of the rest together with the
 * point trend. Kernels are ranked separately by column-summed KL.
 */
inline TrendBand confidence_bands(const std::vector<CategoricalDistribution>& point_trend,
                                  const std::vector<std::vector<CategoricalDistribution>>& replicate_trends,
                                  const TransitionKernel& point_kernel,
                                  const std::vector<TransitionKernel>& replicate_kernels, double alpha) {
    if (replicate_trends.size() < 2) throw DataError("bootstrap bands need at least two replicates");
    if (replicate_kernels.size() != replicate_trends.size())
        throw DimensionMismatch("replicate trends and kernels differ in number");
    if (!(alpha > 0.0 && alpha < 1.0)) throw DataError("confidence level must lie in (0,1)");
    const std::size_t horizon = point_trend.size();
    TrendBand band;
    band.point = point_trend;

    std::vector<double> scores(replicate_trends.size(), 0.0);
    for (std::size_t r = 0; r < replicate_trends.size(); ++r) {
        if (replicate_trends[r].size() != horizon) throw DimensionMismatch("replicate trend has the wrong horizon");
        for (std::size_t t = 0; t < horizon; ++t) scores[r] += kl_divergence(point_trend[t], replicate_trends[r][t]);
    }
    band.survivors = detail::rank_survivors(scores, alpha);
    for (std::size_t t = 0; t < horizon; ++t) {
        band.lower.push_back(point_trend[t].vector());
        band.upper.push_back(point_trend[t].vector());
        for (std::size_t r : band.survivors)
            for (std::size_t k = 0; k < point_trend[t].size(); ++k) {
                band.lower[t][k] = std::min(band.lower[t][k], replicate_trends[r][t][k]);
                band.upper[t][k] = std::max(band.upper[t][k], replicate_trends[r][t][k]);
            }
    }

    band.kernel_point = point_kernel;
    std::vector<double> kscores(replicate_kernels.size());
    for (std::size_t r = 0; r < replicate_kernels.size(); ++r)
        kscores[r] = detail::kernel_divergence(point_kernel, replicate_kernels[r]);
    band.kernel_survivors = detail::rank_survivors(kscores, alpha);
    const auto entries = point_kernel.entries();
    band.kernel_lower.assign(entries.begin(), entries.end());
    band.kernel_upper.assign(entries.begin(), entries.end());
    for (std::size_t r : band.kernel_survivors) {
        const auto e = replicate_kernels[r].entries();
        for (std::size_t i = 0; i < e.size(); ++i) {
            band.kernel_lower[i] = std::min(band.kernel_lower[i], e[i]);
            band.kernel_upper[i] = std::max(band.kernel_upper[i], e[i]);
        }
    }
    return band;
}

inline TrendBand confidence_bands(const CsmFit& point, const std::vector<CsmFit>& replicates,
                                  const BootstrapConfig& config) {
    config.validate();
    const std::size_t horizon = config.horizon;
    std::vector<std::vector<CategoricalDistribution>> trends;
    std::vector<TransitionKernel> kernels;
    for (const auto& r : replicates) {
        trends.push_back(r.trend(horizon));
        kernels.push_back(r.kernel);
    }
    return confidence_bands(point.trend(horizon), trends, point.kernel, kernels, config.alpha);
}

struct BootstrapResult {
    CsmFit fit;
    TrendBand band;
    std::size_t failed_replicates = 0;
};

namespace detail {

inline std::size_t data_horizon(const DataSources& data) {
    std::size_t h = 0;
    if (data.cross_sectional) h = std::max(h, data.cross_sectional->horizon());
    if (data.longitudinal && !data.longitudinal->empty()) h = std::max(h, data.longitudinal->horizon());
    if (data.anonymised) h = std::max(h, data.anonymised->horizon());
    return h;
}

inline DataSources resample(const DataSources& data, std::uint64_t seed) {
    DataSources out;
    if (data.cross_sectional) out.cross_sectional = resample_cross_sectional(*data.cross_sectional, seed);
    if (data.longitudinal) out.longitudinal = resample_longitudinal(*data.longitudinal, seed);
    if (data.anonymised) out.anonymised = resample_cross_sectional(*data.anonymised, seed ^ 0xA5A5A5A5ull);
    return out;
}

}  // namespace detail

/// Point fit, `replicates` resample-and-refit cycles with seeds seed+i, and bands.
inline BootstrapResult bootstrap_pipeline(const DataSources& data, const FitOptions& options,
                                          BootstrapConfig config) {
    config.validate();
    const std::size_t data_h = detail::data_horizon(data);
    if (config.horizon == 0) config.horizon = data_h;
    if (config.horizon < data_h)
        throw DataError("bootstrap horizon " + std::to_string(config.horizon) + " is shorter than the data horizon " +
                        std::to_string(data_h));
    BootstrapResult result;
    result.fit = fit_csm(data, options);

    FitOptions replicate_options = options;
    replicate_options.threads = 1;
    replicate_options.warm_start = std::make_pair(result.fit.initial, result.fit.kernel);
    std::vector<std::optional<CsmFit>> fits(config.replicates);
    std::vector<std::string> errors(config.replicates);
    parallel_for(config.replicates, config.threads, [&](std::size_t i) {
        try {
            FitOptions o = replicate_options;
            o.seed = options.seed + i;
            fits[i] = fit_csm(detail::resample(data, config.seed + i), o);
        } catch (const Error& e) {
            errors[i] = e.what();
        }
    });
    std::vector<CsmFit> ok;
    for (std::size_t i = 0; i < fits.size(); ++i) {
        if (fits[i]) ok.push_back(std::move(*fits[i]));
        else ++result.failed_replicates;
    }
    if (10 * result.failed_replicates > config.replicates) {
        std::string first;
        for (const auto& e : errors)
            if (!e.empty()) {
                first = e;
                break;
            }
        throw NumericalError(std::to_string(result.failed_replicates) + " of " + std::to_string(config.replicates) +
                             " bootstrap replicates failed; first failure: " + first);
    }
    result.band = confidence_bands(result.fit, ok, config);
    return result;
}

}  // namespace csm
