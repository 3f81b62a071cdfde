#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace csm {

struct MinimizerOptions {
    std::size_t max_evaluations = 200000;
    double rel_tolerance = 1e-10;
};

struct MinimizerResult {
    std::vector<double> x;
    double value = std::numeric_limits<double>::infinity();
    std::size_t evaluations = 0;
    std::size_t iterations = 0;
    bool converged = false;
    bool used_fallback = false;
    std::string message;
};

namespace detail {

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double max_abs(const std::vector<double>& a) {
    double m = 0.0;
    for (double v : a) m = std::max(m, std::abs(v));
    return m;
}

struct LineSearchPoint {
    double alpha = 0.0;
    double f = 0.0;
    std::vector<double> g;
};

/// Strong-Wolfe line search (bracketing + zoom). Returns false when no point
/// with sufficient decrease was found.
template <class FG>
bool wolfe_search(FG& fg, const std::vector<double>& x, double f0, double dphi0, const std::vector<double>& d,
                  double alpha_init, LineSearchPoint& out, std::size_t& evaluations, std::size_t budget) {
    constexpr double c1 = 1e-4, c2 = 0.9;
    std::vector<double> trial(x.size()), g;
    auto eval = [&](double a, double& f, double& dphi) {
        for (std::size_t i = 0; i < x.size(); ++i) trial[i] = x[i] + a * d[i];
        auto r = fg(trial);
        ++evaluations;
        f = std::isfinite(r.first) ? r.first : std::numeric_limits<double>::infinity();
        g = std::move(r.second);
        dphi = std::isfinite(f) ? dot(g, d) : 0.0;
    };

    auto zoom = [&](double lo, double f_lo, double dphi_lo, std::vector<double> g_lo, double hi, double f_hi) {
        for (int it = 0; it < 60 && evaluations < budget; ++it) {
            const double width = hi - lo;
            double a = lo + 0.5 * width;
            if (std::isfinite(f_hi)) {
                const double denom = 2.0 * (f_hi - f_lo - dphi_lo * width);
                if (denom > 0.0) {
                    const double q = lo - dphi_lo * width * width / denom;
                    const double lo_b = std::min(lo, hi) + 0.1 * std::abs(width);
                    const double hi_b = std::max(lo, hi) - 0.1 * std::abs(width);
                    if (q >= lo_b && q <= hi_b) a = q;
                }
            }
            double f_a, dphi_a;
            eval(a, f_a, dphi_a);
            if (f_a > f0 + c1 * a * dphi0 || f_a >= f_lo) {
                hi = a;
                f_hi = f_a;
            } else {
                if (std::abs(dphi_a) <= -c2 * dphi0) {
                    out = {a, f_a, g};
                    return true;
                }
                if (dphi_a * (hi - lo) >= 0.0) {
                    hi = lo;
                    f_hi = f_lo;
                }
                lo = a;
                f_lo = f_a;
                dphi_lo = dphi_a;
                g_lo = g;
            }
            if (std::abs(hi - lo) < 1e-16 * std::max(1.0, std::abs(lo))) break;
        }
        if (lo > 0.0 && f_lo < f0) {
            out = {lo, f_lo, std::move(g_lo)};
            return true;
        }
        return false;
    };

    double a_prev = 0.0, f_prev = f0, dphi_prev = dphi0;
    std::vector<double> g_prev;
    double a = alpha_init;
    for (int it = 0; it < 40 && evaluations < budget; ++it) {
        double f_a, dphi_a;
        eval(a, f_a, dphi_a);
        if (f_a > f0 + c1 * a * dphi0 || (it > 0 && f_a >= f_prev))
            return zoom(a_prev, f_prev, dphi_prev, g_prev, a, f_a);
        if (std::abs(dphi_a) <= -c2 * dphi0) {
            out = {a, f_a, g};
            return true;
        }
        if (dphi_a >= 0.0) return zoom(a, f_a, dphi_a, g, a_prev, f_prev);
        a_prev = a;
        f_prev = f_a;
        dphi_prev = dphi_a;
        g_prev = g;
        a *= 2.0;
    }
    if (a_prev > 0.0 && f_prev < f0) {
        out = {a_prev, f_prev, std::move(g_prev)};
        return true;
    }
    return false;
}

/// Derivative-free compass search around x.
template <class F>
void compass_search(F& f, std::vector<double>& x, double& fx, std::size_t& evaluations, std::size_t budget,
                    double rel_tolerance) {
    double step = 1.0;
    std::vector<double> trial;
    while (step > 1e-9 && evaluations < budget) {
        bool improved = false;
        for (std::size_t i = 0; i < x.size() && evaluations < budget; ++i) {
            for (double sign : {1.0, -1.0}) {
                trial = x;
                trial[i] += sign * step;
                const double ft = f(trial);
                ++evaluations;
                if (std::isfinite(ft) && ft < fx - rel_tolerance * std::max(1.0, std::abs(fx))) {
                    x = trial;
                    fx = ft;
                    improved = true;
                    break;
                }
            }
        }
        if (!improved) step *= 0.5;
    }
}

}  // namespace detail

/**
 * Minimises a smooth function with BFGS and a strong-Wolfe line search.
 * `fg(x)` returns (value, gradient); `f(x)` returns the value alone and is used by
 * the compass-search fallback after repeated line-search failure.
 */
template <class FG, class F>
MinimizerResult minimize(FG&& fg, F&& f, std::vector<double> x0, const MinimizerOptions& options) {
    MinimizerResult result;
    const std::size_t n = x0.size();
    std::vector<double> x = std::move(x0);
    auto [fx, g] = fg(x);
    result.evaluations = 1;
    if (!std::isfinite(fx)) {
        result.x = std::move(x);
        result.value = fx;
        result.message = "objective not finite at the start point";
        return result;
    }
    if (n == 0) {
        result.x = std::move(x);
        result.value = fx;
        result.converged = true;
        return result;
    }

    std::vector<double> h(n * n, 0.0);  // inverse Hessian approximation
    auto reset = [&] {
        std::fill(h.begin(), h.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) h[i * n + i] = 1.0;
    };
    reset();
    bool fresh = true;
    bool reset_used = false;
    int small_changes = 0;
    std::vector<double> d(n), s(n), y(n), hy(n);

    while (result.evaluations < options.max_evaluations) {
        ++result.iterations;
        for (std::size_t i = 0; i < n; ++i) {
            double v = 0.0;
            for (std::size_t j = 0; j < n; ++j) v -= h[i * n + j] * g[j];
            d[i] = v;
        }
        double dphi0 = detail::dot(g, d);
        if (!(dphi0 < 0.0)) {
            reset();
            fresh = true;
            for (std::size_t i = 0; i < n; ++i) d[i] = -g[i];
            dphi0 = detail::dot(g, d);
        }
        if (dphi0 == 0.0) {
            result.converged = true;
            result.message = "zero gradient";
            break;
        }
        const double alpha0 = fresh ? std::min(1.0, 1.0 / std::max(detail::max_abs(d), 1e-300)) : 1.0;
        detail::LineSearchPoint next;
        if (!detail::wolfe_search(fg, x, fx, dphi0, d, alpha0, next, result.evaluations, options.max_evaluations)) {
            if (!reset_used && !fresh) {
                reset_used = true;
                reset();
                fresh = true;
                continue;
            }
            result.used_fallback = true;
            detail::compass_search(f, x, fx, result.evaluations, options.max_evaluations, options.rel_tolerance);
            result.message = "line search failed; compass search used";
            result.converged = true;
            break;
        }
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = next.alpha * d[i];
            y[i] = next.g[i] - g[i];
            x[i] += s[i];
        }
        const double change = fx - next.f;
        fx = next.f;
        g = std::move(next.g);

        const double sy = detail::dot(s, y);
        if (sy > 1e-12 * std::sqrt(detail::dot(s, s) * detail::dot(y, y))) {
            if (fresh) {
                const double scale = sy / detail::dot(y, y);
                for (double& v : h) v *= scale;
                fresh = false;
            }
            for (std::size_t i = 0; i < n; ++i) {
                double v = 0.0;
                for (std::size_t j = 0; j < n; ++j) v += h[i * n + j] * y[j];
                hy[i] = v;
            }
            const double yhy = detail::dot(y, hy);
            const double rho = 1.0 / sy;
            const double coef = (1.0 + rho * yhy) * rho;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    h[i * n + j] += coef * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }

        if (std::abs(change) <= options.rel_tolerance * std::max(1.0, std::abs(fx))) {
            if (++small_changes >= 2) {
                result.converged = true;
                result.message = "relative change below tolerance";
                break;
            }
        } else {
            small_changes = 0;
        }
    }
    if (!result.converged && result.message.empty()) result.message = "evaluation budget exhausted";
    result.x = std::move(x);
    result.value = fx;
    return result;
}

}  // namespace csm
