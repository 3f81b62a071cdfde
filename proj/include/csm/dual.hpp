#pragma once

#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

namespace csm {

/**
 * Forward-mode dual number carrying a dense tangent vector. An empty tangent
 * stands for an all-zero one, so constants stay allocation-free.
 */
class Dual {
public:
    Dual() = default;
    Dual(double value) : v_(value) {}  // NOLINT(google-explicit-constructor)
    Dual(double value, std::vector<double> tangent) : v_(value), d_(std::move(tangent)) {}

    /// Independent variable `index` out of `size`.
    static Dual variable(double value, std::size_t index, std::size_t size) {
        std::vector<double> d(size, 0.0);
        d[index] = 1.0;
        return Dual(value, std::move(d));
    }

    double value() const noexcept { return v_; }
    const std::vector<double>& tangent() const noexcept { return d_; }
    double derivative(std::size_t i) const { return d_.empty() ? 0.0 : d_[i]; }

    Dual& operator+=(const Dual& o) {
        v_ += o.v_;
        axpy(1.0, o.d_);
        return *this;
    }
    Dual& operator-=(const Dual& o) {
        v_ -= o.v_;
        axpy(-1.0, o.d_);
        return *this;
    }
    Dual& operator*=(const Dual& o) {
        // d(uv) = u dv + v du
        scale(o.v_);
        axpy(v_, o.d_);
        v_ *= o.v_;
        return *this;
    }
    Dual& operator/=(const Dual& o) {
        const double inv = 1.0 / o.v_;
        const double q = v_ * inv;
        scale(inv);
        axpy(-q * inv, o.d_);
        v_ = q;
        return *this;
    }
    Dual& operator+=(double c) { v_ += c; return *this; }
    Dual& operator-=(double c) { v_ -= c; return *this; }
    Dual& operator*=(double c) { v_ *= c; scale(c); return *this; }
    Dual& operator/=(double c) { v_ /= c; scale(1.0 / c); return *this; }

    /// this += a * b without temporaries.
    void add_product(const Dual& a, const Dual& b) {
        v_ += a.v_ * b.v_;
        axpy(a.v_, b.d_);
        axpy(b.v_, a.d_);
    }
    void add_product(double a, const Dual& b) {
        v_ += a * b.v_;
        axpy(a, b.d_);
    }

    Dual operator-() const {
        Dual r(*this);
        r.v_ = -r.v_;
        r.scale(-1.0);
        return r;
    }

    friend Dual operator+(Dual a, const Dual& b) { return a += b; }
    friend Dual operator-(Dual a, const Dual& b) { return a -= b; }
    friend Dual operator*(Dual a, const Dual& b) { return a *= b; }
    friend Dual operator/(Dual a, const Dual& b) { return a /= b; }
    friend Dual operator+(Dual a, double c) { return a += c; }
    friend Dual operator+(double c, Dual a) { return a += c; }
    friend Dual operator-(Dual a, double c) { return a -= c; }
    friend Dual operator-(double c, const Dual& a) { return Dual(c) - a; }
    friend Dual operator*(Dual a, double c) { return a *= c; }
    friend Dual operator*(double c, Dual a) { return a *= c; }
    friend Dual operator/(Dual a, double c) { return a /= c; }
    friend Dual operator/(double c, const Dual& a) { return Dual(c) / a; }

    friend bool operator<(const Dual& a, const Dual& b) { return a.v_ < b.v_; }
    friend bool operator>(const Dual& a, const Dual& b) { return a.v_ > b.v_; }

    friend Dual exp(Dual a) {
        const double e = std::exp(a.v_);
        a.v_ = e;
        a.scale(e);
        return a;
    }
    friend Dual log(Dual a) {
        const double inv = 1.0 / a.v_;
        a.v_ = std::log(a.v_);
        a.scale(inv);
        return a;
    }

private:
    void scale(double c) {
        for (double& x : d_) x *= c;
    }
    void axpy(double c, const std::vector<double>& x) {
        if (x.empty() || c == 0.0) return;
        if (d_.empty()) {
            d_.resize(x.size());
            for (std::size_t i = 0; i < x.size(); ++i) d_[i] = c * x[i];
            return;
        }
        for (std::size_t i = 0; i < x.size(); ++i) d_[i] += c * x[i];
    }

    double v_ = 0.0;
    std::vector<double> d_;
};

inline void fma_into(Dual& acc, const Dual& a, const Dual& b) { acc.add_product(a, b); }
inline void fma_into(Dual& acc, double a, const Dual& b) { acc.add_product(a, b); }
inline void fma_into(Dual& acc, const Dual& a, double b) { acc.add_product(b, a); }

inline void add_scaled(Dual& acc, double c, const Dual& x) { acc.add_product(c, x); }
inline void add_scaled(double& acc, double c, double x) { acc += c * x; }

inline double value_of(double x) { return x; }
inline double value_of(const Dual& x) { return x.value(); }

}  // namespace csm
