#pragma once

#include "csm/csm.hpp"

#include <vector>

namespace csm::fixtures {

/// Regularised three-category BMI matrix, rows k, columns l.
inline TransitionKernel bmi_regularised() {
    return TransitionKernel::from_rows({{0.911, 0.072, 0.004}, {0.089, 0.873, 0.065}, {0.0, 0.055, 0.931}});
}

/// Joint P(X_0 = k, X_{-1} = l) of the synthetic benchmark, matrix[k][l].
inline std::vector<std::vector<double>> synthetic_initial_matrix() {
    return {{0.08, 0.14, 0.08}, {0.14, 0.08, 0.08}, {0.10, 0.10, 0.20}};
}

inline CategoricalDistribution synthetic_initial() {
    const auto m = synthetic_initial_matrix();
    std::vector<double> q(9);
    for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t l = 0; l < 3; ++l) q[k + 3 * l] = m[k][l];
    return CategoricalDistribution(q);
}

/// pi_{k|l,m} of the synthetic benchmark, rows ordered (m, l) as printed.
inline std::vector<std::vector<double>> synthetic_kernel_rows() {
    return {{0.8, 0.1, 0.1},   {0.15, 0.75, 0.1}, {0.18, 0.7, 0.12},
            {0.8, 0.19, 0.01}, {0.03, 0.94, 0.03}, {0.01, 0.14, 0.85},
            {0.1, 0.6, 0.3},   {0.2, 0.5, 0.3},   {0.09, 0.9, 0.01}};
}

inline TransitionKernel synthetic_kernel() {
    const auto rows = synthetic_kernel_rows();
    std::vector<double> entries(27);
    for (std::size_t m = 0; m < 3; ++m)
        for (std::size_t l = 0; l < 3; ++l)
            for (std::size_t k = 0; k < 3; ++k) entries[(l + 3 * m) * 3 + k] = rows[3 * m + l][k];
    return TransitionKernel(3, 1, entries);
}

}  // namespace csm::fixtures
