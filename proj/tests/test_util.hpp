// Copyright 2026 The maskkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "maskkv/common.hpp"

namespace maskkv::testing {

inline Matrix random_matrix(std::mt19937_64& gen, std::size_t rows, std::size_t cols, double lo = -1.0,
                            double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Matrix m(rows, cols);
    for (double& x : m.data()) x = dist(gen);
    return m;
}

/// Row-stochastic matrix with strictly positive entries.
inline Matrix random_stochastic(std::mt19937_64& gen, std::size_t rows, std::size_t cols) {
    Matrix m = random_matrix(gen, rows, cols, 0.01, 1.0);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (double v : m.row(r)) s += v;
        for (double& v : m.row(r)) v /= s;
    }
    return m;
}

inline std::vector<double> random_vector(std::mt19937_64& gen, std::size_t n, double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(n);
    for (double& x : v) x = dist(gen);
    return v;
}

}  // namespace maskkv::testing
