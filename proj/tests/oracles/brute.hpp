// Copyright 2026 The maskkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Straight-line reference computations kept apart from the library: long
// double accumulation, column-major loops, no shared helpers.

#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

using Rows = std::vector<std::vector<double>>;

inline Rows softmax_scores(const Rows& q, const Rows& k) {
    const std::size_t dk = q.empty() ? 0 : q[0].size();
    Rows a(q.size(), std::vector<double>(k.size()));
    for (std::size_t i = 0; i < q.size(); ++i) {
        std::vector<long double> s(k.size());
        long double mx = -INFINITY;
        for (std::size_t j = 0; j < k.size(); ++j) {
            long double acc = 0;
            for (std::size_t c = 0; c < dk; ++c) acc += static_cast<long double>(q[i][c]) * k[j][c];
            s[j] = acc / std::sqrt(static_cast<long double>(dk));
            if (s[j] > mx) mx = s[j];
        }
        long double z = 0;
        for (auto& v : s) z += std::exp(v - mx);
        for (std::size_t j = 0; j < k.size(); ++j) a[i][j] = static_cast<double>(std::exp(s[j] - mx) / z);
    }
    return a;
}

/// Column sums over prompt columns of the rows in [first, last).
inline std::vector<double> column_sums(const Rows& a, std::size_t prompt_cols, std::size_t first, std::size_t last) {
    std::vector<double> out(prompt_cols);
    for (std::size_t j = 0; j < prompt_cols; ++j) {
        long double acc = 0;
        for (std::size_t i = first; i < last; ++i) acc += a[i][j];
        out[j] = static_cast<double>(acc);
    }
    return out;
}

inline double preference(const Rows& a, const std::vector<std::size_t>& prompt_cols,
                         const std::vector<std::size_t>& mask_cols) {
    long double p = 0;
    long double m = 0;
    for (const auto& row : a) {
        for (std::size_t c : prompt_cols) p += row[c];
        for (std::size_t c : mask_cols) m += row[c];
    }
    return p + m > 0 ? static_cast<double>(p / (p + m)) : 0.0;
}

/// Best retained mass over every size-k subset (n <= 20).
inline double best_subset_mass(const std::vector<double>& v, std::size_t k) {
    const std::size_t n = v.size();
    long double best = -1;
    for (unsigned long mask = 0; mask < (1ul << n); ++mask) {
        if (static_cast<std::size_t>(__builtin_popcountl(mask)) != k) continue;
        long double s = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (mask >> j & 1ul) s += v[j];
        }
        if (s > best) best = s;
    }
    return static_cast<double>(best);
}

}  // namespace oracle
