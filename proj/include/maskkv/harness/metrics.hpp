// Copyright 2026 The maskkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "maskkv/common.hpp"
#include "maskkv/model.hpp"

namespace maskkv {

/// Fraction of positions holding identical token ids.
inline double agreement_rate(const std::vector<TokenId>& a, const std::vector<TokenId>& b) {
    if (a.size() != b.size()) {
        throw ComparisonError("token sequences differ in length (" + std::to_string(a.size()) + " vs " +
                              std::to_string(b.size()) + ")");
    }
    if (a.empty()) {
        return 1.0;
    }
    std::size_t same = 0;
    for (std::size_t i = 0; i < a.size(); ++i) same += a[i] == b[i] ? 1 : 0;
    return static_cast<double>(same) / static_cast<double>(a.size());
}

/// 1-based ranks with ties sharing their average rank.
inline std::vector<double> average_ranks(std::span<const double> v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

/// Spearman rank correlation; nullopt when either side has no variance.
inline std::optional<double> spearman(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw ComparisonError("spearman inputs differ in length");
    }
    if (a.size() < 2) {
        return std::nullopt;
    }
    const std::vector<double> ra = average_ranks(a);
    const std::vector<double> rb = average_ranks(b);
    const double n = static_cast<double>(a.size());
    const double mean = (n + 1.0) / 2.0;
    double cov = 0.0;
    double va = 0.0;
    double vb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        cov += (ra[i] - mean) * (rb[i] - mean);
        va += (ra[i] - mean) * (ra[i] - mean);
        vb += (rb[i] - mean) * (rb[i] - mean);
    }
    if (va == 0.0 || vb == 0.0) {
        return std::nullopt;
    }
    return cov / std::sqrt(va * vb);
}

}  // namespace maskkv
