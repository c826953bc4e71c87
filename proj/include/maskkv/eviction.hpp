// Copyright 2026 The maskkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <vector>

#include "maskkv/budgeting.hpp"
#include "maskkv/common.hpp"
#include "maskkv/keep_set.hpp"
#include "maskkv/kv_cache.hpp"

namespace maskkv {

struct EvictionReport {
    std::vector<std::vector<std::size_t>> retained;  // prompt KV per [layer][head]
    /// sum_{j in keep} I_j / sum_j I_j under the selection importance.
    std::vector<std::vector<double>> retained_mass;
    /// Same ratio under a reference importance (Mask-Voting), when supplied.
    std::vector<std::vector<double>> reference_mass;
    std::uint64_t kv_bytes_before = 0;
    std::uint64_t kv_bytes_after = 0;
    RunLog log;

    double mean_retained_mass() const { return mean(retained_mass); }
    double mean_reference_mass() const { return mean(reference_mass); }

private:
    static double mean(const std::vector<std::vector<double>>& grid) {
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto& row : grid) {
            for (double v : row) {
                sum += v;
                ++n;
            }
        }
        return n == 0 ? 0.0 : sum / static_cast<double>(n);
    }
};

/// Fraction of total importance held by `keep`; 1 when there is no mass.
inline double retained_mass(const std::vector<double>& importance, const KeepSet& keep) {
    const double total = std::accumulate(importance.begin(), importance.end(), 0.0);
    if (total <= 0.0) {
        return 1.0;
    }
    double kept = 0.0;
    for (std::size_t j : keep) kept += importance[j];
    return kept / total;
}

/// Compacts the cache to the plan's per-head top-k of `selection`.
inline EvictionReport evict(FeatureCache& cache, const BudgetPlan& plan, const ImportanceGrid& selection,
                            const ImportanceGrid* reference = nullptr) {
    EvictionReport report;
    report.kv_bytes_before = cache.kv_bytes();
    compact(cache, plan, selection, &report.log);
    report.kv_bytes_after = cache.kv_bytes();
    report.retained = cache.kv_counts(true);
    const KeepSets& keep = cache.keep_sets();
    report.retained_mass.resize(keep.size());
    for (std::size_t l = 0; l < keep.size(); ++l) {
        for (std::size_t h = 0; h < keep[l].size(); ++h) {
            report.retained_mass[l].push_back(retained_mass(selection[l][h].scores, keep[l][h]));
        }
    }
    if (reference != nullptr) {
        report.reference_mass.resize(keep.size());
        for (std::size_t l = 0; l < keep.size(); ++l) {
            for (std::size_t h = 0; h < keep[l].size(); ++h) {
                report.reference_mass[l].push_back(retained_mass((*reference)[l][h].scores, keep[l][h]));
            }
        }
    }
    return report;
}

}  // namespace maskkv
