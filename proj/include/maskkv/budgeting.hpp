// Copyright 2026 The maskkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "maskkv/common.hpp"

namespace maskkv {

/// Offline importance profile: per-layer importance and per-layer-per-head
/// prompt preference, averaged over `samples` calibration inputs.
struct CalibrationProfile {
    std::vector<double> layer_importance;              // D
    std::vector<std::vector<double>> head_preference;  // D x N_h
    std::size_t samples = 0;
    std::string source;

    std::size_t num_layers() const noexcept { return layer_importance.size(); }
    std::size_t num_heads() const noexcept { return head_preference.empty() ? 0 : head_preference.front().size(); }

    void validate() const {
        if (samples == 0) {
            throw ConfigError("calibration profile must average at least one sample");
        }
        if (layer_importance.empty() || head_preference.size() != layer_importance.size()) {
            throw ConfigError("calibration profile layer count mismatch");
        }
        for (double v : layer_importance) {
            if (!(v >= 0.0 && v <= 2.0)) {
                throw ConfigError("layer importance outside [0, 2]");
            }
        }
        const std::size_t heads = num_heads();
        for (const auto& row : head_preference) {
            if (row.size() != heads || heads == 0) {
                throw ConfigError("calibration profile head count mismatch");
            }
            for (double v : row) {
                if (!(v >= 0.0 && v <= 1.0)) {
                    throw ConfigError("head preference outside [0, 1]");
                }
            }
        }
    }

    bool operator==(const CalibrationProfile&) const = default;
};

/// One remainder unit handed out (or taken back) while restoring exact
/// conservation after flooring. `head` is empty for layer-level adjustments.
struct BudgetAdjustment {
    std::size_t layer = 0;
    std::optional<std::size_t> head;
    int delta = 0;

    bool operator==(const BudgetAdjustment&) const = default;
};

/// k_l is the per-head average budget of layer l, so layer l retains
/// N_h * k_l prompt KV pairs in total, split as head_budgets[l].
struct BudgetPlan {
    std::vector<std::size_t> layer_budgets;              // D
    std::vector<std::vector<std::size_t>> head_budgets;  // D x N_h
    std::vector<BudgetAdjustment> audit;

    std::size_t num_layers() const noexcept { return layer_budgets.size(); }
    std::size_t num_heads() const noexcept { return head_budgets.empty() ? 0 : head_budgets.front().size(); }

    std::size_t total_layer_budget() const {
        return std::accumulate(layer_budgets.begin(), layer_budgets.end(), std::size_t{0});
    }
    std::size_t total_head_budget() const {
        std::size_t sum = 0;
        for (const auto& row : head_budgets) sum += std::accumulate(row.begin(), row.end(), std::size_t{0});
        return sum;
    }

    /// Every head of every layer keeps `n` prompt positions.
    static BudgetPlan keep_all(std::size_t layers, std::size_t heads, std::size_t n) {
        return {std::vector<std::size_t>(layers, n),
                std::vector<std::vector<std::size_t>>(layers, std::vector<std::size_t>(heads, n)), {}};
    }

    /// Budgets compare equal regardless of how the remainder was reached.
    bool same_budgets(const BudgetPlan& o) const {
        return layer_budgets == o.layer_budgets && head_budgets == o.head_budgets;
    }
};

enum class Policy { maskkv, uniform, snap, pyramid, squeeze, ada };

inline std::string_view to_string(Policy p) {
    switch (p) {
        case Policy::maskkv: return "maskkv";
        case Policy::uniform: return "uniform";
        case Policy::snap: return "snap";
        case Policy::pyramid: return "pyramid";
        case Policy::squeeze: return "squeeze";
        case Policy::ada: return "ada";
    }
    return "maskkv";
}

inline Policy parse_policy(std::string_view s) {
    for (Policy p : {Policy::maskkv, Policy::uniform, Policy::snap, Policy::pyramid, Policy::squeeze, Policy::ada}) {
        if (to_string(p) == s) {
            return p;
        }
    }
    throw ConfigError("unknown policy '" + std::string(s) + "'");
}

struct BudgetConfig {
    std::size_t total_budget = 0;  // k_p
    double alpha = 0.1;            // head base rate
    double beta = 0.4;             // layer base rate
    /// Defaults to {0, D - 1}.
    std::vector<std::size_t> boundary_layers;
    Policy policy = Policy::maskkv;

    std::vector<std::size_t> resolved_boundary(std::size_t num_layers) const {
        if (!boundary_layers.empty()) {
            return boundary_layers;
        }
        if (num_layers == 1) {
            return {0};
        }
        return {0, num_layers - 1};
    }
};

/// Knobs of the simplified baseline allocators.
struct BaselineExtras {
    double pyramid_steepness = 20.0;
    double squeeze_fraction = 0.4;
    double ada_reserve = 0.2;
    /// Squeeze ranks layers by this (D entries).
    std::vector<double> layer_importance;
    /// Ada: per layer, per head, a score per prompt position.
    std::vector<std::vector<std::vector<double>>> head_scores;
};

namespace detail {

/// Unit indices sorted by descending priority, ties to the lower index.
inline std::vector<std::size_t> priority_order(const std::vector<double>& priority) {
    std::vector<std::size_t> order(priority.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return priority[a] > priority[b]; });
    return order;
}

/// Restores sum(values) == target one unit at a time: shortfall goes to units
/// in `order` (cycling), surplus is taken from units in reverse order.
inline void conserve(std::vector<long long>& values, long long target, const std::vector<std::size_t>& order,
                     std::vector<BudgetAdjustment>* audit, std::optional<std::size_t> layer_of_heads) {
    long long sum = std::accumulate(values.begin(), values.end(), 0LL);
    auto record = [&](std::size_t unit, int delta) {
        if (audit == nullptr) return;
        if (layer_of_heads) {
            audit->push_back({*layer_of_heads, unit, delta});
        } else {
            audit->push_back({unit, std::nullopt, delta});
        }
    };
    for (std::size_t i = 0; sum < target; i = (i + 1) % order.size()) {
        ++values[order[i]];
        ++sum;
        record(order[i], +1);
    }
    for (std::size_t i = 0; sum > target; i = (i + 1) % order.size()) {
        const std::size_t unit = order[order.size() - 1 - i];
        if (values[unit] > 0) {
            --values[unit];
            --sum;
            record(unit, -1);
        }
    }
}

inline std::vector<std::size_t> to_sizes(const std::vector<long long>& v) {
    std::vector<std::size_t> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<std::size_t>(v[i]);
    return out;
}

inline void check_rate(double r, const char* name) {
    if (!(r >= 0.0 && r <= 1.0)) {
        throw ConfigError(std::string(name) + " must lie in [0, 1]");
    }
}

}  // namespace detail

/// Hybrid boundary-aware layer allocation. Returns k_l for each layer with
/// sum exactly k_p; flooring shortfall goes to layers by descending
/// importance, ties to the lower index.
inline std::vector<std::size_t> allocate_layers(std::size_t total_budget, double beta,
                                                const std::vector<double>& importance,
                                                const std::vector<std::size_t>& boundary, RunLog* log = nullptr,
                                                std::vector<BudgetAdjustment>* audit = nullptr) {
    detail::check_rate(beta, "beta");
    const std::size_t layers = importance.size();
    if (layers == 0) {
        throw ConfigError("layer importance is empty");
    }
    if (boundary.empty()) {
        throw ConfigError("boundary layer set is empty");
    }
    std::vector<char> in_boundary(layers, 0);
    for (std::size_t l : boundary) {
        if (l >= layers) {
            throw ConfigError("boundary layer " + std::to_string(l) + " outside 0.." + std::to_string(layers - 1));
        }
        if (in_boundary[l] != 0) {
            throw ConfigError("boundary layer " + std::to_string(l) + " listed twice");
        }
        in_boundary[l] = 1;
    }
    for (double v : importance) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw ConfigError("layer importance must be finite and nonnegative");
        }
    }

    const auto kp = static_cast<long long>(total_budget);
    const auto d = static_cast<long long>(layers);
    const long long base = robust_floor(beta * static_cast<double>(kp) / static_cast<double>(d));
    const long long imp = kp - d * base;

    double ib = 0.0;
    double im = 0.0;
    long long nb = 0;
    for (std::size_t l = 0; l < layers; ++l) {
        if (in_boundary[l] != 0) {
            ib += importance[l];
            ++nb;
        } else {
            im += importance[l];
        }
    }
    const long long nm = d - nb;

    std::vector<long long> k(layers, base);
    if (ib + im > 0.0) {
        const long long group_b = robust_floor(static_cast<double>(imp) * ib / (ib + im));
        const long long group_m = imp - group_b;
        for (std::size_t l = 0; l < layers; ++l) {
            if (in_boundary[l] != 0) {
                k[l] += group_b / nb;
            } else if (nm > 0) {
                k[l] += group_m / nm;
            }
        }
    } else {
        log_note(log, "allocate_layers: total layer importance is zero, importance budget spread uniformly");
        for (auto& v : k) v += imp / d;
    }
    detail::conserve(k, kp, detail::priority_order(importance), audit, std::nullopt);
    return detail::to_sizes(k);
}

/// Head allocation by normalized prompt preference with base rate alpha.
/// Returns k_{l,h} for each head with sum exactly N_h * k_l.
inline std::vector<std::size_t> allocate_heads(std::size_t layer_budget, double alpha,
                                               const std::vector<double>& preferences, RunLog* log = nullptr,
                                               std::vector<BudgetAdjustment>* audit = nullptr,
                                               std::size_t layer_index = 0) {
    detail::check_rate(alpha, "alpha");
    const std::size_t heads = preferences.size();
    if (heads == 0) {
        throw ConfigError("head preference row is empty");
    }
    double total = 0.0;
    for (double p : preferences) {
        if (!(p >= 0.0) || !std::isfinite(p)) {
            throw ConfigError("head preferences must be finite and nonnegative");
        }
        total += p;
    }
    std::vector<double> normalized(heads, 1.0 / static_cast<double>(heads));
    if (total > 0.0) {
        for (std::size_t h = 0; h < heads; ++h) normalized[h] = preferences[h] / total;
    } else {
        log_note(log, "allocate_heads: preferences sum to zero on layer " + std::to_string(layer_index) +
                          ", using uniform shares");
    }

    const auto kl = static_cast<double>(layer_budget);
    const auto nh = static_cast<double>(heads);
    std::vector<long long> k(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        k[h] = robust_floor(alpha * kl + (1.0 - alpha) * nh * kl * normalized[h]);
    }
    detail::conserve(k, static_cast<long long>(heads * layer_budget), detail::priority_order(normalized), audit,
                     layer_index);
    return detail::to_sizes(k);
}

/// allocate_layers followed by allocate_heads on every layer.
inline BudgetPlan plan_budget(const BudgetConfig& config, const CalibrationProfile& profile, RunLog* log = nullptr) {
    profile.validate();
    BudgetPlan plan;
    plan.layer_budgets = allocate_layers(config.total_budget, config.beta, profile.layer_importance,
                                         config.resolved_boundary(profile.num_layers()), log, &plan.audit);
    for (std::size_t l = 0; l < plan.layer_budgets.size(); ++l) {
        plan.head_budgets.push_back(
            allocate_heads(plan.layer_budgets[l], config.alpha, profile.head_preference[l], log, &plan.audit, l));
    }
    return plan;
}

/// Equal split across layers, remainder to lower layer indices; equal heads.
inline BudgetPlan uniform_plan(std::size_t total_budget, std::size_t layers, std::size_t heads) {
    if (layers == 0 || heads == 0) {
        throw ConfigError("uniform plan needs positive layer and head counts");
    }
    BudgetPlan plan;
    std::vector<long long> k(layers, static_cast<long long>(total_budget / layers));
    detail::conserve(k, static_cast<long long>(total_budget), detail::priority_order(std::vector<double>(layers, 0.0)),
                     &plan.audit, std::nullopt);
    plan.layer_budgets = detail::to_sizes(k);
    for (std::size_t kl : plan.layer_budgets) {
        plan.head_budgets.emplace_back(heads, kl);
    }
    return plan;
}

namespace detail {

inline BudgetPlan with_uniform_heads(std::vector<long long> k, std::size_t heads, std::vector<BudgetAdjustment> audit) {
    BudgetPlan plan;
    plan.layer_budgets = to_sizes(k);
    plan.audit = std::move(audit);
    for (std::size_t kl : plan.layer_budgets) plan.head_budgets.emplace_back(heads, kl);
    return plan;
}

// Linearly decreasing k_l: the top layer gets k_avg / steepness, the bottom
// layer 2 k_avg minus that, so the reals sum to k_p exactly before flooring.
inline BudgetPlan pyramid_plan(std::size_t total_budget, std::size_t layers, std::size_t heads, double steepness) {
    if (!(steepness >= 1.0)) {
        throw ConfigError("pyramid steepness must be at least 1");
    }
    const double avg = static_cast<double>(total_budget) / static_cast<double>(layers);
    const double lo = avg / steepness;
    const double hi = 2.0 * avg - lo;
    const double step = layers > 1 ? (hi - lo) / static_cast<double>(layers - 1) : 0.0;
    std::vector<long long> k(layers);
    std::vector<double> priority(layers);
    for (std::size_t l = 0; l < layers; ++l) {
        const double real = layers > 1 ? hi - static_cast<double>(l) * step : avg;
        k[l] = robust_floor(real);
        priority[l] = -static_cast<double>(l);  // shallower layers first
    }
    std::vector<BudgetAdjustment> audit;
    conserve(k, static_cast<long long>(total_budget), priority_order(priority), &audit, std::nullopt);
    return with_uniform_heads(std::move(k), heads, std::move(audit));
}

// Layers sorted by ascending importance (ties to the lower index) are cut into
// three near-equal groups; the least important ceil(D/3) layers get
// `fraction` of the average share and the saved budget is split evenly among
// the rest.
inline BudgetPlan squeeze_plan(std::size_t total_budget, std::size_t layers, std::size_t heads,
                               const BaselineExtras& extras) {
    if (extras.layer_importance.size() != layers) {
        throw ConfigError("squeeze allocation needs one importance value per layer");
    }
    check_rate(extras.squeeze_fraction, "squeeze fraction");
    const double avg = static_cast<double>(total_budget) / static_cast<double>(layers);
    std::vector<double> real(layers, avg);
    if (layers >= 3) {
        std::vector<std::size_t> ascending(layers);
        std::iota(ascending.begin(), ascending.end(), std::size_t{0});
        std::stable_sort(ascending.begin(), ascending.end(), [&](std::size_t a, std::size_t b) {
            return extras.layer_importance[a] < extras.layer_importance[b];
        });
        const std::size_t least = (layers + 2) / 3;
        const double saved = static_cast<double>(least) * avg * (1.0 - extras.squeeze_fraction);
        const double bonus = saved / static_cast<double>(layers - least);
        for (std::size_t i = 0; i < layers; ++i) {
            real[ascending[i]] = i < least ? avg * extras.squeeze_fraction : avg + bonus;
        }
    }
    std::vector<long long> k(layers);
    for (std::size_t l = 0; l < layers; ++l) k[l] = robust_floor(real[l]);
    std::vector<BudgetAdjustment> audit;
    conserve(k, static_cast<long long>(total_budget), priority_order(extras.layer_importance), &audit, std::nullopt);
    return with_uniform_heads(std::move(k), heads, std::move(audit));
}

// Uniform k_l. Within a layer each head first gets floor(reserve * k_l); the
// rest of the layer's N_h * k_l pairs goes to the globally highest
// per-head-normalized scores pooled over all heads.
inline BudgetPlan ada_plan(std::size_t total_budget, std::size_t layers, std::size_t heads,
                           const BaselineExtras& extras) {
    check_rate(extras.ada_reserve, "ada reserve");
    if (extras.head_scores.size() != layers) {
        throw ConfigError("ada allocation needs head scores for every layer");
    }
    BudgetPlan plan = uniform_plan(total_budget, layers, heads);
    for (std::size_t l = 0; l < layers; ++l) {
        const auto& scores = extras.head_scores[l];
        if (scores.size() != heads) {
            throw ConfigError("ada allocation needs scores for every head");
        }
        const std::size_t kl = plan.layer_budgets[l];
        const auto base = static_cast<std::size_t>(robust_floor(extras.ada_reserve * static_cast<double>(kl)));
        std::size_t pool = heads * (kl - base);

        struct Entry {
            double score;
            std::size_t head;
            std::size_t pos;
        };
        std::vector<Entry> entries;
        for (std::size_t h = 0; h < heads; ++h) {
            const double sum = std::accumulate(scores[h].begin(), scores[h].end(), 0.0);
            const double n = static_cast<double>(scores[h].size());
            for (std::size_t j = 0; j < scores[h].size(); ++j) {
                entries.push_back({sum > 0.0 ? scores[h][j] / sum : 1.0 / n, h, j});
            }
        }
        std::stable_sort(entries.begin(), entries.end(),
                         [](const Entry& a, const Entry& b) { return a.score > b.score; });
        std::vector<long long> k(heads, static_cast<long long>(base));
        const std::size_t take = std::min(pool, entries.size());
        for (std::size_t i = 0; i < take; ++i) ++k[entries[i].head];
        pool -= take;
        // Budget beyond every pooled pair is spread evenly.
        for (auto& v : k) v += static_cast<long long>(pool / heads);
        std::vector<double> flat(heads, 0.0);
        conserve(k, static_cast<long long>(heads * kl), priority_order(flat), &plan.audit, l);
        plan.head_budgets[l] = to_sizes(k);
    }
    return plan;
}

}  // namespace detail

/// Simplified analogues of published allocators. `snap` allocates uniformly;
/// it differs from `uniform` only in how tokens are selected.
inline BudgetPlan baseline_allocate(Policy policy, std::size_t total_budget, std::size_t layers, std::size_t heads,
                                    const BaselineExtras& extras = {}) {
    if (layers == 0 || heads == 0) {
        throw ConfigError("baseline allocation needs positive layer and head counts");
    }
    switch (policy) {
        case Policy::uniform:
        case Policy::snap:
            return uniform_plan(total_budget, layers, heads);
        case Policy::pyramid:
            return detail::pyramid_plan(total_budget, layers, heads, extras.pyramid_steepness);
        case Policy::squeeze:
            return detail::squeeze_plan(total_budget, layers, heads, extras);
        case Policy::ada:
            return detail::ada_plan(total_budget, layers, heads, extras);
        case Policy::maskkv:
            break;
    }
    throw ConfigError("'" + std::string(to_string(policy)) + "' is not a baseline policy");
}

}  // namespace maskkv
