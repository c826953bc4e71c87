// Copyright 2026 The maskkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include "maskkv/budgeting.hpp"
#include "maskkv/common.hpp"
#include "maskkv/eviction.hpp"
#include "maskkv/forward.hpp"
#include "maskkv/kv_cache.hpp"
#include "maskkv/model.hpp"
#include "maskkv/step_scores.hpp"

namespace maskkv {

enum class Selection { mask_voting, snap };

/// Signals available after the first forward step, handed to an online planner.
struct FirstStepSignals {
    const StepOutput& output;
    const DenoisingState& state;
    const ImportanceGrid& selection;
};

struct EvictionConfig {
    /// Fixed (offline) plan. Ignored when `planner` is set.
    BudgetPlan plan;
    /// Builds the plan from first-step signals; used by online baselines.
    std::function<BudgetPlan(const FirstStepSignals&)> planner;
    Selection selection = Selection::mask_voting;
    MaskSegment segment = MaskSegment::all;
    std::size_t snap_window = 32;
    /// Re-score Mask-Voting importance on later prompt-refresh steps and keep
    /// it in DecodeResult::rescored. Keep sets are never changed by it.
    bool rescore_on_prompt_refresh = false;
};

struct StepSummary {
    std::size_t step = 0;
    std::size_t masked_before = 0;
    std::size_t refreshed = 0;
    std::vector<std::size_t> committed;
};

struct CacheStats {
    std::size_t prompt_refreshes = 0;    // prompt positions recomputed, summed over steps
    std::size_t response_refreshes = 0;  // response positions recomputed, summed over steps
    std::vector<std::size_t> refresh_counts;               // per position
    std::vector<std::vector<std::size_t>> retained_prompt; // [layer][head] at the end
    std::uint64_t final_kv_bytes = 0;
    std::uint64_t final_feature_bytes = 0;
};

struct DecodeResult {
    std::vector<TokenId> tokens;
    std::size_t prompt_len = 0;
    std::vector<StepSummary> steps;
    std::optional<CacheStats> cache;
    /// Highest modeled cache footprint (K/V plus cached features) at any
    /// point, with first-step eviction applied layer by layer.
    std::uint64_t peak_modeled_bytes = 0;
    std::optional<EvictionReport> eviction;
    std::optional<BudgetPlan> plan;
    ImportanceGrid first_step_importance;
    std::vector<ImportanceGrid> rescored;
    RunLog log;

    std::vector<TokenId> response() const { return {tokens.begin() + static_cast<std::ptrdiff_t>(prompt_len), tokens.end()}; }
};

/// V at `probe_layer` for every response position, built from the current
/// tokens plus the cached attention/FFN updates of the layers below.
inline Matrix probe_values(const ModelParams& params, const DenoisingState& state, const FeatureCache& cache,
                           std::size_t probe_layer) {
    const ModelConfig& cfg = params.config;
    if (probe_layer >= cfg.num_layers) {
        throw ConfigError("probe layer " + std::to_string(probe_layer) + " outside the model");
    }
    const std::size_t d = cfg.model_dim;
    Matrix v(state.gen_len, d);
    std::vector<double> h(d);
    std::vector<double> normed(d);
    for (std::size_t i = 0; i < state.gen_len; ++i) {
        const std::size_t pos = state.prompt_len + i;
        const auto e = params.embedding.row(state.tokens[pos]);
        std::copy(e.begin(), e.end(), h.begin());
        for (std::size_t l = 0; l < probe_layer; ++l) {
            const FeatureBundle* b = cache.find(l, pos);
            if (b == nullptr || !b->attn_out || !b->ffn_out) {
                throw CacheError("probe needs cached updates for response position " + std::to_string(pos));
            }
            for (std::size_t c = 0; c < d; ++c) h[c] += (*b->attn_out)[c] + (*b->ffn_out)[c];
        }
        detail::rms_norm(h, normed);
        detail::mat_vec(normed, params.layers[probe_layer].wv, v.row(i));
    }
    return v;
}

namespace detail {

inline PositionSet merge_sets(const PositionSet& a, const PositionSet& b) {
    PositionSet out;
    std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
    return out;
}

/// Peak while a full first-step cache is evicted one layer at a time.
inline std::uint64_t layerwise_peak(const std::vector<std::uint64_t>& before, const std::vector<std::uint64_t>& after) {
    std::uint64_t peak = 0;
    std::uint64_t done = 0;
    for (std::size_t l = 0; l < before.size(); ++l) {
        peak = std::max(peak, done + before[l]);
        done += after[l];
    }
    return std::max(peak, done);
}

}  // namespace detail

/// Full denoising loop from x^(T) to x^(0). With `cache_config` the feature
/// cache serves non-refreshed positions; with `eviction` the cache is
/// compacted once, right after the first forward step.
inline DecodeResult decode(const ModelParams& params, const std::vector<TokenId>& prompt, std::size_t gen_len,
                           const RemaskPolicy& policy, const std::optional<CacheConfig>& cache_config = std::nullopt,
                           const std::optional<EvictionConfig>& eviction = std::nullopt) {
    const ModelConfig& cfg = params.config;
    DenoisingState state = initial_state(cfg, prompt, gen_len, policy);
    if (eviction && !cache_config) {
        throw ConfigError("eviction requires a cache configuration");
    }

    DecodeResult result;
    result.prompt_len = state.prompt_len;
    std::optional<FeatureCache> cache;
    PositionSet prompt_positions(state.prompt_len);
    PositionSet response_positions(state.gen_len);
    PositionSet all_positions(state.size());
    for (std::size_t i = 0; i < all_positions.size(); ++i) all_positions[i] = i;
    for (std::size_t i = 0; i < state.prompt_len; ++i) prompt_positions[i] = i;
    for (std::size_t i = 0; i < state.gen_len; ++i) response_positions[i] = state.prompt_len + i;
    if (cache_config) {
        cache_config->validate();
        if (cache_config->probe_layer >= cfg.num_layers) {
            throw ConfigError("probe layer outside the model");
        }
        cache.emplace(cfg, state.prompt_len, state.size(), cache_config->prompt_state_exclusion);
        result.cache.emplace();
        result.cache->refresh_counts.assign(state.size(), 0);
    }
    const bool mask_only = cache_config ? cache_config->mask_only_projection : true;

    bool first = true;
    while (state.step > 0) {
        const std::size_t t = state.step;
        StepSummary summary;
        summary.step = t;
        summary.masked_before = state.masked_positions().size();

        PositionSet refresh;
        std::optional<Matrix> v_now;
        if (cache) {
            if (!cache->populated()) {
                refresh = all_positions;
            } else {
                PositionSet prompt_set;
                for (std::size_t pos : prompt_refresh_set(t, *cache_config, prompt_positions)) {
                    if (cache->retained_anywhere(pos)) prompt_set.push_back(pos);
                }
                v_now = probe_values(params, state, *cache, cache_config->probe_layer);
                const PositionSet response_set = response_refresh_set(t, *cache_config, *v_now, *cache->probe_values(),
                                                                      response_positions, &result.log);
                refresh = detail::merge_sets(prompt_set, response_set);
            }
        }

        const StepOutput out =
            forward_step(params, state, CacheMode{cache ? &*cache : nullptr, cache ? &refresh : nullptr, mask_only});

        if (cache) {
            std::vector<std::uint64_t> before(cfg.num_layers);
            apply_refresh(*cache, out, refresh);
            for (std::size_t l = 0; l < cfg.num_layers; ++l) before[l] = cache->layer_bytes(l);
            cache->set_probe_values(v_now ? std::move(*v_now)
                                          : probe_values(params, state, *cache, cache_config->probe_layer));
            summary.refreshed = refresh.size();
            for (std::size_t pos : refresh) {
                ++result.cache->refresh_counts[pos];
                if (state.is_prompt(pos)) {
                    ++result.cache->prompt_refreshes;
                } else {
                    ++result.cache->response_refreshes;
                }
            }

            if (first) {
                result.first_step_importance = mask_voting_grid(out, state, eviction ? eviction->segment : MaskSegment::all);
            }
            if (first && eviction) {
                const ImportanceGrid selection = eviction->selection == Selection::snap
                                                     ? snap_grid(out, state, eviction->snap_window)
                                                     : result.first_step_importance;
                BudgetPlan plan =
                    eviction->planner ? eviction->planner(FirstStepSignals{out, state, selection}) : eviction->plan;
                result.eviction = evict(*cache, plan, selection, &result.first_step_importance);
                for (const auto& note : result.eviction->log.entries) result.log.note(note);
                result.plan = std::move(plan);
                std::vector<std::uint64_t> after(cfg.num_layers);
                for (std::size_t l = 0; l < cfg.num_layers; ++l) after[l] = cache->layer_bytes(l);
                result.peak_modeled_bytes = std::max(result.peak_modeled_bytes, detail::layerwise_peak(before, after));
            } else if (!first && eviction && eviction->rescore_on_prompt_refresh &&
                       t % cache_config->prompt_interval == 0) {
                bool masked_computed = true;
                for (std::size_t pos : state.masked_positions()) masked_computed = masked_computed && out.computed[pos];
                if (masked_computed) {
                    result.rescored.push_back(mask_voting_grid(out, state, eviction->segment));
                } else {
                    result.log.note("rescore skipped at step " + std::to_string(t) + ": mask rows not recomputed");
                }
            }
            result.peak_modeled_bytes = std::max(result.peak_modeled_bytes, cache->total_bytes());
        } else if (first) {
            result.first_step_importance = mask_voting_grid(out, state);
        }

        state = remask(state, out.logits, policy, &summary.committed);
        result.steps.push_back(std::move(summary));
        first = false;
    }

    result.tokens = state.tokens;
    if (cache) {
        result.cache->retained_prompt = cache->kv_counts(true);
        result.cache->final_kv_bytes = cache->kv_bytes();
        result.cache->final_feature_bytes = cache->feature_bytes();
    }
    return result;
}

}  // namespace maskkv
