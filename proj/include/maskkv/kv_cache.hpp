// Copyright 2026 The maskkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "maskkv/budgeting.hpp"
#include "maskkv/common.hpp"
#include "maskkv/harness/memory.hpp"
#include "maskkv/keep_set.hpp"
#include "maskkv/model.hpp"

namespace maskkv {

using PositionSet = std::vector<std::size_t>;

struct CacheConfig {
    std::size_t prompt_interval = 50;   // T_p
    std::size_t response_interval = 5;  // T_r
    double shift_threshold = 0.5;       // delta
    bool prompt_state_exclusion = true;
    bool mask_only_projection = true;
    /// Layer whose V vectors feed the cosine shift test.
    std::size_t probe_layer = 0;

    void validate() const {
        if (prompt_interval == 0) throw ConfigError("T_p must be at least 1");
        if (response_interval == 0) throw ConfigError("T_r must be at least 1");
        if (!(shift_threshold >= -1.0 && shift_threshold <= 1.0)) {
            throw ConfigError("delta must lie in [-1, 1]");
        }
    }

    /// Refreshes every position on every step.
    static CacheConfig refresh_all() {
        CacheConfig c;
        c.prompt_interval = 1;
        c.response_interval = 1;
        c.shift_threshold = -1.0;
        return c;
    }
};

struct HeadKV {
    std::vector<double> key;
    std::vector<double> value;

    bool operator==(const HeadKV&) const = default;
};

/// Cached features of one position at one layer. A head's entry is empty
/// once that (layer, head) evicted the position.
struct FeatureBundle {
    std::vector<std::optional<HeadKV>> heads;
    std::optional<std::vector<double>> attn_out;
    std::optional<std::vector<double>> ffn_out;

    bool operator==(const FeatureBundle&) const = default;
};

class FeatureCache {
public:
    FeatureCache() = default;
    FeatureCache(const ModelConfig& model, std::size_t prompt_len, std::size_t seq_len, bool prompt_state_exclusion)
        : layers_(model.num_layers),
          heads_(model.num_heads),
          head_dim_(model.head_dim()),
          model_dim_(model.model_dim),
          prompt_len_(prompt_len),
          seq_len_(seq_len),
          exclusion_(prompt_state_exclusion),
          entries_(model.num_layers),
          last_refresh_(seq_len) {}

    std::size_t num_layers() const noexcept { return layers_; }
    std::size_t num_heads() const noexcept { return heads_; }
    std::size_t head_dim() const noexcept { return head_dim_; }
    std::size_t model_dim() const noexcept { return model_dim_; }
    std::size_t prompt_len() const noexcept { return prompt_len_; }
    std::size_t seq_len() const noexcept { return seq_len_; }
    bool prompt_state_exclusion() const noexcept { return exclusion_; }

    bool populated() const noexcept { return !entries_.empty() && !entries_.front().empty(); }
    bool compacted() const noexcept { return !keep_sets_.empty(); }

    const FeatureBundle* find(std::size_t layer, std::size_t pos) const {
        const auto it = entries_.at(layer).find(pos);
        return it == entries_[layer].end() ? nullptr : &it->second;
    }

    const std::map<std::size_t, FeatureBundle>& layer_entries(std::size_t layer) const { return entries_.at(layer); }

    /// True when (layer, head) dropped this prompt position.
    bool evicted(std::size_t layer, std::size_t head, std::size_t pos) const {
        return compacted() && pos < prompt_len_ && retained_[layer][head][pos] == 0;
    }

    /// Prompt position kept by at least one (layer, head).
    bool retained_anywhere(std::size_t pos) const {
        if (!compacted() || pos >= prompt_len_) return true;
        for (std::size_t l = 0; l < layers_; ++l) {
            for (std::size_t h = 0; h < heads_; ++h) {
                if (retained_[l][h][pos] != 0) return true;
            }
        }
        return false;
    }

    const KeepSets& keep_sets() const noexcept { return keep_sets_; }

    std::optional<std::size_t> last_refresh(std::size_t pos) const { return last_refresh_.at(pos); }

    /// Count of positions holding K/V per [layer][head].
    std::vector<std::vector<std::size_t>> kv_counts(bool prompt_only = false) const {
        std::vector<std::vector<std::size_t>> out(layers_, std::vector<std::size_t>(heads_, 0));
        for (std::size_t l = 0; l < layers_; ++l) {
            for (const auto& [pos, bundle] : entries_[l]) {
                if (prompt_only && pos >= prompt_len_) continue;
                for (std::size_t h = 0; h < heads_; ++h) {
                    out[l][h] += bundle.heads[h].has_value() ? 1 : 0;
                }
            }
        }
        return out;
    }

    /// Modeled K/V bytes at `elem_bytes` per element.
    std::uint64_t kv_bytes(std::uint64_t elem_bytes = kBf16Bytes) const {
        std::uint64_t total = 0;
        for (const auto& row : kv_counts()) {
            for (std::size_t c : row) total += kv_memory_bytes(c, 1, head_dim_, elem_bytes, 1);
        }
        return total;
    }

    /// Modeled bytes of cached attention/FFN outputs.
    std::uint64_t feature_bytes(std::uint64_t elem_bytes = kBf16Bytes) const {
        std::uint64_t total = 0;
        for (const auto& layer : entries_) {
            for (const auto& [pos, bundle] : layer) {
                total += bundle.attn_out ? bundle.attn_out->size() * elem_bytes : 0;
                total += bundle.ffn_out ? bundle.ffn_out->size() * elem_bytes : 0;
            }
        }
        return total;
    }

    /// K/V plus feature bytes held for one layer.
    std::uint64_t layer_bytes(std::size_t layer, std::uint64_t elem_bytes = kBf16Bytes) const {
        std::uint64_t total = 0;
        for (const auto& [pos, bundle] : entries_.at(layer)) {
            for (const auto& head : bundle.heads) {
                total += head ? kv_memory_bytes(1, 1, head_dim_, elem_bytes, 1) : 0;
            }
            total += bundle.attn_out ? bundle.attn_out->size() * elem_bytes : 0;
            total += bundle.ffn_out ? bundle.ffn_out->size() * elem_bytes : 0;
        }
        return total;
    }

    std::uint64_t total_bytes(std::uint64_t elem_bytes = kBf16Bytes) const {
        return kv_bytes(elem_bytes) + feature_bytes(elem_bytes);
    }

    /// V vectors of response positions seen by the previous shift test.
    const std::optional<Matrix>& probe_values() const noexcept { return probe_values_; }
    void set_probe_values(Matrix v) { probe_values_ = std::move(v); }

    bool operator==(const FeatureCache&) const = default;

private:
    friend void apply_refresh(FeatureCache&, const StepOutput&, const PositionSet&);
    friend void compact(FeatureCache&, const BudgetPlan&, const ImportanceGrid&, RunLog*);

    std::size_t layers_ = 0;
    std::size_t heads_ = 0;
    std::size_t head_dim_ = 0;
    std::size_t model_dim_ = 0;
    std::size_t prompt_len_ = 0;
    std::size_t seq_len_ = 0;
    bool exclusion_ = true;
    std::vector<std::map<std::size_t, FeatureBundle>> entries_;
    std::vector<std::optional<std::size_t>> last_refresh_;
    KeepSets keep_sets_;
    std::vector<std::vector<std::vector<char>>> retained_;
    std::optional<Matrix> probe_values_;
};

/// S_P(t): every prompt position when t mod T_p == 0, else nothing.
inline PositionSet prompt_refresh_set(std::size_t step, const CacheConfig& config, const PositionSet& prompt_positions) {
    config.validate();
    return step % config.prompt_interval == 0 ? prompt_positions : PositionSet{};
}

/// S_period(t) union S_shift(t). Row i of v_now / v_prev belongs to
/// response_positions[i]; a zero-norm row counts as cosine 1.
inline PositionSet response_refresh_set(std::size_t step, const CacheConfig& config, const Matrix& v_now,
                                        const Matrix& v_prev, const PositionSet& response_positions,
                                        RunLog* log = nullptr) {
    config.validate();
    if (step % config.response_interval == 0) {
        return response_positions;
    }
    if (v_now.rows() != response_positions.size() || v_prev.rows() != response_positions.size() ||
        v_now.cols() != v_prev.cols()) {
        throw ConfigError("V matrices do not cover the response positions");
    }
    PositionSet out;
    std::size_t degenerate_rows = 0;
    for (std::size_t i = 0; i < response_positions.size(); ++i) {
        bool degenerate = false;
        const double c = cosine_or(v_now.row(i), v_prev.row(i), 1.0, &degenerate);
        degenerate_rows += degenerate ? 1 : 0;
        if (c < config.shift_threshold) {
            out.push_back(response_positions[i]);
        }
    }
    if (degenerate_rows > 0) {
        log_note(log, "response_refresh_set: " + std::to_string(degenerate_rows) +
                          " zero-norm V row(s) treated as unshifted at step " + std::to_string(step));
    }
    return out;
}

/// Replaces the bundles at `refresh` with the features in `out`. K/V of heads
/// that evicted a position stay evicted; attention/FFN outputs of prompt
/// positions are dropped under prompt-state exclusion.
inline void apply_refresh(FeatureCache& cache, const StepOutput& out, const PositionSet& refresh) {
    if (out.layers.size() != cache.layers_) {
        throw CacheError("step output layer count does not match the cache");
    }
    const std::size_t dk = cache.head_dim_;
    for (std::size_t pos : refresh) {
        if (pos >= cache.seq_len_) {
            throw ProtocolError("refresh position " + std::to_string(pos) + " outside the sequence");
        }
        if (pos >= out.computed.size() || !out.computed[pos]) {
            throw ProtocolError("refresh position " + std::to_string(pos) + " was not computed this step");
        }
        const bool keep_states = pos >= cache.prompt_len_ || !cache.exclusion_;
        for (std::size_t l = 0; l < cache.layers_; ++l) {
            const LayerTrace& lt = out.layers[l];
            FeatureBundle& b = cache.entries_[l][pos];
            b.heads.resize(cache.heads_);
            for (std::size_t h = 0; h < cache.heads_; ++h) {
                if (cache.evicted(l, h, pos)) {
                    b.heads[h].reset();
                    continue;
                }
                const auto k = lt.keys.row(pos).subspan(h * dk, dk);
                const auto v = lt.values.row(pos).subspan(h * dk, dk);
                b.heads[h] = HeadKV{{k.begin(), k.end()}, {v.begin(), v.end()}};
            }
            if (keep_states) {
                const auto a = lt.attn_update.row(pos);
                const auto f = lt.ffn_update.row(pos);
                b.attn_out = std::vector<double>(a.begin(), a.end());
                b.ffn_out = std::vector<double>(f.begin(), f.end());
            } else {
                b.attn_out.reset();
                b.ffn_out.reset();
            }
        }
        cache.last_refresh_[pos] = out.step;
    }
}

/// Keeps arg-top-k_{l,h} of each head's importance and drops every other
/// prompt K/V of that head. Budgets above n_p are clamped (and logged).
inline void compact(FeatureCache& cache, const BudgetPlan& plan, const ImportanceGrid& importance,
                    RunLog* log = nullptr) {
    if (cache.compacted()) {
        throw CacheError("cache was already compacted; eviction is irreversible");
    }
    if (plan.num_layers() != cache.layers_ || plan.head_budgets.size() != cache.layers_) {
        throw ConfigError("budget plan does not cover every layer");
    }
    if (importance.size() != cache.layers_) {
        throw ConfigError("importance does not cover every layer");
    }
    const std::size_t np = cache.prompt_len_;
    for (std::size_t l = 0; l < cache.layers_; ++l) {
        if (plan.head_budgets[l].size() != cache.heads_ || importance[l].size() != cache.heads_) {
            throw ConfigError("plan or importance does not cover every head of layer " + std::to_string(l));
        }
        for (const ImportanceVector& iv : importance[l]) {
            if (iv.scores.size() != np) {
                throw ConfigError("importance length differs from the prompt length");
            }
        }
    }
    cache.keep_sets_.assign(cache.layers_, std::vector<KeepSet>(cache.heads_));
    cache.retained_.assign(cache.layers_, std::vector<std::vector<char>>(cache.heads_, std::vector<char>(np, 0)));
    for (std::size_t l = 0; l < cache.layers_; ++l) {
        for (std::size_t h = 0; h < cache.heads_; ++h) {
            const auto& scores = importance[l][h].scores;
            std::size_t k = plan.head_budgets[l][h];
            if (k > np) {
                log_note(log, "compact: budget " + std::to_string(k) + " for layer " + std::to_string(l) + " head " +
                                  std::to_string(h) + " clamped to prompt length " + std::to_string(np));
                k = np;
            }
            cache.keep_sets_[l][h] = select_keep_set(scores, k);
            for (std::size_t pos : cache.keep_sets_[l][h]) cache.retained_[l][h][pos] = 1;
            for (auto& [pos, bundle] : cache.entries_[l]) {
                if (pos < np && cache.retained_[l][h][pos] == 0 && h < bundle.heads.size()) {
                    bundle.heads[h].reset();
                }
            }
        }
    }
}

}  // namespace maskkv
