// Copyright 2026 The maskkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "maskkv/common.hpp"
#include "maskkv/kv_cache.hpp"
#include "maskkv/model.hpp"

namespace maskkv {

/// How a forward step interacts with the feature cache. With no cache every
/// position is recomputed. With a cache, only `refresh` positions are
/// recomputed and every other position is served from cached features.
struct CacheMode {
    const FeatureCache* cache = nullptr;
    const PositionSet* refresh = nullptr;
    /// Materialize logits only at masked positions.
    bool mask_only_projection = true;
};

namespace detail {

inline void rms_norm(std::span<const double> x, std::span<double> out) {
    double ss = 0.0;
    for (double v : x) ss += v * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + 1e-6);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv;
}

/// out = x W, accumulated row by row of W.
inline void mat_vec(std::span<const double> x, const Matrix& w, std::span<double> out) {
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t i = 0; i < w.rows(); ++i) {
        const double xi = x[i];
        const auto wr = w.row(i);
        for (std::size_t j = 0; j < w.cols(); ++j) out[j] += xi * wr[j];
    }
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

/// Rotates consecutive pairs of each head slice by pos * 10000^(-2i/d_k).
/// An odd trailing dimension is left alone.
inline void apply_rotary(std::span<double> v, std::size_t heads, std::size_t head_dim, std::size_t pos) {
    for (std::size_t h = 0; h < heads; ++h) {
        auto s = v.subspan(h * head_dim, head_dim);
        for (std::size_t i = 0; i + 1 < head_dim; i += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(head_dim));
            const double angle = static_cast<double>(pos) * freq;
            const double c = std::cos(angle);
            const double sn = std::sin(angle);
            const double a = s[i];
            const double b = s[i + 1];
            s[i] = a * c - b * sn;
            s[i + 1] = a * sn + b * c;
        }
    }
}

inline void check_cache_shape(const FeatureCache& cache, const ModelConfig& cfg, const DenoisingState& state) {
    if (cache.num_layers() != cfg.num_layers || cache.num_heads() != cfg.num_heads ||
        cache.head_dim() != cfg.head_dim() || cache.model_dim() != cfg.model_dim) {
        throw CacheError("feature cache shape does not match the model");
    }
    if (cache.seq_len() != state.size() || cache.prompt_len() != state.prompt_len) {
        throw CacheError("feature cache was built for a different sequence layout");
    }
}

}  // namespace detail

/// Logits of the tied output projection for one hidden state.
inline std::vector<double> project_logits(const ModelParams& params, std::span<const double> hidden) {
    std::vector<double> normed(hidden.size());
    detail::rms_norm(hidden, normed);
    std::vector<double> logits(params.config.vocab_size);
    for (std::size_t v = 0; v < logits.size(); ++v) logits[v] = dot(normed, params.embedding.row(v));
    return logits;
}

/// One bidirectional forward pass over the whole sequence. Each layer is
/// pre-norm attention then pre-norm FFN, both residual:
///   h_mid = h + Attn(norm(h)),  h_out = h_mid + FFN(norm(h_mid)),
/// so delta^(l) = attention update + FFN update.
inline StepOutput forward_step(const ModelParams& params, const DenoisingState& state, const CacheMode& mode = {}) {
    state.validate();
    const ModelConfig& cfg = params.config;
    const std::size_t n = state.size();
    const std::size_t d = cfg.model_dim;
    const std::size_t heads = cfg.num_heads;
    const std::size_t dk = cfg.head_dim();
    const std::size_t f = cfg.ffn_width();
    const FeatureCache* cache = mode.cache;
    for (TokenId tok : state.tokens) {
        if (tok >= cfg.vocab_size) throw ProtocolError("token id outside vocabulary");
    }

    StepOutput out;
    out.step = state.step;
    out.computed.assign(n, cache == nullptr || mode.refresh == nullptr);
    if (cache != nullptr) {
        detail::check_cache_shape(*cache, cfg, state);
        if (mode.refresh != nullptr) {
            for (std::size_t pos : *mode.refresh) {
                if (pos >= n) throw ProtocolError("refresh position " + std::to_string(pos) + " outside the sequence");
                out.computed[pos] = true;
            }
        }
    }
    out.tracked.assign(n, false);
    for (std::size_t pos = 0; pos < n; ++pos) {
        if (out.computed[pos]) {
            out.tracked[pos] = true;
            continue;
        }
        const FeatureBundle* b = cache->find(0, pos);
        if (b == nullptr) {
            throw CacheError("position " + std::to_string(pos) + " is neither refreshed nor cached");
        }
        out.tracked[pos] = b->attn_out.has_value();
    }

    out.hidden.assign(cfg.num_layers + 1, Matrix(n, d));
    for (std::size_t pos = 0; pos < n; ++pos) {
        if (!out.tracked[pos]) continue;
        const auto e = params.embedding.row(state.tokens[pos]);
        std::copy(e.begin(), e.end(), out.hidden[0].row(pos).begin());
    }

    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
    std::vector<double> normed(d);
    std::vector<double> concat(d);
    std::vector<double> ffn_hidden(f);

    out.layers.resize(cfg.num_layers);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        const LayerParams& lp = params.layers[l];
        LayerTrace& lt = out.layers[l];
        lt.attn_input = out.hidden[l];
        lt.attn_output = Matrix(n, d);
        lt.queries = Matrix(n, d);
        lt.keys = Matrix(n, d);
        lt.values = Matrix(n, d);
        lt.attn_update = Matrix(n, d);
        lt.ffn_update = Matrix(n, d);
        lt.delta = Matrix(n, d);

        for (std::size_t pos = 0; pos < n; ++pos) {
            if (out.computed[pos]) {
                detail::rms_norm(lt.attn_input.row(pos), normed);
                detail::mat_vec(normed, lp.wq, lt.queries.row(pos));
                detail::mat_vec(normed, lp.wk, lt.keys.row(pos));
                detail::mat_vec(normed, lp.wv, lt.values.row(pos));
                if (cfg.rotary) {
                    detail::apply_rotary(lt.queries.row(pos), heads, dk, pos);
                    detail::apply_rotary(lt.keys.row(pos), heads, dk, pos);
                }
                continue;
            }
            const FeatureBundle* b = cache->find(l, pos);
            if (b == nullptr) throw CacheError("missing cache entry at layer " + std::to_string(l));
            for (std::size_t h = 0; h < heads && h < b->heads.size(); ++h) {
                if (!b->heads[h]) continue;
                std::copy(b->heads[h]->key.begin(), b->heads[h]->key.end(), lt.keys.row(pos).begin() + h * dk);
                std::copy(b->heads[h]->value.begin(), b->heads[h]->value.end(), lt.values.row(pos).begin() + h * dk);
            }
        }

        std::vector<std::size_t> queries;
        for (std::size_t pos = 0; pos < n; ++pos) {
            if (out.computed[pos]) queries.push_back(pos);
        }
        Matrix head_out(n, d);
        lt.heads.resize(heads);
        for (std::size_t h = 0; h < heads; ++h) {
            AttentionMap& am = lt.heads[h];
            am.query_positions = queries;
            for (std::size_t pos = 0; pos < n; ++pos) {
                bool available = true;
                if (cache != nullptr) {
                    if (out.computed[pos]) {
                        available = !cache->evicted(l, h, pos);
                    } else {
                        const FeatureBundle* b = cache->find(l, pos);
                        available = h < b->heads.size() && b->heads[h].has_value();
                    }
                }
                if (available) am.key_positions.push_back(pos);
            }
            am.weights = Matrix(queries.size(), am.key_positions.size());
            for (std::size_t qi = 0; qi < queries.size(); ++qi) {
                const auto q = lt.queries.row(queries[qi]).subspan(h * dk, dk);
                auto w = am.weights.row(qi);
                for (std::size_t ki = 0; ki < am.key_positions.size(); ++ki) {
                    w[ki] = dot(q, lt.keys.row(am.key_positions[ki]).subspan(h * dk, dk)) * inv_sqrt_dk;
                }
                softmax_inplace(w);
                auto o = head_out.row(queries[qi]).subspan(h * dk, dk);
                for (std::size_t ki = 0; ki < am.key_positions.size(); ++ki) {
                    const auto v = lt.values.row(am.key_positions[ki]).subspan(h * dk, dk);
                    for (std::size_t c = 0; c < dk; ++c) o[c] += w[ki] * v[c];
                }
            }
        }

        for (std::size_t pos = 0; pos < n; ++pos) {
            if (!out.tracked[pos]) continue;
            auto attn = lt.attn_update.row(pos);
            auto ffn = lt.ffn_update.row(pos);
            auto mid = lt.attn_output.row(pos);
            const auto in = lt.attn_input.row(pos);
            if (out.computed[pos]) {
                detail::mat_vec(head_out.row(pos), lp.wo, attn);
                for (std::size_t c = 0; c < d; ++c) mid[c] = in[c] + attn[c];
                detail::rms_norm(mid, normed);
                detail::mat_vec(normed, lp.w1, ffn_hidden);
                for (double& x : ffn_hidden) x = detail::gelu(x);
                detail::mat_vec(ffn_hidden, lp.w2, ffn);
            } else {
                const FeatureBundle* b = cache->find(l, pos);
                if (!b->attn_out || !b->ffn_out) {
                    throw CacheError("cached attention/FFN outputs missing at layer " + std::to_string(l));
                }
                std::copy(b->attn_out->begin(), b->attn_out->end(), attn.begin());
                std::copy(b->ffn_out->begin(), b->ffn_out->end(), ffn.begin());
                for (std::size_t c = 0; c < d; ++c) mid[c] = in[c] + attn[c];
            }
            auto next = out.hidden[l + 1].row(pos);
            auto delta = lt.delta.row(pos);
            for (std::size_t c = 0; c < d; ++c) {
                delta[c] = attn[c] + ffn[c];
                next[c] = in[c] + delta[c];
            }
        }
    }

    const Matrix& final_hidden = out.hidden[cfg.num_layers];
    for (std::size_t pos = 0; pos < n; ++pos) {
        const bool masked = !state.is_prompt(pos) && state.tokens[pos] == state.mask_id;
        if (mode.mask_only_projection ? masked : out.tracked[pos]) {
            out.logits.emplace(pos, project_logits(params, final_hidden.row(pos)));
        }
    }
    return out;
}

/// Highest non-mask probability and its token (lowest id on ties).
inline std::pair<double, TokenId> confidence(std::span<const double> logits, TokenId mask_id) {
    std::vector<double> p(logits.begin(), logits.end());
    softmax_inplace(p);
    TokenId best = mask_id == 0 ? 1 : 0;
    for (std::size_t v = 0; v < p.size(); ++v) {
        if (v == mask_id) continue;
        if (p[v] > p[best]) best = static_cast<TokenId>(v);
    }
    return {p[best], best};
}

/// Semi-autoregressive confidence remasking. Inside the first block that
/// still has masks, commits ceil(ratio * remaining) highest-confidence
/// positions (ties to the lower position) to their argmax token.
inline DenoisingState remask(const DenoisingState& state, const std::map<std::size_t, std::vector<double>>& logits,
                             const RemaskPolicy& policy, std::vector<std::size_t>* committed = nullptr) {
    policy.validate();
    if (state.step == 0) {
        throw ProtocolError("remask called at step 0");
    }
    const std::vector<std::size_t> masked = state.masked_positions();
    if (masked.empty()) {
        throw ProtocolError("remask called with no masked positions");
    }
    const std::size_t block = (masked.front() - state.prompt_len) / policy.block_length;
    const std::size_t block_end = state.prompt_len + (block + 1) * policy.block_length;

    struct Candidate {
        std::size_t pos;
        double conf;
        TokenId token;
    };
    std::vector<Candidate> candidates;
    for (std::size_t pos : masked) {
        const auto it = logits.find(pos);
        if (it == logits.end()) {
            throw ProtocolError("logits missing for masked position " + std::to_string(pos));
        }
        if (pos >= block_end) continue;
        const auto [conf, tok] = confidence(it->second, state.mask_id);
        candidates.push_back({pos, conf, tok});
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Candidate& a, const Candidate& b) { return a.conf > b.conf; });

    DenoisingState next = state;
    const std::size_t take = policy.commit_count(candidates.size());
    for (std::size_t i = 0; i < take; ++i) {
        next.tokens[candidates[i].pos] = candidates[i].token;
        if (committed != nullptr) committed->push_back(candidates[i].pos);
    }
    if (committed != nullptr) std::sort(committed->begin(), committed->end());
    next.step = state.step - 1;
    return next;
}

}  // namespace maskkv
