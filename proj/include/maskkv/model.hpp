// Copyright 2026 The maskkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "maskkv/common.hpp"

namespace maskkv {

using TokenId = std::uint32_t;

struct ModelConfig {
    std::size_t num_layers = 4;
    std::size_t num_heads = 4;
    std::size_t model_dim = 32;
    std::size_t vocab_size = 64;
    /// Defaults to vocab_size - 1.
    std::optional<TokenId> mask_token;
    std::uint64_t seed = 7;
    /// Hidden width of the feed-forward block; 0 selects 2 * model_dim.
    std::size_t ffn_dim = 0;
    /// Rotary position mixing on Q and K. Disabling it makes the model
    /// permutation-equivariant over positions.
    bool rotary = true;
    /// Adds copy_gain * I to every Wv and Wo after the random draw, giving
    /// attention a path that carries token identity into the residual
    /// stream. 0 keeps the weights purely random.
    double copy_gain = 0.0;
    /// Multiplies every Wq and Wk after the draw; values above 1 sharpen
    /// attention.
    double qk_gain = 1.0;

    TokenId mask_id() const { return mask_token.value_or(static_cast<TokenId>(vocab_size - 1)); }
    std::size_t head_dim() const { return num_heads == 0 ? 0 : model_dim / num_heads; }
    std::size_t ffn_width() const { return ffn_dim == 0 ? 2 * model_dim : ffn_dim; }

    bool operator==(const ModelConfig&) const = default;

    void validate() const {
        if (num_layers == 0) {
            throw ConfigError("num_layers must be positive");
        }
        if (num_heads == 0) {
            throw ConfigError("num_heads must be positive");
        }
        if (model_dim == 0) {
            throw ConfigError("model_dim must be positive");
        }
        if (model_dim % num_heads != 0) {
            throw ConfigError("d not divisible by N_h (d=" + std::to_string(model_dim) +
                              ", N_h=" + std::to_string(num_heads) + ")");
        }
        if (vocab_size < 2) {
            throw ConfigError("vocab_size must be at least 2");
        }
        if (!(qk_gain > 0.0) || !std::isfinite(qk_gain) || !std::isfinite(copy_gain)) {
            throw ConfigError("qk_gain must be positive and gains finite");
        }
        if (mask_id() >= vocab_size) {
            throw ConfigError("mask token id must be below vocab_size");
        }
    }
};

struct LayerParams {
    Matrix wq;  // d x d
    Matrix wk;  // d x d
    Matrix wv;  // d x d
    Matrix wo;  // d x d
    Matrix w1;  // d x f
    Matrix w2;  // f x d

    bool operator==(const LayerParams&) const = default;
};

/// Token embedding doubles as the (tied) output projection.
struct ModelParams {
    ModelConfig config;
    Matrix embedding;  // |V| x d
    std::vector<LayerParams> layers;

    bool operator==(const ModelParams&) const = default;
};

namespace detail {

// mt19937_64's output sequence is fixed by the standard; the conversion to
// [-1, 1) below only uses exact operations, so parameters are bit-identical
// across platforms.
inline void fill_uniform(Matrix& m, std::mt19937_64& gen, double scale) {
    for (double& x : m.data()) {
        const double u = static_cast<double>(gen() >> 11) * 0x1.0p-53;
        x = (2.0 * u - 1.0) * scale;
    }
}

}  // namespace detail

/// Draws every weight from mt19937_64(config.seed), scaled by 1/sqrt(d), in a
/// fixed order: embedding, then per layer wq, wk, wv, wo, w1, w2. Gains are
/// applied afterwards, so they never shift the random stream.
inline ModelParams init_model(const ModelConfig& config) {
    config.validate();
    const std::size_t d = config.model_dim;
    const std::size_t f = config.ffn_width();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    std::mt19937_64 gen(config.seed);
    ModelParams params;
    params.config = config;
    params.embedding = Matrix(config.vocab_size, d);
    detail::fill_uniform(params.embedding, gen, scale);
    params.layers.reserve(config.num_layers);
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        LayerParams lp{Matrix(d, d), Matrix(d, d), Matrix(d, d), Matrix(d, d), Matrix(d, f), Matrix(f, d)};
        for (Matrix* m : {&lp.wq, &lp.wk, &lp.wv, &lp.wo, &lp.w1, &lp.w2}) {
            detail::fill_uniform(*m, gen, scale);
        }
        for (Matrix* m : {&lp.wq, &lp.wk}) {
            for (double& x : m->data()) x *= config.qk_gain;
        }
        for (std::size_t i = 0; i < d; ++i) {
            lp.wv(i, i) += config.copy_gain;
            lp.wo(i, i) += config.copy_gain;
        }
        params.layers.push_back(std::move(lp));
    }
    return params;
}

/// Sequence under iterative denoising: M prompt tokens followed by L_gen
/// response slots; `step` counts down from total_steps (fully masked) to 0.
struct DenoisingState {
    std::vector<TokenId> tokens;
    std::size_t prompt_len = 0;
    std::size_t gen_len = 0;
    std::size_t step = 0;
    std::size_t total_steps = 0;
    TokenId mask_id = 0;

    std::size_t size() const noexcept { return tokens.size(); }
    bool is_prompt(std::size_t pos) const noexcept { return pos < prompt_len; }

    std::vector<std::size_t> masked_positions() const {
        std::vector<std::size_t> out;
        for (std::size_t i = prompt_len; i < tokens.size(); ++i) {
            if (tokens[i] == mask_id) {
                out.push_back(i);
            }
        }
        return out;
    }

    void validate() const {
        if (tokens.size() != prompt_len + gen_len) {
            throw ProtocolError("token count does not equal prompt_len + gen_len");
        }
        for (std::size_t i = 0; i < prompt_len; ++i) {
            if (tokens[i] == mask_id) {
                throw ProtocolError("prompt position " + std::to_string(i) + " holds the mask token");
            }
        }
        if (step > total_steps) {
            throw ProtocolError("step exceeds total_steps");
        }
        const std::size_t masked = masked_positions().size();
        if (step == total_steps && masked != gen_len) {
            throw ProtocolError("initial step must have every response position masked");
        }
        if (step == 0 && masked != 0) {
            throw ProtocolError("masked positions remain at step 0");
        }
        if (step > 0 && masked == 0) {
            throw ProtocolError("empty masked set at step " + std::to_string(step));
        }
    }
};

/// Per-head attention weights. Rows follow `query_positions`, columns follow
/// `key_positions`; both are ascending sequence positions.
struct AttentionMap {
    std::vector<std::size_t> query_positions;
    std::vector<std::size_t> key_positions;
    Matrix weights;
};

struct LayerTrace {
    Matrix attn_input;   // h^(l-1), sub-layer input
    Matrix attn_output;  // h^(l-1) + attention update, sub-layer output
    Matrix queries;      // post-rotary, heads as column blocks
    Matrix keys;         // post-rotary
    Matrix values;
    Matrix attn_update;  // cacheable attention feature
    Matrix ffn_update;   // cacheable FFN feature
    Matrix delta;        // attn_update + ffn_update
    std::vector<AttentionMap> heads;
};

struct StepOutput {
    std::size_t step = 0;
    /// Positions recomputed this step (all of them on a cache-free pass).
    std::vector<bool> computed;
    /// Positions whose hidden state is defined; a prompt position that is
    /// served purely from cached K/V under prompt-state exclusion is not.
    std::vector<bool> tracked;
    /// D + 1 entries; hidden[0] is the embedding, hidden[l] the output of layer l.
    std::vector<Matrix> hidden;
    std::vector<LayerTrace> layers;
    std::map<std::size_t, std::vector<double>> logits;
};

struct RemaskPolicy {
    double transfer_ratio = 0.25;
    std::size_t block_length = 8;

    void validate() const {
        if (!(transfer_ratio > 0.0 && transfer_ratio <= 1.0)) {
            throw ConfigError("transfer_ratio must lie in (0, 1]");
        }
        if (block_length == 0) {
            throw ConfigError("block_length must be positive");
        }
    }

    /// Positions committed when `remaining` masks are left in the active block.
    std::size_t commit_count(std::size_t remaining) const {
        if (remaining == 0) {
            return 0;
        }
        const double raw = std::ceil(transfer_ratio * static_cast<double>(remaining) - 1e-12);
        const auto n = static_cast<std::size_t>(raw);
        return n < 1 ? 1 : (n > remaining ? remaining : n);
    }

    /// Number of denoising steps needed to unmask `gen_len` positions.
    std::size_t total_steps(std::size_t gen_len) const {
        validate();
        std::size_t steps = 0;
        for (std::size_t start = 0; start < gen_len; start += block_length) {
            std::size_t remaining = std::min(block_length, gen_len - start);
            while (remaining > 0) {
                remaining -= commit_count(remaining);
                ++steps;
            }
        }
        return steps;
    }
};

/// x^(T): the prompt followed by gen_len mask tokens.
inline DenoisingState initial_state(const ModelConfig& config, const std::vector<TokenId>& prompt,
                                    std::size_t gen_len, const RemaskPolicy& policy) {
    if (prompt.empty()) {
        throw ConfigError("prompt must be nonempty");
    }
    if (gen_len == 0) {
        throw ConfigError("gen_len must be at least 1");
    }
    DenoisingState s;
    s.mask_id = config.mask_id();
    for (TokenId tok : prompt) {
        if (tok >= config.vocab_size) {
            throw ConfigError("prompt token " + std::to_string(tok) + " outside vocabulary");
        }
    }
    s.tokens = prompt;
    s.tokens.resize(prompt.size() + gen_len, s.mask_id);
    s.prompt_len = prompt.size();
    s.gen_len = gen_len;
    s.total_steps = policy.total_steps(gen_len);
    s.step = s.total_steps;
    s.validate();
    return s;
}

}  // namespace maskkv
