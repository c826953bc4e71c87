// Copyright 2026 The maskkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "maskkv/common.hpp"
#include "maskkv/forward.hpp"
#include "maskkv/model.hpp"
#include "maskkv/scoring.hpp"

// Binary layout, all little-endian:
//   "MKVTRC01"
//   u32 layers, heads, prompt_len, mask_len, head_dim
//   f32 q_mask [layer][head][mask row][head_dim]
//   f32 k_full [layer][head][position][head_dim]
//   f32 h_in   [layer][position][model_dim]
//   f32 h_out  [layer][position][model_dim]
//   u32 manifest byte length, then "key=value\n" lines (UTF-8)

namespace maskkv {

inline constexpr std::array<char, 8> kTraceMagic = {'M', 'K', 'V', 'T', 'R', 'C', '0', '1'};

struct TraceDims {
    std::uint32_t layers = 0;
    std::uint32_t heads = 0;
    std::uint32_t prompt_len = 0;
    std::uint32_t mask_len = 0;
    std::uint32_t head_dim = 0;

    std::size_t positions() const noexcept { return std::size_t{prompt_len} + mask_len; }
    std::size_t model_dim() const noexcept { return std::size_t{heads} * head_dim; }
    std::size_t q_count() const noexcept { return std::size_t{layers} * heads * mask_len * head_dim; }
    std::size_t k_count() const noexcept { return std::size_t{layers} * heads * positions() * head_dim; }
    std::size_t h_count() const noexcept { return std::size_t{layers} * positions() * model_dim(); }

    bool operator==(const TraceDims&) const = default;
};

/// Attention tensors of one first-step forward pass.
struct AttentionTrace {
    TraceDims dims;
    std::vector<float> q_mask;
    std::vector<float> k_full;
    std::vector<float> h_in;
    std::vector<float> h_out;
    std::map<std::string, std::string> manifest;

    Matrix queries(std::size_t layer, std::size_t head) const {
        return block(q_mask, (layer * dims.heads + head) * dims.mask_len, dims.mask_len, dims.head_dim);
    }
    Matrix keys(std::size_t layer, std::size_t head) const {
        return block(k_full, (layer * dims.heads + head) * dims.positions(), dims.positions(), dims.head_dim);
    }
    Matrix input(std::size_t layer) const {
        return block(h_in, layer * dims.positions(), dims.positions(), dims.model_dim());
    }
    Matrix output(std::size_t layer) const {
        return block(h_out, layer * dims.positions(), dims.positions(), dims.model_dim());
    }

    bool operator==(const AttentionTrace&) const = default;

private:
    static Matrix block(const std::vector<float>& src, std::size_t first_row, std::size_t rows, std::size_t cols) {
        Matrix m(rows, cols);
        const float* p = src.data() + first_row * cols;
        for (std::size_t i = 0; i < rows * cols; ++i) m.data()[i] = p[i];
        return m;
    }
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
           static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

inline void put_floats(std::vector<std::uint8_t>& out, const std::vector<float>& v) {
    for (float f : v) put_u32(out, std::bit_cast<std::uint32_t>(f));
}

inline std::string manifest_text(const std::map<std::string, std::string>& manifest) {
    std::string text;
    for (const auto& [k, v] : manifest) {
        if (k.empty() || k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
            throw ConfigError("manifest entries need a nonempty key without '=' or newlines");
        }
        text += k + "=" + v + "\n";
    }
    return text;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_trace(const AttentionTrace& t) {
    if (t.q_mask.size() != t.dims.q_count() || t.k_full.size() != t.dims.k_count() ||
        t.h_in.size() != t.dims.h_count() || t.h_out.size() != t.dims.h_count()) {
        throw ConfigError("trace arrays do not match their dimensions");
    }
    const std::string manifest = detail::manifest_text(t.manifest);
    std::vector<std::uint8_t> out(kTraceMagic.begin(), kTraceMagic.end());
    for (std::uint32_t v : {t.dims.layers, t.dims.heads, t.dims.prompt_len, t.dims.mask_len, t.dims.head_dim}) {
        detail::put_u32(out, v);
    }
    detail::put_floats(out, t.q_mask);
    detail::put_floats(out, t.k_full);
    detail::put_floats(out, t.h_in);
    detail::put_floats(out, t.h_out);
    detail::put_u32(out, static_cast<std::uint32_t>(manifest.size()));
    out.insert(out.end(), manifest.begin(), manifest.end());
    return out;
}

inline AttentionTrace parse_trace(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kTraceMagic.size() || std::memcmp(bytes.data(), kTraceMagic.data(), kTraceMagic.size()) != 0) {
        throw ParseError(0, "bad magic, not an attention trace");
    }
    constexpr std::size_t header = 8 + 5 * 4;
    if (bytes.size() < header) {
        throw ParseError(bytes.size(), "truncated header: expected " + std::to_string(header) + " bytes, got " +
                                           std::to_string(bytes.size()));
    }
    AttentionTrace t;
    std::uint32_t* fields[] = {&t.dims.layers, &t.dims.heads, &t.dims.prompt_len, &t.dims.mask_len, &t.dims.head_dim};
    const char* names[] = {"layers", "heads", "prompt_len", "mask_len", "head_dim"};
    for (std::size_t i = 0; i < 5; ++i) {
        *fields[i] = detail::get_u32(bytes.data() + 8 + 4 * i);
        if (*fields[i] == 0) {
            throw ParseError(8 + 4 * i, std::string("dimension ") + names[i] + " must be positive");
        }
    }

    // Reject dimension products too large to address.
    const long double ld = t.dims.layers;
    const long double hd = t.dims.heads;
    const long double pos = static_cast<long double>(t.dims.prompt_len) + t.dims.mask_len;
    const long double dk = t.dims.head_dim;
    const long double floats = ld * hd * dk * (t.dims.mask_len + pos + 2.0L * pos);
    if (floats * 4.0L + header + 4.0L > static_cast<long double>(std::numeric_limits<std::uint64_t>::max() / 2)) {
        throw ParseError(8, "dimensions overflow the payload size");
    }
    const std::uint64_t payload_end = header + 4 * (t.dims.q_count() + t.dims.k_count() + 2 * t.dims.h_count());
    if (bytes.size() < payload_end + 4) {
        throw ParseError(bytes.size(), "truncated payload: expected at least " + std::to_string(payload_end + 4) +
                                           " bytes, got " + std::to_string(bytes.size()));
    }

    std::size_t offset = header;
    auto read_floats = [&](std::vector<float>& dst, std::size_t count, const char* what) {
        dst.resize(count);
        for (std::size_t i = 0; i < count; ++i, offset += 4) {
            dst[i] = std::bit_cast<float>(detail::get_u32(bytes.data() + offset));
            if (!std::isfinite(dst[i])) {
                throw ParseError(offset, std::string("non-finite value in ") + what);
            }
        }
    };
    read_floats(t.q_mask, t.dims.q_count(), "q_mask");
    read_floats(t.k_full, t.dims.k_count(), "k_full");
    read_floats(t.h_in, t.dims.h_count(), "h_in");
    read_floats(t.h_out, t.dims.h_count(), "h_out");

    const std::uint32_t len = detail::get_u32(bytes.data() + offset);
    offset += 4;
    if (bytes.size() - offset < len) {
        throw ParseError(bytes.size(), "truncated manifest: expected " + std::to_string(offset + len) + " bytes, got " +
                                           std::to_string(bytes.size()));
    }
    if (bytes.size() - offset > len) {
        throw ParseError(offset + len, "trailing bytes after manifest");
    }
    const std::string text(reinterpret_cast<const char*>(bytes.data() + offset), len);
    std::size_t line_start = 0;
    while (line_start < text.size()) {
        const std::size_t nl = text.find('\n', line_start);
        if (nl == std::string::npos) {
            throw ParseError(offset + text.size(), "manifest line is not newline-terminated");
        }
        const std::string line = text.substr(line_start, nl - line_start);
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw ParseError(offset + line_start, "manifest line is not key=value");
        }
        t.manifest[line.substr(0, eq)] = line.substr(eq + 1);
        line_start = nl + 1;
    }
    return t;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw InputError("cannot open '" + path + "'");
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw InputError("cannot write '" + path + "'");
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw InputError("short write to '" + path + "'");
    }
}

inline void save_trace(const AttentionTrace& t, const std::string& path) { write_file_bytes(path, serialize_trace(t)); }

inline AttentionTrace load_trace(const std::string& path) { return parse_trace(read_file_bytes(path)); }

/// Records the first forward step of x^(T) for `prompt`.
inline AttentionTrace capture_trace(const ModelParams& params, const std::vector<TokenId>& prompt, std::size_t gen_len,
                                    const RemaskPolicy& policy = {}) {
    const ModelConfig& cfg = params.config;
    const DenoisingState state = initial_state(cfg, prompt, gen_len, policy);
    const StepOutput out = forward_step(params, state);
    AttentionTrace t;
    t.dims = {static_cast<std::uint32_t>(cfg.num_layers), static_cast<std::uint32_t>(cfg.num_heads),
              static_cast<std::uint32_t>(state.prompt_len), static_cast<std::uint32_t>(state.gen_len),
              static_cast<std::uint32_t>(cfg.head_dim())};
    const std::size_t dk = cfg.head_dim();
    const std::size_t n = state.size();
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        const LayerTrace& lt = out.layers[l];
        for (std::size_t h = 0; h < cfg.num_heads; ++h) {
            for (std::size_t i = 0; i < state.gen_len; ++i) {
                for (std::size_t c = 0; c < dk; ++c) {
                    t.q_mask.push_back(static_cast<float>(lt.queries(state.prompt_len + i, h * dk + c)));
                }
            }
        }
        for (std::size_t h = 0; h < cfg.num_heads; ++h) {
            for (std::size_t p = 0; p < n; ++p) {
                for (std::size_t c = 0; c < dk; ++c) t.k_full.push_back(static_cast<float>(lt.keys(p, h * dk + c)));
            }
        }
    }
    // Layer-major order separates the K/V arrays above from the hidden states.
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        for (double v : out.layers[l].attn_input.data()) t.h_in.push_back(static_cast<float>(v));
    }
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        for (double v : out.layers[l].attn_output.data()) t.h_out.push_back(static_cast<float>(v));
    }
    t.manifest["model_seed"] = std::to_string(cfg.seed);
    t.manifest["prompt_len"] = std::to_string(state.prompt_len);
    t.manifest["gen_len"] = std::to_string(state.gen_len);
    return t;
}

/// Mask attention of one head recomputed from the stored Q/K.
inline MaskAttention trace_mask_attention(const AttentionTrace& t, std::size_t layer, std::size_t head) {
    if (layer >= t.dims.layers || head >= t.dims.heads) {
        throw ConfigError("trace has no layer " + std::to_string(layer) + " head " + std::to_string(head));
    }
    return mask_attention(t.queries(layer, head), t.keys(layer, head), t.dims.prompt_len);
}

}  // namespace maskkv
