// Copyright 2026 The maskkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>

namespace maskkv {

/// bf16 element size used by the memory model.
inline constexpr std::uint64_t kBf16Bytes = 2;

/// Key + value storage for one layer: 2 * L * H * d_head * s.
constexpr std::uint64_t kv_memory_bytes_per_layer(std::uint64_t seq_len, std::uint64_t heads, std::uint64_t head_dim,
                                                  std::uint64_t elem_bytes = kBf16Bytes) {
    return 2 * seq_len * heads * head_dim * elem_bytes;
}

/// The per-layer figure times the layer count.
constexpr std::uint64_t kv_memory_bytes(std::uint64_t seq_len, std::uint64_t heads, std::uint64_t head_dim,
                                        std::uint64_t elem_bytes = kBf16Bytes, std::uint64_t layers = 1) {
    return kv_memory_bytes_per_layer(seq_len, heads, head_dim, elem_bytes) * layers;
}

}  // namespace maskkv
