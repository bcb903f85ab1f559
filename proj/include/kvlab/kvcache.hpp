// Copyright (C) 2026 kvlab authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"

namespace kvlab {

enum class Segment { Prefill, Decoding };
enum class Scope { Global, PerLayer, PerLayerPerHead };

const char* to_string(Segment segment);
const char* to_string(Scope scope);

/// Compression budget. `ratio` applies when no phase-specific ratio is set.
struct Budget {
    double ratio = 1.0;
    std::optional<double> prefill_ratio;
    std::optional<double> decoding_ratio;
    std::uint32_t sink_count = 4;
    std::uint32_t min_keep = 1;

    double prefill() const { return prefill_ratio.value_or(ratio); }
    double decoding() const { return decoding_ratio.value_or(ratio); }

    /// Throws BudgetError if any ratio falls outside (0, 1].
    void validate() const;
};

/// m = clamp(floor(r * n), min_keep, n). Throws BudgetError for r outside (0, 1].
std::size_t budget_tokens(double ratio, std::size_t n, std::size_t min_keep = 1);

/**
 * Positions a policy keeps for one cache segment.
 *
 * Units are laid out by scope: one list for Global, one per layer for
 * PerLayer, and layer-major [layer * heads + head] for PerLayerPerHead.
 * Every list holds original token positions, sorted and unique.
 */
struct RetainedSet {
    Scope scope = Scope::Global;
    Segment segment = Segment::Prefill;
    std::uint32_t heads = 1;  // only meaningful for PerLayerPerHead
    std::vector<std::vector<std::uint32_t>> units;

    static RetainedSet global(Segment segment, std::vector<std::uint32_t> positions);

    const std::vector<std::uint32_t>& for_unit(std::uint32_t layer, std::uint32_t head) const;
    std::size_t max_size() const;

    bool operator==(const RetainedSet&) const = default;
};

nlohmann::json to_json(const RetainedSet& retained);

/// Keys and values of one attention head in one layer, in original-position order.
struct HeadCache {
    std::vector<float> keys;    // size() * head_dim
    std::vector<float> values;  // size() * head_dim
    std::vector<std::uint32_t> positions;

    std::size_t size() const { return positions.size(); }
    bool operator==(const HeadCache&) const = default;
};

/**
 * Per-layer, per-head key/value store with original positions.
 *
 * Entries whose position is below prompt_len form the prefill segment; later
 * entries form the decoding segment. Keys are stored post-rotation, so an
 * entry's content never depends on which other entries survive.
 */
class KVCacheSet {
public:
    KVCacheSet() = default;
    KVCacheSet(std::uint32_t layers, std::uint32_t heads, std::uint32_t head_dim, std::uint32_t prompt_len);

    std::uint32_t layers() const { return m_layers; }
    std::uint32_t heads() const { return m_heads; }
    std::uint32_t head_dim() const { return m_head_dim; }
    std::uint32_t prompt_len() const { return m_prompt_len; }

    /// Position the next appended token takes. Monotone; unaffected by eviction.
    std::uint32_t next_position() const { return m_next_position; }
    /// Number of decoding tokens ever appended (evicted ones included).
    std::uint32_t decoded_total() const { return m_next_position > m_prompt_len ? m_next_position - m_prompt_len : 0; }

    HeadCache& head(std::uint32_t l, std::uint32_t h) { return m_heads_data[unit(l, h)]; }
    const HeadCache& head(std::uint32_t l, std::uint32_t h) const { return m_heads_data[unit(l, h)]; }

    /// Appends one key/value pair for (layer, head) at the current next_position().
    void append(std::uint32_t l, std::uint32_t h, std::span<const float> key, std::span<const float> value);
    /// Marks the current token as fully appended across layers and heads.
    void advance();

    std::size_t prefill_count(std::uint32_t l, std::uint32_t h) const;
    std::size_t decoding_count(std::uint32_t l, std::uint32_t h) const;
    std::vector<std::uint32_t> segment_positions(std::uint32_t l, std::uint32_t h, Segment segment) const;

    bool empty() const;
    bool operator==(const KVCacheSet&) const = default;

private:
    std::size_t unit(std::uint32_t l, std::uint32_t h) const { return static_cast<std::size_t>(l) * m_heads + h; }

    std::uint32_t m_layers = 0;
    std::uint32_t m_heads = 0;
    std::uint32_t m_head_dim = 0;
    std::uint32_t m_prompt_len = 0;
    std::uint32_t m_next_position = 0;
    std::vector<HeadCache> m_heads_data;
};

/// Keeps exactly the listed positions of `retained.segment`; the other segment is untouched.
KVCacheSet apply_retention(const KVCacheSet& cache, const RetainedSet& retained);

struct CacheReport {
    // Mean entries per (layer, head) unit; exact for uniform caches.
    std::size_t prefill_tokens = 0;
    std::size_t decoding_tokens = 0;
    std::size_t prefill_bytes = 0;
    std::size_t decoding_bytes = 0;
    std::size_t bytes_estimate = 0;
};

/// bytes = entries * head_dim * 2 (key + value) * 4 bytes, summed over all (layer, head) units.
CacheReport cache_report(const KVCacheSet& cache);

}  // namespace kvlab
