// Copyright (C) 2026 kvlab authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace kvlab {

/// Half-open token range [start, end).
struct Span {
    std::uint32_t start = 0;
    std::uint32_t end = 0;

    std::uint32_t length() const { return end > start ? end - start : 0; }
    bool contains(std::uint32_t i) const { return i >= start && i < end; }
    bool operator==(const Span&) const = default;
};

enum class TraceMode { LastRow, Window, Full };

const char* to_string(TraceMode mode);

struct TraceMeta {
    // Token ids (or text pieces, for externally produced traces).
    nlohmann::json tokens = nlohmann::json::array();
    std::vector<Span> shots;
    std::vector<Span> mandatory;
    std::uint32_t sink_count = 4;
    std::string model;
    nlohmann::json params = nlohmann::json::object();

    bool operator==(const TraceMeta&) const = default;
};

/**
 * Recorded attention weights indexed [layer][head][query][key].
 *
 * Query row q sits at absolute position keys - queries + q, so a trace with
 * queries == 1 holds only the final prompt position and a trace with
 * queries == keys holds every causal row. Weights for keys after a row's
 * position are zero.
 */
class AttentionTrace {
public:
    AttentionTrace() = default;
    AttentionTrace(std::uint32_t layers, std::uint32_t heads, std::uint32_t queries, std::uint32_t keys);

    std::uint32_t layers() const { return m_layers; }
    std::uint32_t heads() const { return m_heads; }
    std::uint32_t queries() const { return m_queries; }
    std::uint32_t keys() const { return m_keys; }
    TraceMode mode() const;

    std::uint32_t query_position(std::uint32_t q) const { return m_keys - m_queries + q; }

    float& at(std::uint32_t l, std::uint32_t h, std::uint32_t q, std::uint32_t t) { return m_weights[offset(l, h, q) + t]; }
    float at(std::uint32_t l, std::uint32_t h, std::uint32_t q, std::uint32_t t) const { return m_weights[offset(l, h, q) + t]; }

    std::span<float> row(std::uint32_t l, std::uint32_t h, std::uint32_t q) { return {m_weights.data() + offset(l, h, q), m_keys}; }
    std::span<const float> row(std::uint32_t l, std::uint32_t h, std::uint32_t q) const {
        return {m_weights.data() + offset(l, h, q), m_keys};
    }

    std::vector<float>& weights() { return m_weights; }
    const std::vector<float>& weights() const { return m_weights; }

    TraceMeta& meta() { return m_meta; }
    const TraceMeta& meta() const { return m_meta; }

    /// Copy with every weight multiplied by `factor`.
    AttentionTrace scaled(float factor) const;

    bool operator==(const AttentionTrace&) const = default;

private:
    std::size_t offset(std::uint32_t l, std::uint32_t h, std::uint32_t q) const {
        return ((static_cast<std::size_t>(l) * m_heads + h) * m_queries + q) * m_keys;
    }

    std::uint32_t m_layers = 0;
    std::uint32_t m_heads = 0;
    std::uint32_t m_queries = 0;
    std::uint32_t m_keys = 0;
    std::vector<float> m_weights;
    TraceMeta m_meta;
};

/// Attention of one decode query, per layer and head, over the cache entries that head could see.
struct StepAttention {
    std::uint32_t layers = 0;
    std::uint32_t heads = 0;
    std::vector<std::vector<float>> rows;               // [layer * heads + head]
    std::vector<std::vector<std::uint32_t>> positions;  // original position of each key in `rows`

    std::size_t unit(std::uint32_t l, std::uint32_t h) const { return static_cast<std::size_t>(l) * heads + h; }

    /// Keeps only keys with position >= `first_position`.
    StepAttention restricted_from(std::uint32_t first_position) const;
};

void to_json(nlohmann::json& j, const Span& s);
void from_json(const nlohmann::json& j, Span& s);

}  // namespace kvlab
