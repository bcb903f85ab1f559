// Copyright (C) 2026 kvlab authors
// SPDX-License-Identifier: Apache-2.0

#include "kvlab/trace.hpp"

#include "kvlab/error.hpp"

namespace kvlab {

const char* to_string(TraceMode mode) {
    switch (mode) {
    case TraceMode::LastRow: return "last-row";
    case TraceMode::Window: return "window";
    case TraceMode::Full: return "full";
    }
    return "?";
}

AttentionTrace::AttentionTrace(std::uint32_t layers, std::uint32_t heads, std::uint32_t queries, std::uint32_t keys)
    : m_layers(layers), m_heads(heads), m_queries(queries), m_keys(keys) {
    if (queries > keys) {
        throw TraceError("trace has more query rows (" + std::to_string(queries) + ") than keys (" +
                         std::to_string(keys) + ")");
    }
    m_weights.assign(static_cast<std::size_t>(layers) * heads * queries * keys, 0.0f);
}

TraceMode AttentionTrace::mode() const {
    if (m_queries == m_keys) {
        return TraceMode::Full;
    }
    return m_queries == 1 ? TraceMode::LastRow : TraceMode::Window;
}

AttentionTrace AttentionTrace::scaled(float factor) const {
    AttentionTrace out = *this;
    for (float& w : out.m_weights) {
        w *= factor;
    }
    return out;
}

StepAttention StepAttention::restricted_from(std::uint32_t first_position) const {
    StepAttention out;
    out.layers = layers;
    out.heads = heads;
    out.rows.resize(rows.size());
    out.positions.resize(positions.size());
    for (std::size_t u = 0; u < rows.size(); ++u) {
        for (std::size_t i = 0; i < positions[u].size(); ++i) {
            if (positions[u][i] >= first_position) {
                out.rows[u].push_back(rows[u][i]);
                out.positions[u].push_back(positions[u][i]);
            }
        }
    }
    return out;
}

void to_json(nlohmann::json& j, const Span& s) { j = nlohmann::json::array({s.start, s.end}); }

void from_json(const nlohmann::json& j, Span& s) {
    if (!j.is_array() || j.size() != 2) {
        throw FormatError("span must be a [start, end] pair, got " + j.dump());
    }
    s.start = j.at(0).get<std::uint32_t>();
    s.end = j.at(1).get<std::uint32_t>();
}

}  // namespace kvlab
