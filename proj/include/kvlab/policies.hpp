// Copyright (C) 2026 kvlab authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "kvlab/kvcache.hpp"
#include "kvlab/trace.hpp"

namespace kvlab::policies {

enum class PolicyKind { FullKV, StreamingLLM, H2O, SnapKV, PyramidKV, ChunkKV, ShotKV };

inline constexpr PolicyKind kAllPolicies[] = {PolicyKind::FullKV,    PolicyKind::StreamingLLM, PolicyKind::H2O,
                                              PolicyKind::SnapKV,    PolicyKind::PyramidKV,    PolicyKind::ChunkKV,
                                              PolicyKind::ShotKV};

const char* to_string(PolicyKind kind);
/// Case-insensitive. Throws ConfigError for unknown names.
PolicyKind parse_policy_kind(std::string_view name);

/// How ShotKV walks the score-sorted shot list once a shot no longer fits.
enum class ShotScan { StopAtFirstMisfit, ContinuePastMisfit };

struct PolicyParams {
    std::uint32_t sink_count = 4;
    std::uint32_t obs_window = 32;
    std::uint32_t pool_kernel = 7;
    std::uint32_t recent_count = 32;
    std::uint32_t chunk_size = 10;
    double pyramid_min_ratio = 0.2;
    // ShotKV: number of trailing prompt query rows used for shot scores (1 = last position only).
    std::uint32_t shot_query_rows = 1;
    ShotScan shot_scan = ShotScan::StopAtFirstMisfit;
    // ShotKV: accumulate decoding scores across steps instead of using the current step only.
    bool accumulate_decoding = false;
};

struct PolicyConfig {
    PolicyKind kind = PolicyKind::FullKV;
    Budget budget;
    PolicyParams params;

    /// Throws ConfigError / BudgetError.
    void validate() const;
};

nlohmann::json to_json(const PolicyConfig& config);
/// Missing keys fall back to defaults; `ratio`, `r_p`, `r_d` populate the budget.
PolicyConfig policy_from_json(const nlohmann::json& j);

struct ShotSegmentation {
    std::vector<Span> shots;
    std::vector<Span> mandatory;

    std::size_t n_shots() const { return shots.size(); }

    /// Non-overlapping, sorted, nonempty shots inside [0, prompt_len); mandatory disjoint from shots.
    void validate(std::size_t prompt_len) const;

    /// Tokens outside every shot. Explicit mandatory ranges and uncovered gaps both count.
    std::vector<std::uint32_t> mandatory_positions(std::size_t prompt_len) const;

    static ShotSegmentation from_meta(const TraceMeta& meta);
    /// Splits on `marker`: first piece is a mandatory prefix, last piece a mandatory suffix,
    /// the pieces between are shots (each keeping its trailing marker). Fewer than three
    /// pieces yields a single shot spanning the whole text.
    static ShotSegmentation from_marker(std::string_view text, std::string_view marker);
};

struct ScoreVector {
    Segment segment = Segment::Prefill;
    std::vector<double> scores;
    std::vector<std::uint32_t> positions;
    std::string provenance;
};

// ---------------------------------------------------------------------------
// ShotKV

/// Score(s_i) = (1/k_i) * sum over tokens in s_i, heads and layers of the designated query rows' attention.
std::vector<double> score_prefill_shots(const AttentionTrace& trace, const ShotSegmentation& seg, std::uint32_t query_rows = 1);

/// Greedy budgeted selection over shots sorted by descending score (ties: lower index). Returns ascending shot ids.
std::vector<std::size_t> select_shots(std::span<const double> shot_scores, std::span<const std::size_t> shot_lengths,
                                      std::size_t prefill_budget, std::size_t mandatory_cost,
                                      ShotScan scan = ShotScan::StopAtFirstMisfit);

RetainedSet shotkv_prefill(const AttentionTrace& trace, const ShotSegmentation& seg, double prefill_ratio,
                           const PolicyParams& params = {}, std::uint32_t min_keep = 1);

/// Score(t) = sum over heads and layers of the current query's attention to decoding token t.
/// Every (layer, head) row must cover the same positions.
ScoreVector score_decoding_tokens(const StepAttention& step);

/// Indices of the k largest scores, ties toward the higher index, returned ascending.
std::vector<std::uint32_t> topk(std::span<const double> scores, std::size_t k);

/// Keeps topk(scores, budget_tokens(r_d, decoded_total, min_keep)) when the segment exceeds that budget.
/// `decoded_total` defaults to the number of scored tokens.
RetainedSet shotkv_decode_evict(const ScoreVector& scores, double decoding_ratio,
                                std::optional<std::size_t> decoded_total = std::nullopt, std::uint32_t min_keep = 1);

// ---------------------------------------------------------------------------
// Baselines

RetainedSet streaming_llm(std::size_t n, std::size_t sink_count, std::size_t budget);

RetainedSet h2o(const AttentionTrace& trace, std::size_t budget, std::size_t recent_count);

/// Same-length 1-D max pool with an odd kernel; the window is clipped at both edges.
std::vector<double> max_pool(std::span<const double> values, std::size_t kernel);

RetainedSet snapkv(const AttentionTrace& trace, std::size_t budget, std::size_t obs_window, std::size_t pool_kernel);

/// Per-layer budgets decaying linearly from layer 0 to layer L-1 (ratio `min_ratio`), summing to
/// token_budget * layers, each capped at n. Largest-remainder rounding.
std::vector<std::size_t> pyramid_layer_budgets(std::size_t layers, std::size_t token_budget, std::size_t n, double min_ratio,
                                               std::size_t min_keep = 1);

RetainedSet pyramidkv(const AttentionTrace& trace, std::size_t token_budget, double min_ratio, std::size_t obs_window,
                      std::size_t pool_kernel, std::size_t min_keep = 1);

RetainedSet chunkkv(const AttentionTrace& trace, std::size_t budget, std::size_t chunk_size, std::size_t obs_window);

// ---------------------------------------------------------------------------
// Dispatch

/// Prefill retention for any policy. Window-style parameters are shrunk to fit small budgets
/// (sinks <= budget; recent/obs windows <= budget / 2).
RetainedSet run_policy(const PolicyConfig& policy, const AttentionTrace& trace, const ShotSegmentation& seg);

/// Whether a policy evicts during decoding, and how. Holds the per-sequence score accumulators.
class DecodingEvictor {
public:
    DecodingEvictor(const PolicyConfig& policy, std::uint32_t layers, std::uint32_t heads);

    bool active() const;

    /// Called after each decode step with the full step attention. Returns the decoding-segment
    /// retention when the segment exceeds its budget.
    std::optional<RetainedSet> after_step(const StepAttention& step, std::uint32_t prompt_len, std::size_t decoded_total);

private:
    PolicyConfig m_policy;
    std::uint32_t m_layers;
    std::uint32_t m_heads;
    std::map<std::uint32_t, double> m_global_scores;
    std::vector<std::map<std::uint32_t, double>> m_head_scores;
};

}  // namespace kvlab::policies
