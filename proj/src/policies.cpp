// Copyright (C) 2026 kvlab authors
// SPDX-License-Identifier: Apache-2.0

#include "kvlab/policies.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>

#include "kvlab/error.hpp"

namespace kvlab::policies {

namespace {

std::vector<std::uint32_t> iota_positions(std::size_t begin, std::size_t end) {
    std::vector<std::uint32_t> out(end > begin ? end - begin : 0);
    std::iota(out.begin(), out.end(), static_cast<std::uint32_t>(begin));
    return out;
}

RetainedSet per_head_set(Segment segment, std::uint32_t heads, std::vector<std::vector<std::uint32_t>> units) {
    RetainedSet out;
    out.scope = Scope::PerLayerPerHead;
    out.segment = segment;
    out.heads = heads;
    out.units = std::move(units);
    return out;
}

// Sum of the last `rows` query rows of one (layer, head) over keys [0, keys).
void accumulate_rows(const AttentionTrace& trace, std::uint32_t l, std::uint32_t h, std::uint32_t rows,
                     std::vector<double>& acc) {
    for (std::uint32_t q = trace.queries() - rows; q < trace.queries(); ++q) {
        auto row = trace.row(l, h, q);
        for (std::size_t t = 0; t < acc.size(); ++t) {
            acc[t] += row[t];
        }
    }
}

// Token scores summed over every layer, head and the last `rows` query rows.
std::vector<double> window_token_scores(const AttentionTrace& trace, std::uint32_t rows) {
    std::vector<double> scores(trace.keys(), 0.0);
    for (std::uint32_t l = 0; l < trace.layers(); ++l) {
        for (std::uint32_t h = 0; h < trace.heads(); ++h) {
            accumulate_rows(trace, l, h, rows, scores);
        }
    }
    return scores;
}

// SnapKV selection for the heads of one layer. With `fit`, the observation window shrinks to
// at most half the budget and below the prompt length.
std::vector<std::vector<std::uint32_t>> snap_layer(const AttentionTrace& trace, std::uint32_t layer, std::size_t budget,
                                                   std::size_t obs_window, std::size_t pool_kernel, bool fit) {
    const std::size_t n = trace.keys();
    std::vector<std::vector<std::uint32_t>> units(trace.heads());
    if (budget >= n) {
        for (auto& u : units) u = iota_positions(0, n);
        return units;
    }
    std::size_t w = obs_window;
    if (fit) {
        w = std::max<std::size_t>(1, std::min({obs_window, budget / 2, n - 1}));
    }
    if (w == 0) {
        throw ConfigError("obs_window must be positive");
    }
    if (n <= w) {
        throw TraceError("SnapKV needs a prompt longer than obs_window (" + std::to_string(n) + " <= " + std::to_string(w) + ")");
    }
    if (trace.queries() < w) {
        throw TraceError("SnapKV needs the last " + std::to_string(w) + " query rows; trace has " +
                         std::to_string(trace.queries()));
    }
    if (budget < w) {
        throw BudgetError("SnapKV budget " + std::to_string(budget) + " is below obs_window " + std::to_string(w));
    }
    const std::size_t prefix = n - w;
    for (std::uint32_t h = 0; h < trace.heads(); ++h) {
        std::vector<double> scores(prefix, 0.0);
        accumulate_rows(trace, layer, h, static_cast<std::uint32_t>(w), scores);
        const auto pooled = max_pool(scores, pool_kernel);
        auto keep = topk(pooled, budget - w);
        for (std::size_t t = prefix; t < n; ++t) keep.push_back(static_cast<std::uint32_t>(t));
        units[h] = std::move(keep);
    }
    return units;
}

RetainedSet snap_all(const AttentionTrace& trace, const std::vector<std::size_t>& layer_budgets, std::size_t obs_window,
                     std::size_t pool_kernel, bool fit) {
    if (pool_kernel == 0 || pool_kernel % 2 == 0) {
        throw ConfigError("pool_kernel must be odd, got " + std::to_string(pool_kernel));
    }
    std::vector<std::vector<std::uint32_t>> units;
    units.reserve(std::size_t{trace.layers()} * trace.heads());
    for (std::uint32_t l = 0; l < trace.layers(); ++l) {
        auto layer_units = snap_layer(trace, l, layer_budgets[l], obs_window, pool_kernel, fit);
        for (auto& u : layer_units) units.push_back(std::move(u));
    }
    return per_head_set(Segment::Prefill, trace.heads(), std::move(units));
}

std::string lower(std::string_view s) {
    std::string out(s);
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

}  // namespace

const char* to_string(PolicyKind kind) {
    switch (kind) {
    case PolicyKind::FullKV: return "FullKV";
    case PolicyKind::StreamingLLM: return "StreamingLLM";
    case PolicyKind::H2O: return "H2O";
    case PolicyKind::SnapKV: return "SnapKV";
    case PolicyKind::PyramidKV: return "PyramidKV";
    case PolicyKind::ChunkKV: return "ChunkKV";
    case PolicyKind::ShotKV: return "ShotKV";
    }
    return "?";
}

PolicyKind parse_policy_kind(std::string_view name) {
    const std::string key = lower(name);
    for (PolicyKind kind : kAllPolicies) {
        if (lower(to_string(kind)) == key) return kind;
    }
    throw ConfigError("unknown policy kind '" + std::string(name) + "'");
}

void PolicyConfig::validate() const {
    budget.validate();
    if (params.sink_count == 0) throw ConfigError("sink_count must be positive");
    if (params.obs_window == 0) throw ConfigError("obs_window must be positive");
    if (params.pool_kernel == 0 || params.pool_kernel % 2 == 0) {
        throw ConfigError("pool_kernel must be odd, got " + std::to_string(params.pool_kernel));
    }
    if (params.recent_count == 0) throw ConfigError("recent_count must be positive");
    if (params.chunk_size == 0) throw ConfigError("chunk_size must be positive");
    if (!(params.pyramid_min_ratio > 0.0 && params.pyramid_min_ratio <= 1.0)) {
        throw ConfigError("pyramid_min_ratio must lie in (0, 1]");
    }
    if (params.shot_query_rows == 0) throw ConfigError("shot_query_rows must be positive");
}

nlohmann::json to_json(const PolicyConfig& config) {
    nlohmann::json j{{"kind", to_string(config.kind)},
                     {"ratio", config.budget.ratio},
                     {"min_keep", config.budget.min_keep},
                     {"sink_count", config.params.sink_count},
                     {"obs_window", config.params.obs_window},
                     {"pool_kernel", config.params.pool_kernel},
                     {"recent_count", config.params.recent_count},
                     {"chunk_size", config.params.chunk_size},
                     {"pyramid_min_ratio", config.params.pyramid_min_ratio},
                     {"shot_query_rows", config.params.shot_query_rows},
                     {"shot_scan", config.params.shot_scan == ShotScan::StopAtFirstMisfit ? "stop" : "continue"},
                     {"accumulate_decoding", config.params.accumulate_decoding}};
    if (config.budget.prefill_ratio) j["r_p"] = *config.budget.prefill_ratio;
    if (config.budget.decoding_ratio) j["r_d"] = *config.budget.decoding_ratio;
    return j;
}

PolicyConfig policy_from_json(const nlohmann::json& j) {
    PolicyConfig c;
    try {
        if (j.is_string()) {
            c.kind = parse_policy_kind(j.get<std::string>());
            return c;
        }
        c.kind = parse_policy_kind(j.at("kind").get<std::string>());
        c.budget.ratio = j.value("ratio", 1.0);
        if (j.contains("r_p")) c.budget.prefill_ratio = j.at("r_p").get<double>();
        if (j.contains("r_d")) c.budget.decoding_ratio = j.at("r_d").get<double>();
        c.budget.min_keep = j.value("min_keep", c.budget.min_keep);
        c.params.sink_count = j.value("sink_count", c.params.sink_count);
        c.budget.sink_count = c.params.sink_count;
        c.params.obs_window = j.value("obs_window", c.params.obs_window);
        c.params.pool_kernel = j.value("pool_kernel", c.params.pool_kernel);
        c.params.recent_count = j.value("recent_count", c.params.recent_count);
        c.params.chunk_size = j.value("chunk_size", c.params.chunk_size);
        c.params.pyramid_min_ratio = j.value("pyramid_min_ratio", c.params.pyramid_min_ratio);
        c.params.shot_query_rows = j.value("shot_query_rows", c.params.shot_query_rows);
        c.params.accumulate_decoding = j.value("accumulate_decoding", c.params.accumulate_decoding);
        const std::string scan = j.value("shot_scan", std::string("stop"));
        if (scan == "stop") {
            c.params.shot_scan = ShotScan::StopAtFirstMisfit;
        } else if (scan == "continue") {
            c.params.shot_scan = ShotScan::ContinuePastMisfit;
        } else {
            throw ConfigError("shot_scan must be 'stop' or 'continue'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed policy config: ") + e.what());
    }
    return c;
}

// ---------------------------------------------------------------------------
// Segmentation

void ShotSegmentation::validate(std::size_t prompt_len) const {
    auto check_list = [&](const std::vector<Span>& spans, const char* what) {
        for (std::size_t i = 0; i < spans.size(); ++i) {
            const Span& s = spans[i];
            if (s.start >= s.end) {
                throw SegmentationError(std::string(what) + " " + std::to_string(i) + " is empty");
            }
            if (s.end > prompt_len) {
                throw SegmentationError(std::string(what) + " " + std::to_string(i) + " ends at " + std::to_string(s.end) +
                                        ", past the prompt length " + std::to_string(prompt_len));
            }
            if (i > 0 && s.start < spans[i - 1].end) {
                throw SegmentationError(std::string(what) + " ranges must be sorted and non-overlapping");
            }
        }
    };
    check_list(shots, "shot");
    check_list(mandatory, "mandatory range");
    for (const Span& m : mandatory) {
        for (const Span& s : shots) {
            if (m.start < s.end && s.start < m.end) {
                throw SegmentationError("mandatory range overlaps a shot");
            }
        }
    }
}

std::vector<std::uint32_t> ShotSegmentation::mandatory_positions(std::size_t prompt_len) const {
    std::vector<bool> in_shot(prompt_len, false);
    for (const Span& s : shots) {
        for (std::uint32_t t = s.start; t < s.end && t < prompt_len; ++t) in_shot[t] = true;
    }
    std::vector<std::uint32_t> out;
    for (std::size_t t = 0; t < prompt_len; ++t) {
        if (!in_shot[t]) out.push_back(static_cast<std::uint32_t>(t));
    }
    return out;
}

ShotSegmentation ShotSegmentation::from_meta(const TraceMeta& meta) { return {meta.shots, meta.mandatory}; }

ShotSegmentation ShotSegmentation::from_marker(std::string_view text, std::string_view marker) {
    ShotSegmentation seg;
    const auto n = static_cast<std::uint32_t>(text.size());
    if (n == 0) return seg;
    std::vector<Span> pieces;
    if (!marker.empty()) {
        std::size_t begin = 0;
        for (std::size_t hit = text.find(marker); hit != std::string_view::npos; hit = text.find(marker, begin)) {
            const std::size_t end = hit + marker.size();
            pieces.push_back({static_cast<std::uint32_t>(begin), static_cast<std::uint32_t>(end)});
            begin = end;
        }
        if (begin < n) pieces.push_back({static_cast<std::uint32_t>(begin), n});
    }
    if (pieces.size() < 3) {
        seg.shots.push_back({0, n});
        return seg;
    }
    seg.mandatory.push_back(pieces.front());
    for (std::size_t i = 1; i + 1 < pieces.size(); ++i) seg.shots.push_back(pieces[i]);
    seg.mandatory.push_back(pieces.back());
    return seg;
}

// ---------------------------------------------------------------------------
// ShotKV

std::vector<double> score_prefill_shots(const AttentionTrace& trace, const ShotSegmentation& seg, std::uint32_t query_rows) {
    if (query_rows == 0 || trace.queries() < query_rows) {
        throw TraceError("trace lacks the final prompt query row(s): need " + std::to_string(query_rows) + ", have " +
                         std::to_string(trace.queries()));
    }
    seg.validate(trace.keys());
    const auto token_scores = window_token_scores(trace, query_rows);
    std::vector<double> out;
    out.reserve(seg.shots.size());
    for (const Span& s : seg.shots) {
        double sum = 0.0;
        for (std::uint32_t t = s.start; t < s.end; ++t) sum += token_scores[t];
        out.push_back(sum / static_cast<double>(s.length()));
    }
    return out;
}

std::vector<std::size_t> select_shots(std::span<const double> shot_scores, std::span<const std::size_t> shot_lengths,
                                      std::size_t prefill_budget, std::size_t mandatory_cost, ShotScan scan) {
    if (shot_scores.size() != shot_lengths.size()) {
        throw SelectionError("shot score and length lists differ in size");
    }
    if (prefill_budget < mandatory_cost) {
        throw BudgetError("prefill budget " + std::to_string(prefill_budget) + " cannot cover " +
                          std::to_string(mandatory_cost) + " mandatory tokens");
    }
    std::vector<std::size_t> order(shot_scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return shot_scores[a] > shot_scores[b]; });

    std::size_t remaining = prefill_budget - mandatory_cost;
    std::vector<std::size_t> chosen;
    for (std::size_t id : order) {
        if (shot_lengths[id] <= remaining) {
            remaining -= shot_lengths[id];
            chosen.push_back(id);
        } else if (scan == ShotScan::StopAtFirstMisfit) {
            break;
        }
    }
    std::sort(chosen.begin(), chosen.end());
    return chosen;
}

RetainedSet shotkv_prefill(const AttentionTrace& trace, const ShotSegmentation& seg, double prefill_ratio,
                           const PolicyParams& params, std::uint32_t min_keep) {
    const std::size_t n = trace.keys();
    seg.validate(n);
    const std::size_t budget = budget_tokens(prefill_ratio, n, min_keep);
    auto keep = seg.mandatory_positions(n);
    const auto scores = score_prefill_shots(trace, seg, params.shot_query_rows);
    std::vector<std::size_t> lengths;
    lengths.reserve(seg.shots.size());
    for (const Span& s : seg.shots) lengths.push_back(s.length());

    for (std::size_t id : select_shots(scores, lengths, budget, keep.size(), params.shot_scan)) {
        for (std::uint32_t t = seg.shots[id].start; t < seg.shots[id].end; ++t) keep.push_back(t);
    }
    std::sort(keep.begin(), keep.end());
    return RetainedSet::global(Segment::Prefill, std::move(keep));
}

ScoreVector score_decoding_tokens(const StepAttention& step) {
    if (step.rows.size() != std::size_t{step.layers} * step.heads || step.positions.size() != step.rows.size()) {
        throw TraceError("step attention does not hold one row per layer and head");
    }
    ScoreVector out;
    out.segment = Segment::Decoding;
    out.provenance = "current decode query; sum over " + std::to_string(step.layers) + " layers x " +
                     std::to_string(step.heads) + " heads";
    if (step.rows.empty()) return out;
    out.positions = step.positions.front();
    out.scores.assign(out.positions.size(), 0.0);
    for (std::size_t u = 0; u < step.rows.size(); ++u) {
        if (step.rows[u].size() != out.positions.size() || step.positions[u] != out.positions) {
            throw TraceError("step attention rows cover different key sets; decoding scores need a shared cache");
        }
        for (std::size_t i = 0; i < out.scores.size(); ++i) out.scores[i] += step.rows[u][i];
    }
    return out;
}

std::vector<std::uint32_t> topk(std::span<const double> scores, std::size_t k) {
    if (k > scores.size()) {
        throw SelectionError("top-k of " + std::to_string(k) + " from only " + std::to_string(scores.size()) + " scores");
    }
    std::vector<std::uint32_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0u);
    auto better = [&](std::uint32_t a, std::uint32_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a > b;
    };
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

RetainedSet shotkv_decode_evict(const ScoreVector& scores, double decoding_ratio, std::optional<std::size_t> decoded_total,
                                std::uint32_t min_keep) {
    if (scores.scores.empty()) {
        throw SelectionError("decoding segment is empty");
    }
    if (scores.positions.size() != scores.scores.size()) {
        throw SelectionError("score vector lacks positions");
    }
    const std::size_t budget = budget_tokens(decoding_ratio, decoded_total.value_or(scores.scores.size()), min_keep);
    if (scores.scores.size() <= budget) {
        return RetainedSet::global(Segment::Decoding, scores.positions);
    }
    std::vector<std::uint32_t> keep;
    for (std::uint32_t i : topk(scores.scores, budget)) keep.push_back(scores.positions[i]);
    return RetainedSet::global(Segment::Decoding, std::move(keep));
}

// ---------------------------------------------------------------------------
// Baselines

RetainedSet streaming_llm(std::size_t n, std::size_t sink_count, std::size_t budget) {
    if (budget < sink_count) {
        throw BudgetError("StreamingLLM budget " + std::to_string(budget) + " is below sink_count " + std::to_string(sink_count));
    }
    if (budget >= n) {
        return RetainedSet::global(Segment::Prefill, iota_positions(0, n));
    }
    auto keep = iota_positions(0, sink_count);
    auto recent = iota_positions(n - (budget - sink_count), n);
    keep.insert(keep.end(), recent.begin(), recent.end());
    return RetainedSet::global(Segment::Prefill, std::move(keep));
}

RetainedSet h2o(const AttentionTrace& trace, std::size_t budget, std::size_t recent_count) {
    if (budget < recent_count) {
        throw BudgetError("H2O budget " + std::to_string(budget) + " is below recent_count " + std::to_string(recent_count));
    }
    const std::size_t n = trace.keys();
    std::vector<std::vector<std::uint32_t>> units;
    if (budget >= n) {
        units.assign(std::size_t{trace.layers()} * trace.heads(), iota_positions(0, n));
        return per_head_set(Segment::Prefill, trace.heads(), std::move(units));
    }
    if (trace.queries() != trace.keys()) {
        throw TraceError("H2O needs a full trace (all prompt query rows)");
    }
    const std::size_t candidates = n - recent_count;
    for (std::uint32_t l = 0; l < trace.layers(); ++l) {
        for (std::uint32_t h = 0; h < trace.heads(); ++h) {
            std::vector<double> column(n, 0.0);
            accumulate_rows(trace, l, h, trace.queries(), column);
            column.resize(candidates);
            auto keep = topk(column, budget - recent_count);
            for (std::size_t t = candidates; t < n; ++t) keep.push_back(static_cast<std::uint32_t>(t));
            units.push_back(std::move(keep));
        }
    }
    return per_head_set(Segment::Prefill, trace.heads(), std::move(units));
}

std::vector<double> max_pool(std::span<const double> values, std::size_t kernel) {
    if (kernel == 0 || kernel % 2 == 0) {
        throw ConfigError("pool_kernel must be odd, got " + std::to_string(kernel));
    }
    const std::size_t half = kernel / 2;
    const std::size_t n = values.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t lo = i >= half ? i - half : 0;
        const std::size_t hi = std::min(n - 1, i + half);
        out[i] = *std::max_element(values.begin() + static_cast<std::ptrdiff_t>(lo),
                                   values.begin() + static_cast<std::ptrdiff_t>(hi) + 1);
    }
    return out;
}

RetainedSet snapkv(const AttentionTrace& trace, std::size_t budget, std::size_t obs_window, std::size_t pool_kernel) {
    return snap_all(trace, std::vector<std::size_t>(trace.layers(), budget), obs_window, pool_kernel, false);
}

std::vector<std::size_t> pyramid_layer_budgets(std::size_t layers, std::size_t token_budget, std::size_t n, double min_ratio,
                                               std::size_t min_keep) {
    if (layers == 0) throw ConfigError("PyramidKV needs at least one layer");
    if (!(min_ratio > 0.0 && min_ratio <= 1.0)) throw ConfigError("pyramid_min_ratio must lie in (0, 1]");
    token_budget = std::min(token_budget, n);

    std::vector<double> weight(layers, 1.0);
    if (layers > 1) {
        for (std::size_t l = 0; l < layers; ++l) {
            weight[l] = 1.0 - (1.0 - min_ratio) * static_cast<double>(l) / static_cast<double>(layers - 1);
        }
    }

    // Water-fill: layers whose share would exceed n are pinned at n and the rest is re-spread.
    std::vector<std::size_t> out(layers, 0);
    std::vector<bool> pinned(layers, false);
    std::size_t remaining = token_budget * layers;
    std::vector<double> raw(layers, 0.0);
    for (bool changed = true; changed;) {
        changed = false;
        double total_weight = 0.0;
        for (std::size_t l = 0; l < layers; ++l) {
            if (!pinned[l]) total_weight += weight[l];
        }
        for (std::size_t l = 0; l < layers; ++l) {
            if (pinned[l]) continue;
            raw[l] = static_cast<double>(remaining) * weight[l] / total_weight;
            if (raw[l] > static_cast<double>(n)) {
                pinned[l] = true;
                out[l] = n;
                remaining -= n;
                changed = true;
                break;
            }
        }
    }

    std::size_t assigned = 0;
    std::vector<std::pair<double, std::size_t>> remainders;
    for (std::size_t l = 0; l < layers; ++l) {
        if (pinned[l]) continue;
        out[l] = static_cast<std::size_t>(std::floor(raw[l]));
        assigned += out[l];
        remainders.emplace_back(raw[l] - std::floor(raw[l]), l);
    }
    std::stable_sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    std::size_t leftover = remaining - assigned;
    for (std::size_t i = 0; leftover > 0 && !remainders.empty(); i = (i + 1) % remainders.size()) {
        const std::size_t l = remainders[i].second;
        if (out[l] < n) {
            ++out[l];
            --leftover;
        }
    }

    for (std::size_t l = 0; l < layers; ++l) {
        if (out[l] < std::min(min_keep, n)) {
            throw BudgetError("PyramidKV layer " + std::to_string(l) + " budget " + std::to_string(out[l]) +
                              " falls below min_keep " + std::to_string(min_keep));
        }
    }
    return out;
}

RetainedSet pyramidkv(const AttentionTrace& trace, std::size_t token_budget, double min_ratio, std::size_t obs_window,
                      std::size_t pool_kernel, std::size_t min_keep) {
    const auto budgets = pyramid_layer_budgets(trace.layers(), token_budget, trace.keys(), min_ratio, min_keep);
    return snap_all(trace, budgets, obs_window, pool_kernel, false);
}

RetainedSet chunkkv(const AttentionTrace& trace, std::size_t budget, std::size_t chunk_size, std::size_t obs_window) {
    if (chunk_size == 0) throw ConfigError("chunk_size must be positive");
    if (obs_window == 0) throw ConfigError("obs_window must be positive");
    const std::size_t n = trace.keys();
    if (budget >= n) {
        return RetainedSet::global(Segment::Prefill, iota_positions(0, n));
    }
    const auto rows = static_cast<std::uint32_t>(std::min<std::size_t>(obs_window, trace.queries()));
    const auto token_scores = window_token_scores(trace, rows);

    const std::size_t n_chunks = (n + chunk_size - 1) / chunk_size;
    std::vector<double> chunk_scores(n_chunks, 0.0);
    for (std::size_t t = 0; t < n; ++t) chunk_scores[t / chunk_size] += token_scores[t];

    std::vector<std::size_t> order(n_chunks);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (chunk_scores[a] != chunk_scores[b]) return chunk_scores[a] > chunk_scores[b];
        return a > b;
    });

    std::vector<std::uint32_t> keep;
    std::size_t remaining = budget;
    for (std::size_t c : order) {
        if (remaining == 0) break;
        const std::size_t begin = c * chunk_size;
        const std::size_t end = std::min(n, begin + chunk_size);
        if (end - begin <= remaining) {
            for (std::size_t t = begin; t < end; ++t) keep.push_back(static_cast<std::uint32_t>(t));
            remaining -= end - begin;
        } else {
            // Marginal chunk: keep its highest-scored tokens to fill the budget exactly.
            std::span<const double> local(token_scores.data() + begin, end - begin);
            for (std::uint32_t i : topk(local, remaining)) keep.push_back(static_cast<std::uint32_t>(begin + i));
            remaining = 0;
        }
    }
    std::sort(keep.begin(), keep.end());
    return RetainedSet::global(Segment::Prefill, std::move(keep));
}

// ---------------------------------------------------------------------------
// Dispatch

RetainedSet run_policy(const PolicyConfig& policy, const AttentionTrace& trace, const ShotSegmentation& seg) {
    policy.validate();
    const std::size_t n = trace.keys();
    const auto& p = policy.params;
    const std::size_t min_keep = policy.budget.min_keep;
    const std::size_t m = budget_tokens(policy.budget.ratio, n, min_keep);
    switch (policy.kind) {
    case PolicyKind::FullKV:
        return RetainedSet::global(Segment::Prefill, iota_positions(0, n));
    case PolicyKind::StreamingLLM:
        return streaming_llm(n, std::min<std::size_t>(p.sink_count, m), m);
    case PolicyKind::H2O:
        return h2o(trace, m, std::min<std::size_t>(p.recent_count, m / 2));
    case PolicyKind::SnapKV:
        return snap_all(trace, std::vector<std::size_t>(trace.layers(), m), p.obs_window, p.pool_kernel, true);
    case PolicyKind::PyramidKV:
        return snap_all(trace, pyramid_layer_budgets(trace.layers(), m, n, p.pyramid_min_ratio, min_keep), p.obs_window,
                        p.pool_kernel, true);
    case PolicyKind::ChunkKV:
        return chunkkv(trace, m, p.chunk_size, p.obs_window);
    case PolicyKind::ShotKV:
        return shotkv_prefill(trace, seg, policy.budget.prefill(), p, policy.budget.min_keep);
    }
    throw ConfigError("unknown policy kind");
}

DecodingEvictor::DecodingEvictor(const PolicyConfig& policy, std::uint32_t layers, std::uint32_t heads)
    : m_policy(policy), m_layers(layers), m_heads(heads), m_head_scores(std::size_t{layers} * heads) {
    m_policy.validate();
}

bool DecodingEvictor::active() const {
    return m_policy.kind == PolicyKind::ShotKV || m_policy.kind == PolicyKind::StreamingLLM || m_policy.kind == PolicyKind::H2O;
}

std::optional<RetainedSet> DecodingEvictor::after_step(const StepAttention& step, std::uint32_t prompt_len,
                                                       std::size_t decoded_total) {
    if (!active()) return std::nullopt;
    const StepAttention dec = step.restricted_from(prompt_len);
    const std::uint32_t min_keep = m_policy.budget.min_keep;
    const std::size_t budget = budget_tokens(m_policy.budget.decoding(), decoded_total, min_keep);

    switch (m_policy.kind) {
    case PolicyKind::ShotKV: {
        ScoreVector scores = score_decoding_tokens(dec);
        if (scores.scores.empty()) return std::nullopt;
        if (m_policy.params.accumulate_decoding) {
            for (std::size_t i = 0; i < scores.scores.size(); ++i) {
                scores.scores[i] = (m_global_scores[scores.positions[i]] += scores.scores[i]);
            }
        }
        if (scores.scores.size() <= budget) return std::nullopt;
        RetainedSet keep = shotkv_decode_evict(scores, m_policy.budget.decoding(), decoded_total, min_keep);
        std::erase_if(m_global_scores, [&](const auto& kv) {
            return !std::binary_search(keep.units[0].begin(), keep.units[0].end(), kv.first);
        });
        return keep;
    }
    case PolicyKind::StreamingLLM: {
        const auto& positions = dec.positions.front();
        if (positions.size() <= budget) return std::nullopt;
        return RetainedSet::global(Segment::Decoding,
                                   std::vector<std::uint32_t>(positions.end() - static_cast<std::ptrdiff_t>(budget), positions.end()));
    }
    case PolicyKind::H2O: {
        bool over = false;
        for (std::size_t u = 0; u < dec.rows.size(); ++u) {
            for (std::size_t i = 0; i < dec.positions[u].size(); ++i) {
                m_head_scores[u][dec.positions[u][i]] += dec.rows[u][i];
            }
            over = over || dec.positions[u].size() > budget;
        }
        if (!over) return std::nullopt;
        const std::size_t recent = std::min<std::size_t>(m_policy.params.recent_count, budget / 2);
        std::vector<std::vector<std::uint32_t>> units(dec.rows.size());
        for (std::size_t u = 0; u < dec.rows.size(); ++u) {
            const auto& positions = dec.positions[u];
            if (positions.size() <= budget) {
                units[u] = positions;
                continue;
            }
            const std::size_t candidates = positions.size() - recent;
            std::vector<double> acc(candidates);
            for (std::size_t i = 0; i < candidates; ++i) acc[i] = m_head_scores[u][positions[i]];
            for (std::uint32_t i : topk(acc, budget - recent)) units[u].push_back(positions[i]);
            units[u].insert(units[u].end(), positions.end() - static_cast<std::ptrdiff_t>(recent), positions.end());
            std::erase_if(m_head_scores[u], [&](const auto& kv) {
                return !std::binary_search(units[u].begin(), units[u].end(), kv.first);
            });
        }
        return per_head_set(Segment::Decoding, m_heads, std::move(units));
    }
    default:
        return std::nullopt;
    }
}

}  // namespace kvlab::policies
