// Copyright (C) 2026 kvlab authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "kvlab/kvcache.hpp"
#include "kvlab/policies.hpp"
#include "kvlab/trace.hpp"

namespace kvlab::tinyformer {

using TokenId = std::uint32_t;

struct ModelConfig {
    std::uint32_t layers = 4;
    std::uint32_t heads = 4;
    std::uint32_t head_dim = 16;
    std::uint32_t vocab_size = 256;
    std::uint32_t max_seq = 512;
    std::uint64_t seed = 0;
    double rope_base = 10000.0;

    std::uint32_t model_dim() const { return layers == 0 ? 0 : heads * head_dim; }
    void validate() const;
    std::string describe() const;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct TokenSequence {
    std::vector<TokenId> ids;
    std::optional<std::string> text_origin;

    std::size_t size() const { return ids.size(); }
};

TokenSequence tokenize(std::string_view text);
std::string detokenize(const TokenSequence& tokens);

struct PrefillResult {
    KVCacheSet cache;
    AttentionTrace trace;
    std::vector<float> logits;
};

struct StepResult {
    std::vector<float> logits;
    StepAttention attention;
};

/// Small pre-norm causal transformer with seeded Gaussian weights (std 0.02), rotary
/// positions, a 4x GELU feed-forward and no biases. Immutable after construction.
class Model {
public:
    explicit Model(ModelConfig config);

    const ModelConfig& config() const { return m_config; }

    PrefillResult prefill(const TokenSequence& tokens, TraceMode mode = TraceMode::Full) const;

    /// Feeds `last_token` at cache.next_position(), appends its key/value to every head and
    /// returns next-token logits plus the attention of this query over the visible cache.
    StepResult decode_step(KVCacheSet& cache, TokenId last_token) const;

    /// FNV-1a over the raw bytes of the layer's key projection.
    std::uint64_t key_projection_checksum(std::uint32_t layer) const;
    /// FNV-1a over every weight tensor in construction order.
    std::uint64_t weights_checksum() const;

private:
    struct Layer {
        std::vector<float> wq, wk, wv, wo;  // [dim x dim], row-major out x in
        std::vector<float> w_up;            // [4 dim x dim]
        std::vector<float> w_down;          // [dim x 4 dim]
    };

    std::vector<float> forward(KVCacheSet& cache, TokenId token, StepAttention* attention) const;
    void rotate(std::span<float> vec, std::uint32_t position) const;

    ModelConfig m_config;
    std::vector<float> m_embedding;    // [vocab x dim]
    std::vector<float> m_unembedding;  // [vocab x dim]
    std::vector<Layer> m_layers;
    std::vector<double> m_inv_freq;
};

inline Model init_model(const ModelConfig& config) { return Model(config); }

TokenId argmax(std::span<const float> logits);

struct CacheSnapshot {
    std::size_t total = 0;     // largest entry count over (layer, head) units
    std::size_t prefill = 0;   // largest prefill count over units
    std::size_t decoding = 0;  // largest decoding count over units
    std::vector<std::vector<std::uint32_t>> prefill_positions;   // per unit
    std::vector<std::vector<std::uint32_t>> decoding_positions;  // per unit
};

struct GenerateOptions {
    // Teacher forcing: feed these tokens instead of the model's own argmax choices.
    std::optional<std::vector<TokenId>> forced_tokens;
    bool record_snapshots = false;
};

struct GenerationResult {
    std::size_t prompt_len = 0;
    std::vector<TokenId> generated_ids;
    std::vector<std::vector<float>> per_step_logits;
    std::vector<std::size_t> cache_sizes_per_step;
    std::vector<CacheSnapshot> snapshots;
    RetainedSet prefill_retained;
    AttentionTrace trace;
    KVCacheSet final_cache;
    double selection_seconds = 0.0;
};

/// Greedy generation with prefill compression once and decoding compression after every step.
GenerationResult generate(const Model& model, const TokenSequence& prompt, std::size_t max_new,
                          const policies::PolicyConfig& policy, const policies::ShotSegmentation& seg,
                          const GenerateOptions& options = {});

}  // namespace kvlab::tinyformer
