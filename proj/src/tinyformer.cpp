// Copyright (C) 2026 kvlab authors
// SPDX-License-Identifier: Apache-2.0

#include "kvlab/tinyformer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <numbers>
#include <random>
#include <sstream>

#include "kvlab/error.hpp"

namespace kvlab::tinyformer {

namespace {

constexpr double kWeightStd = 0.02;
constexpr double kNormEps = 1e-6;
constexpr std::uint32_t kFfnExpansion = 4;

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Each tensor draws from its own stream so adding layers never perturbs earlier tensors.
// Box-Muller over mt19937_64, whose output sequence is fixed by the standard.
std::vector<float> gaussian_tensor(std::uint64_t seed, std::uint64_t tensor_id, std::size_t count) {
    std::mt19937_64 engine(splitmix64(seed ^ splitmix64(tensor_id)));
    constexpr double kScale = 1.0 / 9007199254740992.0;  // 2^-53
    std::vector<float> out(count);
    for (std::size_t i = 0; i < count; i += 2) {
        const double u1 = (static_cast<double>(engine() >> 11) + 1.0) * kScale;  // (0, 1]
        const double u2 = static_cast<double>(engine() >> 11) * kScale;          // [0, 1)
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        out[i] = static_cast<float>(kWeightStd * r * std::cos(theta));
        if (i + 1 < count) out[i + 1] = static_cast<float>(kWeightStd * r * std::sin(theta));
    }
    return out;
}

void fnv1a(std::uint64_t& h, const std::vector<float>& data) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(data.data());
    for (std::size_t i = 0; i < data.size() * sizeof(float); ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
    }
}

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;

std::vector<float> matvec(const std::vector<float>& w, std::size_t rows, std::size_t cols, std::span<const float> x) {
    std::vector<float> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const float* wr = w.data() + r * cols;
        double acc = 0.0;
        for (std::size_t c = 0; c < cols; ++c) acc += static_cast<double>(wr[c]) * x[c];
        out[r] = static_cast<float>(acc);
    }
    return out;
}

std::vector<float> rms_norm(std::span<const float> x) {
    double ss = 0.0;
    for (float v : x) ss += static_cast<double>(v) * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + kNormEps);
    std::vector<float> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>(x[i] * inv);
    return out;
}

float gelu(float x) {
    const double v = x;
    return static_cast<float>(0.5 * v * (1.0 + std::tanh(0.7978845608028654 * (v + 0.044715 * v * v * v))));
}

}  // namespace

void ModelConfig::validate() const {
    if (layers < 1) throw ConfigError("model needs at least one layer");
    if (heads < 1) throw ConfigError("model needs at least one head");
    if (head_dim < 1) throw ConfigError("head_dim must be positive");
    if (vocab_size < 2) throw ConfigError("vocab_size must be at least 2");
    if (max_seq < 1) throw ConfigError("max_seq must be positive");
    if (!(rope_base > 0.0)) throw ConfigError("rope_base must be positive");
}

std::string ModelConfig::describe() const {
    std::ostringstream os;
    os << "tinyformer L=" << layers << " H=" << heads << " d=" << head_dim << " vocab=" << vocab_size
       << " max_seq=" << max_seq << " seed=" << seed << " rope_base=" << rope_base;
    return os.str();
}

nlohmann::json to_json(const ModelConfig& c) {
    return {{"layers", c.layers},         {"heads", c.heads}, {"head_dim", c.head_dim}, {"vocab_size", c.vocab_size},
            {"max_seq", c.max_seq},       {"seed", c.seed},   {"rope_base", c.rope_base}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.layers = j.value("layers", c.layers);
        c.heads = j.value("heads", c.heads);
        c.head_dim = j.value("head_dim", c.head_dim);
        c.vocab_size = j.value("vocab_size", c.vocab_size);
        c.max_seq = j.value("max_seq", c.max_seq);
        c.seed = j.value("seed", c.seed);
        c.rope_base = j.value("rope_base", c.rope_base);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed model config: ") + e.what());
    }
    c.validate();
    return c;
}

TokenSequence tokenize(std::string_view text) {
    TokenSequence out;
    out.ids.reserve(text.size());
    for (char c : text) out.ids.push_back(static_cast<unsigned char>(c));
    out.text_origin = std::string(text);
    return out;
}

std::string detokenize(const TokenSequence& tokens) {
    std::string out;
    out.reserve(tokens.ids.size());
    for (TokenId id : tokens.ids) out.push_back(static_cast<char>(static_cast<unsigned char>(id & 0xff)));
    return out;
}

Model::Model(ModelConfig config) : m_config(config) {
    m_config.validate();
    const std::size_t D = m_config.model_dim();
    const std::size_t F = D * kFfnExpansion;
    const std::uint64_t seed = m_config.seed;
    m_embedding = gaussian_tensor(seed, 0, std::size_t{m_config.vocab_size} * D);
    m_unembedding = gaussian_tensor(seed, 1, std::size_t{m_config.vocab_size} * D);
    m_layers.resize(m_config.layers);
    for (std::uint32_t l = 0; l < m_config.layers; ++l) {
        const std::uint64_t base = 2 + 6 * std::uint64_t{l};
        Layer& layer = m_layers[l];
        layer.wq = gaussian_tensor(seed, base + 0, D * D);
        layer.wk = gaussian_tensor(seed, base + 1, D * D);
        layer.wv = gaussian_tensor(seed, base + 2, D * D);
        layer.wo = gaussian_tensor(seed, base + 3, D * D);
        layer.w_up = gaussian_tensor(seed, base + 4, F * D);
        layer.w_down = gaussian_tensor(seed, base + 5, D * F);
    }
    const std::uint32_t d = m_config.head_dim;
    for (std::uint32_t i = 0; i + 1 < d; i += 2) {
        m_inv_freq.push_back(std::pow(m_config.rope_base, -static_cast<double>(i) / d));
    }
}

std::uint64_t Model::key_projection_checksum(std::uint32_t layer) const {
    if (layer >= m_layers.size()) throw ConfigError("layer index out of range");
    std::uint64_t h = kFnvOffset;
    fnv1a(h, m_layers[layer].wk);
    return h;
}

std::uint64_t Model::weights_checksum() const {
    std::uint64_t h = kFnvOffset;
    fnv1a(h, m_embedding);
    for (const Layer& l : m_layers) {
        for (const auto* t : {&l.wq, &l.wk, &l.wv, &l.wo, &l.w_up, &l.w_down}) fnv1a(h, *t);
    }
    fnv1a(h, m_unembedding);
    return h;
}

void Model::rotate(std::span<float> vec, std::uint32_t position) const {
    for (std::size_t i = 0; i < m_inv_freq.size(); ++i) {
        const double angle = position * m_inv_freq[i];
        const double c = std::cos(angle), s = std::sin(angle);
        const double a = vec[2 * i], b = vec[2 * i + 1];
        vec[2 * i] = static_cast<float>(a * c - b * s);
        vec[2 * i + 1] = static_cast<float>(a * s + b * c);
    }
}

std::vector<float> Model::forward(KVCacheSet& cache, TokenId token, StepAttention* attention) const {
    const std::uint32_t position = cache.next_position();
    if (position >= m_config.max_seq) {
        throw LengthError("position " + std::to_string(position) + " exceeds max_seq " + std::to_string(m_config.max_seq));
    }
    if (token >= m_config.vocab_size) {
        throw ValidationError("token id " + std::to_string(token) + " outside vocabulary of " +
                              std::to_string(m_config.vocab_size));
    }
    const std::uint32_t H = m_config.heads, d = m_config.head_dim;
    const std::size_t D = m_config.model_dim();
    const std::size_t F = D * kFfnExpansion;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    if (attention) {
        attention->layers = m_config.layers;
        attention->heads = H;
        attention->rows.assign(std::size_t{m_config.layers} * H, {});
        attention->positions.assign(std::size_t{m_config.layers} * H, {});
    }

    std::vector<float> x(m_embedding.begin() + static_cast<std::ptrdiff_t>(token * D),
                         m_embedding.begin() + static_cast<std::ptrdiff_t>((token + 1) * D));
    for (std::uint32_t l = 0; l < m_config.layers; ++l) {
        const Layer& layer = m_layers[l];
        const auto normed = rms_norm(x);
        auto q = matvec(layer.wq, D, D, normed);
        auto k = matvec(layer.wk, D, D, normed);
        const auto v = matvec(layer.wv, D, D, normed);

        std::vector<float> mixed(D, 0.0f);
        for (std::uint32_t h = 0; h < H; ++h) {
            std::span<float> qh(q.data() + h * d, d);
            std::span<float> kh(k.data() + h * d, d);
            rotate(qh, position);
            rotate(kh, position);
            cache.append(l, h, kh, std::span<const float>(v.data() + h * d, d));

            const HeadCache& hc = cache.head(l, h);
            const std::size_t n = hc.size();
            std::vector<double> logits(n);
            double max_logit = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < n; ++i) {
                const float* key = hc.keys.data() + i * d;
                double dot = 0.0;
                for (std::uint32_t c = 0; c < d; ++c) dot += static_cast<double>(qh[c]) * key[c];
                logits[i] = dot * scale;
                max_logit = std::max(max_logit, logits[i]);
            }
            double denom = 0.0;
            for (double& z : logits) {
                z = std::exp(z - max_logit);
                denom += z;
            }
            std::vector<double> out(d, 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                const double a = logits[i] / denom;
                logits[i] = a;
                const float* value = hc.values.data() + i * d;
                for (std::uint32_t c = 0; c < d; ++c) out[c] += a * value[c];
            }
            for (std::uint32_t c = 0; c < d; ++c) mixed[h * d + c] = static_cast<float>(out[c]);
            if (attention) {
                const std::size_t u = attention->unit(l, h);
                attention->rows[u].assign(logits.begin(), logits.end());
                attention->positions[u] = hc.positions;
            }
        }
        const auto projected = matvec(layer.wo, D, D, mixed);
        for (std::size_t i = 0; i < D; ++i) x[i] += projected[i];

        const auto normed2 = rms_norm(x);
        auto up = matvec(layer.w_up, F, D, normed2);
        for (float& u : up) u = gelu(u);
        const auto down = matvec(layer.w_down, D, F, up);
        for (std::size_t i = 0; i < D; ++i) x[i] += down[i];
    }
    cache.advance();
    return matvec(m_unembedding, m_config.vocab_size, D, rms_norm(x));
}

PrefillResult Model::prefill(const TokenSequence& tokens, TraceMode mode) const {
    const std::size_t n = tokens.size();
    if (n == 0) throw LengthError("prefill needs at least one token");
    if (n > m_config.max_seq) {
        throw LengthError("prompt of " + std::to_string(n) + " tokens exceeds max_seq " + std::to_string(m_config.max_seq));
    }
    const auto T = static_cast<std::uint32_t>(n);
    const std::uint32_t Q = mode == TraceMode::LastRow ? 1 : T;
    PrefillResult result{KVCacheSet(m_config.layers, m_config.heads, m_config.head_dim, T),
                         AttentionTrace(m_config.layers, m_config.heads, Q, T),
                         {}};
    StepAttention step;
    for (std::uint32_t p = 0; p < T; ++p) {
        const bool record = p >= T - Q;
        result.logits = forward(result.cache, tokens.ids[p], record ? &step : nullptr);
        if (!record) continue;
        const std::uint32_t q = p - (T - Q);
        for (std::uint32_t l = 0; l < m_config.layers; ++l) {
            for (std::uint32_t h = 0; h < m_config.heads; ++h) {
                const auto& row = step.rows[step.unit(l, h)];
                std::copy(row.begin(), row.end(), result.trace.row(l, h, q).begin());
            }
        }
    }
    auto& meta = result.trace.meta();
    meta.tokens = tokens.ids;
    meta.model = m_config.describe();
    meta.sink_count = 4;
    meta.params = {{"mode", to_string(mode)}, {"model", to_json(m_config)}};
    return result;
}

StepResult Model::decode_step(KVCacheSet& cache, TokenId last_token) const {
    if (cache.layers() != m_config.layers || cache.heads() != m_config.heads || cache.head_dim() != m_config.head_dim) {
        throw ConfigError("cache shape does not match the model");
    }
    StepResult result;
    result.logits = forward(cache, last_token, &result.attention);
    return result;
}

TokenId argmax(std::span<const float> logits) {
    return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

namespace {

CacheSnapshot snapshot(const KVCacheSet& cache, bool with_positions) {
    CacheSnapshot s;
    for (std::uint32_t l = 0; l < cache.layers(); ++l) {
        for (std::uint32_t h = 0; h < cache.heads(); ++h) {
            s.total = std::max(s.total, cache.head(l, h).size());
            s.prefill = std::max(s.prefill, cache.prefill_count(l, h));
            s.decoding = std::max(s.decoding, cache.decoding_count(l, h));
            if (with_positions) {
                s.prefill_positions.push_back(cache.segment_positions(l, h, Segment::Prefill));
                s.decoding_positions.push_back(cache.segment_positions(l, h, Segment::Decoding));
            }
        }
    }
    return s;
}

}  // namespace

GenerationResult generate(const Model& model, const TokenSequence& prompt, std::size_t max_new,
                          const policies::PolicyConfig& policy, const policies::ShotSegmentation& seg,
                          const GenerateOptions& options) {
    policy.validate();
    seg.validate(prompt.size());
    if (options.forced_tokens && max_new > 0 && options.forced_tokens->size() + 1 < max_new) {
        throw ConfigError("teacher forcing needs at least max_new - 1 tokens");
    }
    using Clock = std::chrono::steady_clock;

    GenerationResult result;
    result.prompt_len = prompt.size();
    PrefillResult pre = model.prefill(prompt, TraceMode::Full);

    auto t0 = Clock::now();
    result.prefill_retained = policies::run_policy(policy, pre.trace, seg);
    KVCacheSet cache = apply_retention(pre.cache, result.prefill_retained);
    policies::DecodingEvictor evictor(policy, model.config().layers, model.config().heads);
    result.selection_seconds += std::chrono::duration<double>(Clock::now() - t0).count();

    std::vector<float> logits = std::move(pre.logits);
    for (std::size_t step = 0; step < max_new; ++step) {
        if (step > 0) {
            const TokenId fed = options.forced_tokens ? (*options.forced_tokens)[step - 1] : result.generated_ids.back();
            StepResult out = model.decode_step(cache, fed);
            logits = std::move(out.logits);
            t0 = Clock::now();
            if (auto keep = evictor.after_step(out.attention, cache.prompt_len(), cache.decoded_total())) {
                cache = apply_retention(cache, *keep);
            }
            result.selection_seconds += std::chrono::duration<double>(Clock::now() - t0).count();
        }
        result.generated_ids.push_back(argmax(logits));
        result.per_step_logits.push_back(logits);
        CacheSnapshot snap = snapshot(cache, options.record_snapshots);
        result.cache_sizes_per_step.push_back(snap.total);
        if (options.record_snapshots) result.snapshots.push_back(std::move(snap));
    }
    result.trace = std::move(pre.trace);
    result.final_cache = std::move(cache);
    return result;
}

}  // namespace kvlab::tinyformer
