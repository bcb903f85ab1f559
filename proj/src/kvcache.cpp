// Copyright (C) 2026 kvlab authors
// SPDX-License-Identifier: Apache-2.0

#include "kvlab/kvcache.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "kvlab/error.hpp"

namespace kvlab {

const char* to_string(Segment segment) { return segment == Segment::Prefill ? "prefill" : "decoding"; }

const char* to_string(Scope scope) {
    switch (scope) {
    case Scope::Global: return "global";
    case Scope::PerLayer: return "per-layer";
    case Scope::PerLayerPerHead: return "per-layer-per-head";
    }
    return "?";
}

namespace {

bool valid_ratio(double r) { return r > 0.0 && r <= 1.0; }

}  // namespace

void Budget::validate() const {
    if (!valid_ratio(ratio)) throw BudgetError("ratio must lie in (0, 1], got " + std::to_string(ratio));
    if (!valid_ratio(prefill())) throw BudgetError("r_p must lie in (0, 1], got " + std::to_string(prefill()));
    if (!valid_ratio(decoding())) throw BudgetError("r_d must lie in (0, 1], got " + std::to_string(decoding()));
}

std::size_t budget_tokens(double ratio, std::size_t n, std::size_t min_keep) {
    if (!valid_ratio(ratio)) {
        throw BudgetError("ratio must lie in (0, 1], got " + std::to_string(ratio));
    }
    if (ratio == 1.0) {
        return n;
    }
    // The epsilon absorbs representation error such as 0.29 * 100 = 28.999999999999996.
    const double scaled = ratio * static_cast<double>(n);
    auto m = static_cast<std::size_t>(std::floor(scaled + 1e-9 * std::max(1.0, scaled)));
    m = std::max(m, min_keep);
    return std::min(m, n);
}

RetainedSet RetainedSet::global(Segment segment, std::vector<std::uint32_t> positions) {
    RetainedSet out;
    out.scope = Scope::Global;
    out.segment = segment;
    out.units.push_back(std::move(positions));
    return out;
}

const std::vector<std::uint32_t>& RetainedSet::for_unit(std::uint32_t layer, std::uint32_t head) const {
    std::size_t index = 0;
    switch (scope) {
    case Scope::Global: index = 0; break;
    case Scope::PerLayer: index = layer; break;
    case Scope::PerLayerPerHead: index = static_cast<std::size_t>(layer) * heads + head; break;
    }
    if (index >= units.size()) {
        throw RetentionError(std::string("retained set (") + to_string(scope) + ") has no unit for layer " +
                             std::to_string(layer) + ", head " + std::to_string(head));
    }
    return units[index];
}

std::size_t RetainedSet::max_size() const {
    std::size_t m = 0;
    for (const auto& u : units) m = std::max(m, u.size());
    return m;
}

nlohmann::json to_json(const RetainedSet& retained) {
    return {{"scope", to_string(retained.scope)},
            {"segment", to_string(retained.segment)},
            {"heads", retained.heads},
            {"units", retained.units}};
}

KVCacheSet::KVCacheSet(std::uint32_t layers, std::uint32_t heads, std::uint32_t head_dim, std::uint32_t prompt_len)
    : m_layers(layers), m_heads(heads), m_head_dim(head_dim), m_prompt_len(prompt_len),
      m_heads_data(static_cast<std::size_t>(layers) * heads) {}

void KVCacheSet::append(std::uint32_t l, std::uint32_t h, std::span<const float> key, std::span<const float> value) {
    if (key.size() != m_head_dim || value.size() != m_head_dim) {
        throw RetentionError("key/value width does not match head_dim " + std::to_string(m_head_dim));
    }
    HeadCache& hc = head(l, h);
    hc.keys.insert(hc.keys.end(), key.begin(), key.end());
    hc.values.insert(hc.values.end(), value.begin(), value.end());
    hc.positions.push_back(m_next_position);
}

void KVCacheSet::advance() { ++m_next_position; }

std::size_t KVCacheSet::prefill_count(std::uint32_t l, std::uint32_t h) const {
    const auto& pos = head(l, h).positions;
    return static_cast<std::size_t>(std::lower_bound(pos.begin(), pos.end(), m_prompt_len) - pos.begin());
}

std::size_t KVCacheSet::decoding_count(std::uint32_t l, std::uint32_t h) const {
    return head(l, h).size() - prefill_count(l, h);
}

std::vector<std::uint32_t> KVCacheSet::segment_positions(std::uint32_t l, std::uint32_t h, Segment segment) const {
    const auto& pos = head(l, h).positions;
    const auto split = pos.begin() + static_cast<std::ptrdiff_t>(prefill_count(l, h));
    return segment == Segment::Prefill ? std::vector<std::uint32_t>(pos.begin(), split)
                                       : std::vector<std::uint32_t>(split, pos.end());
}

bool KVCacheSet::empty() const {
    return std::all_of(m_heads_data.begin(), m_heads_data.end(), [](const HeadCache& h) { return h.size() == 0; });
}

KVCacheSet apply_retention(const KVCacheSet& cache, const RetainedSet& retained) {
    const std::size_t expected_units = retained.scope == Scope::Global     ? 1
                                       : retained.scope == Scope::PerLayer ? cache.layers()
                                                                           : std::size_t{cache.layers()} * cache.heads();
    if (retained.units.size() != expected_units ||
        (retained.scope == Scope::PerLayerPerHead && retained.heads != cache.heads())) {
        throw RetentionError(std::string("retained set shape (") + to_string(retained.scope) + ", " +
                             std::to_string(retained.units.size()) + " units) does not match the cache");
    }

    KVCacheSet out = cache;
    const std::uint32_t d = cache.head_dim();
    for (std::uint32_t l = 0; l < cache.layers(); ++l) {
        for (std::uint32_t h = 0; h < cache.heads(); ++h) {
            const auto& keep = retained.for_unit(l, h);
            const HeadCache& src = cache.head(l, h);
            HeadCache& dst = out.head(l, h);
            dst = HeadCache{};

            for (std::size_t i = 1; i < keep.size(); ++i) {
                if (keep[i] <= keep[i - 1]) {
                    throw RetentionError("retained positions must be sorted and unique");
                }
            }
            const bool prefill = retained.segment == Segment::Prefill;
            std::size_t next = 0;
            for (std::size_t i = 0; i < src.size(); ++i) {
                const std::uint32_t pos = src.positions[i];
                const bool in_segment = prefill ? pos < cache.prompt_len() : pos >= cache.prompt_len();
                bool keep_it = !in_segment;
                if (in_segment && next < keep.size() && keep[next] == pos) {
                    keep_it = true;
                    ++next;
                } else if (in_segment && next < keep.size() && keep[next] < pos) {
                    throw RetentionError("retained position " + std::to_string(keep[next]) + " is not in the " +
                                         to_string(retained.segment) + " segment");
                }
                if (keep_it) {
                    dst.keys.insert(dst.keys.end(), src.keys.begin() + static_cast<std::ptrdiff_t>(i * d),
                                    src.keys.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
                    dst.values.insert(dst.values.end(), src.values.begin() + static_cast<std::ptrdiff_t>(i * d),
                                      src.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
                    dst.positions.push_back(pos);
                }
            }
            if (next != keep.size()) {
                throw RetentionError("retained position " + std::to_string(keep[next]) + " is not in the " +
                                     to_string(retained.segment) + " segment");
            }
        }
    }
    return out;
}

CacheReport cache_report(const KVCacheSet& cache) {
    CacheReport r;
    const std::size_t units = std::size_t{cache.layers()} * cache.heads();
    if (units == 0) {
        return r;
    }
    std::size_t prefill = 0, decoding = 0;
    for (std::uint32_t l = 0; l < cache.layers(); ++l) {
        for (std::uint32_t h = 0; h < cache.heads(); ++h) {
            prefill += cache.prefill_count(l, h);
            decoding += cache.decoding_count(l, h);
        }
    }
    const std::size_t per_entry = std::size_t{cache.head_dim()} * 2 * 4;
    r.prefill_tokens = prefill / units;
    r.decoding_tokens = decoding / units;
    r.prefill_bytes = prefill * per_entry;
    r.decoding_bytes = decoding * per_entry;
    r.bytes_estimate = r.prefill_bytes + r.decoding_bytes;
    return r;
}

}  // namespace kvlab
