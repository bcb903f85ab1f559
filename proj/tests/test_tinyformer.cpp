// Copyright (C) 2026 kvlab authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <set>

#include "doctest.h"
#include "kvlab/error.hpp"
#include "kvlab/tinyformer.hpp"
#include "testing.hpp"

using namespace kvlab;
using namespace kvlab::tinyformer;

namespace {

ModelConfig small(std::uint64_t seed = 3) {
    ModelConfig c;
    c.layers = 2;
    c.heads = 2;
    c.head_dim = 8;
    c.max_seq = 128;
    c.seed = seed;
    return c;
}

const std::string kPrompt = "#\n1+2=3\n12+3=15\n2+2=4\n21+4=25\n4+4=";

policies::PolicyConfig policy(policies::PolicyKind kind, double ratio) {
    policies::PolicyConfig p;
    p.kind = kind;
    p.budget.ratio = ratio;
    return p;
}

double max_abs_diff(const std::vector<std::vector<float>>& a, const std::vector<std::vector<float>>& b) {
    double m = 0.0;
    for (std::size_t s = 0; s < a.size(); ++s) {
        for (std::size_t i = 0; i < a[s].size(); ++i) m = std::max(m, std::abs(double(a[s][i]) - b[s][i]));
    }
    return m;
}

}  // namespace

TEST_CASE("model initialisation") {
    CHECK(Model(small(7)).weights_checksum() == Model(small(7)).weights_checksum());
    CHECK(Model(small(7)).weights_checksum() != Model(small(8)).weights_checksum());
    auto bad = small();
    bad.layers = 0;
    CHECK_THROWS_AS(init_model(bad), ConfigError);
    bad = small();
    bad.head_dim = 0;
    CHECK_THROWS_AS(init_model(bad), ConfigError);

    ModelConfig golden;
    golden.layers = 4;
    golden.heads = 4;
    golden.head_dim = 64;
    golden.vocab_size = 256;
    golden.seed = 1;
    CHECK(Model(golden).key_projection_checksum(0) == 15065829544268144373ull);
    CHECK_THROWS_AS(Model(golden).key_projection_checksum(4), ConfigError);
}

TEST_CASE("model config json") {
    const auto c = model_config_from_json(nlohmann::json::parse(R"({"layers": 3, "heads": 2, "head_dim": 4, "seed": 5})"));
    CHECK(c.layers == 3);
    CHECK(c.vocab_size == 256);
    CHECK(model_config_from_json(to_json(c)).seed == 5);
    CHECK_THROWS_AS(model_config_from_json(nlohmann::json::parse(R"({"layers": 0})")), ConfigError);
}

TEST_CASE("tokenize") {
    CHECK(tokenize("AB").ids == std::vector<TokenId>{65, 66});
    CHECK(tokenize("").ids.empty());
    CHECK(tokenize("\xff").ids == std::vector<TokenId>{255});
    CHECK(detokenize(tokenize(kPrompt)) == kPrompt);
}

TEST_CASE("prefill") {
    const Model m(small());
    const auto tokens = tokenize(kPrompt);
    const auto pre = m.prefill(tokens);
    const auto& t = pre.trace;
    CHECK(t.keys() == tokens.size());
    CHECK(t.queries() == tokens.size());
    for (std::uint32_t l = 0; l < t.layers(); ++l) {
        for (std::uint32_t h = 0; h < t.heads(); ++h) {
            CHECK(pre.cache.head(l, h).size() == tokens.size());
            for (std::uint32_t q = 0; q < t.queries(); ++q) {
                double sum = 0.0;
                for (std::uint32_t k = 0; k < t.keys(); ++k) {
                    if (k > q) {
                        CHECK(t.at(l, h, q, k) == 0.0f);
                    } else {
                        sum += t.at(l, h, q, k);
                    }
                }
                CHECK(std::abs(sum - 1.0) <= 1e-5);
            }
        }
    }
    CHECK(pre.logits.size() == 256);
    CHECK(t.meta().tokens.size() == tokens.size());

    const auto last = m.prefill(tokens, TraceMode::LastRow);
    CHECK(last.trace.queries() == 1);
    CHECK(last.logits == pre.logits);
    for (std::uint32_t k = 0; k < t.keys(); ++k) CHECK(last.trace.at(1, 1, 0, k) == t.at(1, 1, t.queries() - 1, k));

    const auto one = m.prefill(tokenize("x"));
    for (float w : one.trace.weights()) CHECK(w == 1.0f);

    CHECK_THROWS_AS(m.prefill(tokenize("")), LengthError);
    CHECK_THROWS_AS(m.prefill(tokenize(std::string(129, 'a'))), LengthError);
    CHECK_THROWS_AS(m.prefill(TokenSequence{{300}, {}}), ValidationError);
}

TEST_CASE("decode_step") {
    const Model m(small());
    auto pre = m.prefill(tokenize("hello"));
    KVCacheSet a = pre.cache, b = pre.cache;
    const auto ra = m.decode_step(a, 'x');
    const auto rb = m.decode_step(b, 'x');
    CHECK(ra.logits == rb.logits);
    CHECK(a == b);
    for (std::uint32_t l = 0; l < 2; ++l) {
        for (std::uint32_t h = 0; h < 2; ++h) CHECK(a.head(l, h).size() == 6);
    }
    CHECK(a.decoded_total() == 1);
    CHECK(ra.attention.rows.size() == 4);
    CHECK(ra.attention.positions[0] == kvtest::range(0, 6));

    SUBCASE("incremental decoding equals recomputing from scratch") {
        const auto whole = m.prefill(tokenize("hellox"));
        CHECK(ra.logits == whole.logits);
        for (std::uint32_t l = 0; l < 2; ++l) {
            for (std::uint32_t h = 0; h < 2; ++h) {
                auto row = whole.trace.row(l, h, 5);
                CHECK(std::vector<float>(row.begin(), row.end()) == ra.attention.rows[ra.attention.unit(l, h)]);
            }
        }
    }
    SUBCASE("surviving keys are not re-rotated after eviction") {
        KVCacheSet c = pre.cache;
        const auto kept = apply_retention(c, RetainedSet::global(Segment::Prefill, {0, 3, 4}));
        for (std::uint32_t l = 0; l < 2; ++l) {
            for (std::uint32_t h = 0; h < 2; ++h) {
                const auto& src = c.head(l, h);
                const auto& dst = kept.head(l, h);
                CHECK(std::equal(dst.keys.begin() + 8, dst.keys.end(), src.keys.begin() + 24));
            }
        }
        KVCacheSet evicted = kept;
        const auto r = m.decode_step(evicted, 'x');
        CHECK(r.attention.positions[0] == std::vector<std::uint32_t>{0, 3, 4, 5});
        CHECK(evicted.next_position() == 6);
    }
    SUBCASE("position overflow") {
        auto cfg = small();
        cfg.max_seq = 5;
        const Model tiny(cfg);
        auto full = tiny.prefill(tokenize("hello"));
        CHECK_THROWS_AS(tiny.decode_step(full.cache, 'x'), LengthError);
    }
    CHECK(argmax(std::vector<float>{1, 3, 3, 2}) == 1);
}

TEST_CASE("generate") {
    const Model m(small());
    const auto tokens = tokenize(kPrompt);
    const auto seg = policies::ShotSegmentation::from_marker(kPrompt, "\n");
    const auto full = generate(m, tokens, 12, policy(policies::PolicyKind::FullKV, 1.0), seg);

    SUBCASE("FullKV equals an uncompressed greedy loop") {
        auto pre = m.prefill(tokens);
        std::vector<TokenId> ids{argmax(pre.logits)};
        std::vector<std::vector<float>> logits{pre.logits};
        for (int s = 1; s < 12; ++s) {
            auto out = m.decode_step(pre.cache, ids.back());
            ids.push_back(argmax(out.logits));
            logits.push_back(out.logits);
        }
        CHECK(full.generated_ids == ids);
        CHECK(full.per_step_logits == logits);
        CHECK(full.cache_sizes_per_step.back() == tokens.size() + 11);
    }
    SUBCASE("ratio 1.0 reproduces FullKV for every policy") {
        for (auto kind : policies::kAllPolicies) {
            auto p = policy(kind, 1.0);
            const auto r = generate(m, tokens, 12, p, seg);
            CHECK(r.generated_ids == full.generated_ids);
            CHECK(max_abs_diff(r.per_step_logits, full.per_step_logits) <= 1e-6);
        }
        auto shot = policy(policies::PolicyKind::ShotKV, 1.0);
        shot.budget.prefill_ratio = 1.0;
        shot.budget.decoding_ratio = 1.0;
        CHECK(generate(m, tokens, 12, shot, seg).per_step_logits == full.per_step_logits);
    }
    SUBCASE("determinism") {
        auto p = policy(policies::PolicyKind::ShotKV, 0.5);
        const auto a = generate(m, tokens, 10, p, seg);
        const auto b = generate(m, tokens, 10, p, seg);
        CHECK(a.generated_ids == b.generated_ids);
        CHECK(a.per_step_logits == b.per_step_logits);
        CHECK(a.final_cache == b.final_cache);
        CHECK(a.prefill_retained == b.prefill_retained);
    }
    SUBCASE("teacher forcing on the free-run tokens changes nothing") {
        GenerateOptions opts;
        opts.forced_tokens = full.generated_ids;
        const auto forced = generate(m, tokens, 12, policy(policies::PolicyKind::FullKV, 1.0), seg, opts);
        CHECK(forced.per_step_logits == full.per_step_logits);
        opts.forced_tokens = std::vector<TokenId>{1};
        CHECK_THROWS_AS(generate(m, tokens, 12, policy(policies::PolicyKind::FullKV, 1.0), seg, opts), ConfigError);
    }
    SUBCASE("segmentation out of range") {
        policies::ShotSegmentation bad{{{0, 500}}, {}};
        CHECK_THROWS_AS(generate(m, tokens, 4, policy(policies::PolicyKind::ShotKV, 0.5), bad), SegmentationError);
    }
    SUBCASE("ShotKV r_d = 0.5 over 40 tokens stays within floor(0.5 * steps) + 1") {
        auto p = policy(policies::PolicyKind::ShotKV, 1.0);
        p.budget.prefill_ratio = 0.6;
        p.budget.decoding_ratio = 0.5;
        GenerateOptions opts;
        opts.record_snapshots = true;
        const auto r = generate(m, tokens, 40, p, seg, opts);
        REQUIRE(r.snapshots.size() == 40);
        std::set<std::uint32_t> evicted;
        for (std::size_t s = 0; s < r.snapshots.size(); ++s) {
            const auto& snap = r.snapshots[s];
            CHECK(snap.decoding <= s / 2 + 1);
            CHECK(snap.prefill_positions[0] == r.prefill_retained.units[0]);
            for (auto p : snap.decoding_positions[0]) CHECK(evicted.count(p) == 0);
            if (s + 1 < r.snapshots.size()) {
                const auto& next = r.snapshots[s + 1].decoding_positions[0];
                for (auto p : snap.decoding_positions[0]) {
                    if (!std::binary_search(next.begin(), next.end(), p)) evicted.insert(p);
                }
            }
        }
    }
}
