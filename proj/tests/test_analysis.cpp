// Copyright (C) 2026 kvlab authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>
#include <numeric>

#include "doctest.h"
#include "kvlab/analysis.hpp"
#include "kvlab/error.hpp"
#include "kvlab/tinyformer.hpp"
#include "testing.hpp"

using namespace kvlab;
using namespace kvlab::analysis;
namespace fs = std::filesystem;

namespace {

void check_curve_shape(const CoverageCurve& c) {
    REQUIRE(!c.points.empty());
    CHECK(c.points.front().p == 0.0);
    CHECK(c.points.front().mass == 0.0);
    CHECK(c.points.back().p == 1.0);
    CHECK(c.points.back().mass == 1.0);
    for (std::size_t i = 1; i < c.points.size(); ++i) {
        CHECK(c.points[i].p > c.points[i - 1].p);
        CHECK(c.points[i].mass >= c.points[i - 1].mass);
    }
}

AttentionTrace seeded_model_trace() {
    tinyformer::ModelConfig cfg;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.head_dim = 8;
    cfg.seed = 42;
    return tinyformer::Model(cfg).prefill(tinyformer::tokenize("#\n1+2=3\n2+5=7\n3+3=")).trace;
}

}  // namespace

TEST_CASE("aggregate_attention") {
    AttentionTrace single(1, 1, 1, 3);
    single.at(0, 0, 0, 0) = 0.5f;
    single.at(0, 0, 0, 1) = 0.25f;
    single.at(0, 0, 0, 2) = 0.25f;
    CHECK(aggregate_attention(single) == std::vector<double>{0.5, 0.25, 0.25});

    kvtest::Rng rng(4);
    for (int i = 0; i < 20; ++i) {
        const auto n = static_cast<std::uint32_t>(kvtest::uniform(rng, 1, 30));
        const auto q = static_cast<std::uint32_t>(kvtest::uniform(rng, 1, n));
        const auto t = kvtest::random_trace(rng, 3, 2, q, n);
        const auto s = aggregate_attention(t);
        for (std::uint32_t k = 0; k < n; ++k) {
            double want = 0.0;
            for (std::uint32_t l = 0; l < 3; ++l) {
                for (std::uint32_t h = 0; h < 2; ++h) {
                    for (std::uint32_t r = 0; r < q; ++r) want += t.at(l, h, r, k);
                }
            }
            CHECK(std::abs(s[k] - want) <= 1e-9);
        }
        CHECK(std::abs(std::accumulate(s.begin(), s.end(), 0.0) - 3.0 * 2 * q) <= 1e-4);
    }
}

TEST_CASE("cumulative_distribution") {
    SUBCASE("uniform scores give the diagonal") {
        const std::vector<double> u(50, 2.0);
        const auto c = cumulative_distribution(u, 0);
        check_curve_shape(c);
        for (const auto& pt : c.points) CHECK(std::abs(pt.mass - pt.p) <= 1e-9);
        CHECK(coverage_at(c, 0.2) == doctest::Approx(0.2).epsilon(1e-12));
    }
    SUBCASE("one token holding all mass") {
        std::vector<double> s(10, 0.0);
        s[6] = 4.0;
        const auto c = cumulative_distribution(s, 0);
        check_curve_shape(c);
        CHECK(coverage_at(c, 0.1) == 1.0);
        CHECK(coverage_at(c, 0.05) == doctest::Approx(0.5));
    }
    SUBCASE("random scores match sort-and-sum at p = 0.2") {
        kvtest::Rng rng(9);
        for (int i = 0; i < 50; ++i) {
            const std::size_t n = 5 * kvtest::uniform(rng, 1, 40);  // 0.2 n is a whole token count
            std::vector<double> s(n);
            for (auto& x : s) x = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
            const auto c = cumulative_distribution(s, 0);
            check_curve_shape(c);
            std::vector<double> sorted = s;
            std::sort(sorted.rbegin(), sorted.rend());
            const double top = std::accumulate(sorted.begin(), sorted.begin() + static_cast<long>(n / 5), 0.0);
            const double total = std::accumulate(sorted.begin(), sorted.end(), 0.0);
            CHECK(std::abs(coverage_at(c, 0.2) - top / total) <= 1e-9);
        }
    }
    SUBCASE("excluding heavy sinks lowers coverage") {
        std::vector<double> s{10, 9, 8, 7, 1, 2, 3, 1, 1, 2, 1, 3};
        const double with = coverage_at(cumulative_distribution(s, 0), 0.25);
        const double without = coverage_at(cumulative_distribution(s, 4), 0.25);
        CHECK(without < with);
        CHECK(cumulative_distribution(s, 4).exclude_first_n == 4);
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(cumulative_distribution(std::vector<double>{1, 0, 0}, 1), DegenerateCurveError);
        CHECK_THROWS_AS(cumulative_distribution(std::vector<double>{1, 2}, 2), ValidationError);
        const auto c = cumulative_distribution(std::vector<double>{1, 2}, 0);
        CHECK_THROWS_AS(coverage_at(c, 1.5), ValidationError);
        CHECK(coverage_at(c, 0.0) == 0.0);
        CHECK(coverage_at(c, 1.0) == 1.0);
    }
}

TEST_CASE("curve csv") {
    const auto c = cumulative_distribution(std::vector<double>{1, 1, 2}, 0);
    const auto csv = curve_csv(c);
    CHECK(csv.rfind("p,mass\n0,0\n", 0) == 0);
    CHECK(csv.find("\n1,1\n") != std::string::npos);
    CHECK(csv.find("0.333333333,0.5\n") != std::string::npos);
    std::size_t lines = 0;
    for (char ch : csv) lines += ch == '\n';
    CHECK(lines == c.points.size() + 1);
}

TEST_CASE("heatmap") {
    SUBCASE("1x1 attention is one white pixel") {
        AttentionTrace t(1, 1, 1, 1);
        t.at(0, 0, 0, 0) = 1.0f;
        const auto pgm = heatmap_pgm(t, std::nullopt, std::nullopt);
        const std::string header = "P5\n1 1\n255\n";
        REQUIRE(pgm.size() == header.size() + 1);
        CHECK(std::string(pgm.begin(), pgm.begin() + static_cast<long>(header.size())) == header);
        CHECK(pgm.back() == 255);
    }
    SUBCASE("above the diagonal is black") {
        const auto t = seeded_model_trace();
        const auto pgm = heatmap_pgm(t, 1, 0);
        const std::size_t body = pgm.size() - std::size_t{t.keys()} * t.queries();
        for (std::uint32_t q = 0; q < t.queries(); ++q) {
            for (std::uint32_t k = q + 1; k < t.keys(); ++k) CHECK(pgm[body + q * t.keys() + k] == 0);
        }
        CHECK_THROWS_AS(heatmap_pgm(t, 2, 0), ValidationError);
    }
    SUBCASE("seeded trace matches the golden file") {
        const auto t = seeded_model_trace();
        const auto dir = kvtest::scratch_dir("heatmap");
        heatmap_export(t, std::nullopt, std::nullopt, dir / "a.pgm");
        heatmap_export(t, std::nullopt, std::nullopt, dir / "b.pgm");
        const std::string got = kvtest::read_file(dir / "a.pgm");
        CHECK(got == kvtest::read_file(dir / "b.pgm"));
        const fs::path golden = fs::path(KVLAB_GOLDEN_DIR) / "heatmap_seed42.pgm";
        if (std::getenv("KVLAB_UPDATE_GOLDEN")) fs::copy_file(dir / "a.pgm", golden, fs::copy_options::overwrite_existing);
        REQUIRE(fs::exists(golden));
        CHECK(got == kvtest::read_file(golden));
    }
}
