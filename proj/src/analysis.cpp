// Copyright (C) 2026 kvlab authors
// SPDX-License-Identifier: Apache-2.0

#include "kvlab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>

#include "kvlab/error.hpp"

namespace kvlab::analysis {

std::vector<double> aggregate_attention(const AttentionTrace& trace) {
    std::vector<double> scores(trace.keys(), 0.0);
    for (std::uint32_t l = 0; l < trace.layers(); ++l) {
        for (std::uint32_t h = 0; h < trace.heads(); ++h) {
            for (std::uint32_t q = 0; q < trace.queries(); ++q) {
                auto row = trace.row(l, h, q);
                for (std::size_t t = 0; t < row.size(); ++t) scores[t] += row[t];
            }
        }
    }
    return scores;
}

CoverageCurve cumulative_distribution(std::span<const double> scores, std::size_t exclude_first_n, std::string source) {
    if (scores.size() <= exclude_first_n) {
        throw ValidationError("cannot exclude " + std::to_string(exclude_first_n) + " of " + std::to_string(scores.size()) +
                              " tokens");
    }
    std::vector<double> rest(scores.begin() + static_cast<std::ptrdiff_t>(exclude_first_n), scores.end());
    std::sort(rest.begin(), rest.end(), std::greater<>());
    const double total = std::accumulate(rest.begin(), rest.end(), 0.0);
    if (!(total > 0.0)) {
        throw DegenerateCurveError("remaining attention mass is zero");
    }

    const std::size_t m = rest.size();
    std::vector<CurvePoint> breaks(m + 1);
    double running = 0.0;
    for (std::size_t i = 1; i <= m; ++i) {
        running += rest[i - 1];
        breaks[i] = {static_cast<double>(i) / static_cast<double>(m), std::min(1.0, running / total)};
    }
    breaks.back() = {1.0, 1.0};

    auto interpolate = [&](double p) {
        auto it = std::lower_bound(breaks.begin(), breaks.end(), p, [](const CurvePoint& a, double v) { return a.p < v; });
        if (it == breaks.begin()) return it->mass;
        if (it == breaks.end()) return 1.0;
        if (it->p == p) return it->mass;
        const CurvePoint& hi = *it;
        const CurvePoint& lo = *(it - 1);
        return lo.mass + (hi.mass - lo.mass) * (p - lo.p) / (hi.p - lo.p);
    };

    CoverageCurve curve;
    curve.exclude_first_n = exclude_first_n;
    curve.source = std::move(source);
    curve.points = breaks;
    for (std::size_t j = 0; j <= kCurveSamples; ++j) {
        const double p = static_cast<double>(j) / static_cast<double>(kCurveSamples);
        curve.points.push_back({p, interpolate(p)});
    }
    std::stable_sort(curve.points.begin(), curve.points.end(), [](const CurvePoint& a, const CurvePoint& b) { return a.p < b.p; });
    curve.points.erase(std::unique(curve.points.begin(), curve.points.end(),
                                   [](const CurvePoint& a, const CurvePoint& b) { return a.p == b.p; }),
                       curve.points.end());
    return curve;
}

double coverage_at(const CoverageCurve& curve, double p) {
    if (!(p >= 0.0 && p <= 1.0)) {
        throw ValidationError("coverage fraction must lie in [0, 1]");
    }
    const auto& pts = curve.points;
    if (pts.empty()) throw ValidationError("empty coverage curve");
    auto it = std::lower_bound(pts.begin(), pts.end(), p, [](const CurvePoint& a, double v) { return a.p < v; });
    if (it == pts.end()) return pts.back().mass;
    if (it->p == p || it == pts.begin()) return it->mass;
    const CurvePoint& lo = *(it - 1);
    return lo.mass + (it->mass - lo.mass) * (p - lo.p) / (it->p - lo.p);
}

std::string curve_csv(const CoverageCurve& curve) {
    std::string out = "p,mass\n";
    char buf[64];
    for (const auto& pt : curve.points) {
        std::snprintf(buf, sizeof(buf), "%.9g,%.9g\n", pt.p, pt.mass);
        out += buf;
    }
    return out;
}

void write_curve_csv(const CoverageCurve& curve, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << curve_csv(curve);
    if (!out) throw IoError("write failed for " + path.string());
}

std::vector<std::uint8_t> heatmap_pgm(const AttentionTrace& trace, std::optional<std::uint32_t> layer,
                                      std::optional<std::uint32_t> head) {
    if (layer && *layer >= trace.layers()) throw ValidationError("layer selector out of range");
    if (head && *head >= trace.heads()) throw ValidationError("head selector out of range");
    const std::uint32_t l0 = layer.value_or(0), l1 = layer ? *layer + 1 : trace.layers();
    const std::uint32_t h0 = head.value_or(0), h1 = head ? *head + 1 : trace.heads();
    const double count = static_cast<double>(l1 - l0) * (h1 - h0);

    const std::string header = "P5\n" + std::to_string(trace.keys()) + " " + std::to_string(trace.queries()) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.reserve(header.size() + std::size_t{trace.keys()} * trace.queries());
    std::vector<double> row(trace.keys());
    for (std::uint32_t q = 0; q < trace.queries(); ++q) {
        std::fill(row.begin(), row.end(), 0.0);
        for (std::uint32_t l = l0; l < l1; ++l) {
            for (std::uint32_t h = h0; h < h1; ++h) {
                auto src = trace.row(l, h, q);
                for (std::size_t t = 0; t < row.size(); ++t) row[t] += src[t];
            }
        }
        for (double& v : row) v /= count;
        const double peak = *std::max_element(row.begin(), row.end());
        for (double v : row) {
            const long px = peak > 0.0 ? std::lround(255.0 * v / peak) : 0;
            out.push_back(static_cast<std::uint8_t>(std::clamp(px, 0L, 255L)));
        }
    }
    return out;
}

void heatmap_export(const AttentionTrace& trace, std::optional<std::uint32_t> layer, std::optional<std::uint32_t> head,
                    const std::filesystem::path& path) {
    const auto bytes = heatmap_pgm(trace, layer, head);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace kvlab::analysis
