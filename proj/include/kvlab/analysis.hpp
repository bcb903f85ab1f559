// Copyright (C) 2026 kvlab authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kvlab/trace.hpp"

namespace kvlab::analysis {

struct CurvePoint {
    double p = 0.0;     // fraction of tokens, highest-scored first
    double mass = 0.0;  // fraction of attention mass they hold
};

struct CoverageCurve {
    std::vector<CurvePoint> points;
    std::size_t exclude_first_n = 0;
    std::string source;
};

inline constexpr std::size_t kCurveSamples = 1000;

/// Per-key total over layers, heads and query rows.
std::vector<double> aggregate_attention(const AttentionTrace& trace);

/// Drops the first `exclude_first_n` scores, sorts the rest descending and samples the
/// cumulative mass share at 1000 evenly spaced fractions plus every token breakpoint.
CoverageCurve cumulative_distribution(std::span<const double> scores, std::size_t exclude_first_n, std::string source = {});

/// Linear interpolation on the curve.
double coverage_at(const CoverageCurve& curve, double p);

/// CSV with header `p,mass`, 9 significant digits.
std::string curve_csv(const CoverageCurve& curve);
void write_curve_csv(const CoverageCurve& curve, const std::filesystem::path& path);

/// Binary PGM (P5): row = query, column = key, pixel = round(255 * a / row_max).
/// An empty selector averages over that axis.
std::vector<std::uint8_t> heatmap_pgm(const AttentionTrace& trace, std::optional<std::uint32_t> layer,
                                      std::optional<std::uint32_t> head);
void heatmap_export(const AttentionTrace& trace, std::optional<std::uint32_t> layer, std::optional<std::uint32_t> head,
                    const std::filesystem::path& path);

}  // namespace kvlab::analysis
