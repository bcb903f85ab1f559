// Copyright (C) 2026 kvlab authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "kvlab/trace.hpp"

namespace kvlab::traceio {

// On-disk layout (all integers u32 little-endian):
//   "KVTR" | version=1 | L | H | Q | T | float32 LE weights [l][h][q][t]
// Metadata lives in a sidecar "<path>.meta.json".
inline constexpr char kMagic[4] = {'K', 'V', 'T', 'R'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::size_t kHeaderBytes = 24;
inline constexpr std::uint64_t kDefaultMaxElements = std::uint64_t{1} << 28;

inline constexpr double kRowSumWarn = 1e-4;
inline constexpr double kRowSumFail = 1e-2;

std::filesystem::path sidecar_path(const std::filesystem::path& path);

void write_trace(const AttentionTrace& trace, const std::filesystem::path& path);

struct ReadOptions {
    std::uint64_t max_elements = kDefaultMaxElements;
    bool require_sidecar = false;
};

/// Reads and validates a trace. Row-sum drift in (1e-4, 1e-2] is reported through `warnings`.
AttentionTrace read_trace(const std::filesystem::path& path, std::vector<std::string>& warnings, const ReadOptions& options = {});
AttentionTrace read_trace(const std::filesystem::path& path, const ReadOptions& options = {});

std::vector<std::uint8_t> encode(const AttentionTrace& trace);
AttentionTrace decode(const std::vector<std::uint8_t>& bytes, std::uint64_t max_elements = kDefaultMaxElements);

nlohmann::json meta_to_json(const TraceMeta& meta);
TraceMeta meta_from_json(const nlohmann::json& j);

enum class Severity { Ok, Warning, Failure };

struct Check {
    std::string name;
    Severity severity = Severity::Ok;
    std::string detail;
};

struct ValidationReport {
    std::vector<Check> checks;

    bool ok() const;  // no failures; warnings allowed
    std::size_t failures() const;
    std::size_t warnings() const;
    const Check* find(const std::string& name) const;
    nlohmann::json to_json() const;
};

ValidationReport validate_trace(const AttentionTrace& trace);

}  // namespace kvlab::traceio
