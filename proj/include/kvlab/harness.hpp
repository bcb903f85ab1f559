// Copyright (C) 2026 kvlab authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "kvlab/policies.hpp"
#include "kvlab/tinyformer.hpp"

namespace kvlab::harness {

/// (p_c - p_base) / p_base. Throws ArithmeticError when p_base == 0.
double delta_p(double p_c, double p_base);

struct Divergence {
    double kl = 0.0;          // mean over steps of KL(softmax(full) || softmax(compressed))
    double top1_match = 1.0;  // fraction of steps with equal argmax
    double max_abs = 0.0;     // over every logit
};

Divergence divergence(const std::vector<std::vector<float>>& logits_full,
                      const std::vector<std::vector<float>>& logits_compressed);

struct ExperimentConfig {
    tinyformer::ModelConfig model;
    std::string prompt;
    policies::ShotSegmentation segmentation;
    std::vector<policies::PolicyConfig> policies;  // ratio is filled per sweep cell
    std::vector<double> ratios;
    std::size_t max_new = 32;
    std::filesystem::path output_dir = "out";
    std::vector<std::string> metrics = {"kl", "top1_match", "max_abs"};
    std::uint64_t seed = 0;
    std::size_t workers = 1;
    std::size_t bench_repetitions = 100;
    std::string plot_metric = "kl";

    void validate() const;
};

std::vector<double> default_ratio_grid();

/// Relative prompt files resolve against `base_dir`.
ExperimentConfig experiment_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
nlohmann::json to_json(const ExperimentConfig& config);
ExperimentConfig load_experiment(const std::filesystem::path& path);

struct ResultRow {
    policies::PolicyKind policy = policies::PolicyKind::FullKV;
    double ratio = 1.0;
    std::optional<double> r_p;
    std::optional<double> r_d;
    Divergence divergence;
    std::size_t retained_prefill = 0;
    std::size_t retained_decoding = 0;
    double wall_ms = 0.0;
    std::optional<double> p_c;
    std::optional<double> p_base;

    std::optional<double> delta() const;
};

inline constexpr const char* kSweepHeader =
    "policy,ratio,r_p,r_d,kl,top1_match,max_abs,retained_prefill,retained_decoding,wall_ms";

/// One row per (policy, ratio), sorted by policy order then descending ratio.
std::vector<ResultRow> run_sweep(const ExperimentConfig& config);
std::string sweep_csv(const std::vector<ResultRow>& rows);
std::vector<ResultRow> parse_sweep_csv(const std::string& text);

/// Runs the sweep and writes `sweep.csv`, `sweep.svg` and `sweep_config.json` into the output dir.
std::filesystem::path ratio_sweep(const ExperimentConfig& config);

struct BenchRow {
    policies::PolicyKind policy = policies::PolicyKind::FullKV;
    double ratio = 1.0;
    std::size_t repetitions = 0;
    double median_us = 0.0;
    double p95_us = 0.0;
    double tokens_per_second = 0.0;
};

std::vector<BenchRow> bench_policies(const ExperimentConfig& config, double ratio = 0.5);
std::string bench_csv(const std::vector<BenchRow>& rows);

/// Line chart, x = ratio (descending left to right), one polyline per policy.
std::string plot_svg(const std::vector<ResultRow>& rows, const std::string& metric);
void plot_sweep(const std::filesystem::path& csv_path, const std::filesystem::path& out_path, const std::string& metric = "kl");

struct ScoreEntry {
    std::string label;
    double value = 0.0;
};

/// `label,value` CSV (header optional).
std::vector<ScoreEntry> read_scores(const std::filesystem::path& path);
/// `label,value,delta_p` table against the entry named `base_label`.
std::string delta_p_table(const std::vector<ScoreEntry>& scores, const std::string& base_label);

}  // namespace kvlab::harness
