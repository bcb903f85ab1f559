// Copyright (C) 2026 kvlab authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end: trace, compress, analyze, sweep, deltap, bench, plot.
// Exit codes: 0 success, 1 validation/configuration error, 2 I/O or format error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "kvlab/analysis.hpp"
#include "kvlab/error.hpp"
#include "kvlab/harness.hpp"
#include "kvlab/policies.hpp"
#include "kvlab/tinyformer.hpp"
#include "kvlab/traceio.hpp"

namespace fs = std::filesystem;
using namespace kvlab;

namespace {

struct Globals {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
    std::optional<std::string> config;
};

fs::path out_dir_or(const Globals& g, const fs::path& fallback) {
    fs::path dir = g.out_dir ? fs::path(*g.out_dir) : fallback;
    if (!dir.empty()) fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << text;
}

harness::ExperimentConfig load_config(const Globals& g) {
    auto config = harness::load_experiment(*g.config);
    if (g.seed) {
        config.seed = *g.seed;
        config.model.seed = *g.seed;
    }
    if (g.out_dir) config.output_dir = *g.out_dir;
    return config;
}

struct TraceArgs {
    std::string prompt;
    std::string prompt_file;
    std::string out;
    std::string mode = "full";
    std::string marker;
    tinyformer::ModelConfig model;
};

int run_trace(const Globals& g, TraceArgs a) {
    std::string text;
    policies::ShotSegmentation seg;
    tinyformer::ModelConfig model = a.model;
    if (g.config) {
        const auto config = load_config(g);
        text = config.prompt;
        seg = config.segmentation;
        model = config.model;
    }
    if (!a.prompt_file.empty()) text = slurp(a.prompt_file);
    if (!a.prompt.empty()) text = a.prompt;
    if (!a.marker.empty()) seg = policies::ShotSegmentation::from_marker(text, a.marker);
    if (g.seed) model.seed = *g.seed;
    if (text.empty()) throw ValidationError("no prompt given (use --prompt, --prompt-file or --config)");
    if (a.mode != "full" && a.mode != "last") throw ValidationError("--mode must be 'full' or 'last'");

    const tinyformer::Model m(model);
    auto pre = m.prefill(tinyformer::tokenize(text), a.mode == "full" ? TraceMode::Full : TraceMode::LastRow);
    seg.validate(text.size());
    pre.trace.meta().shots = seg.shots;
    pre.trace.meta().mandatory = seg.mandatory;

    const fs::path out = a.out.empty() ? out_dir_or(g, ".") / "trace.kvtr" : fs::path(a.out);
    traceio::write_trace(pre.trace, out);
    std::cout << "wrote " << out.string() << " (L=" << pre.trace.layers() << " H=" << pre.trace.heads()
              << " Q=" << pre.trace.queries() << " T=" << pre.trace.keys() << ")\n";
    return 0;
}

struct CompressArgs {
    std::string trace;
    std::string policy = "ShotKV";
    double ratio = 1.0;
    std::optional<double> r_p, r_d;
    policies::PolicyParams params;
    std::string shot_scan = "stop";
    std::string out;
};

int run_compress(const Globals& g, CompressArgs a) {
    const auto trace = traceio::read_trace(a.trace);
    policies::PolicyConfig policy;
    policy.kind = policies::parse_policy_kind(a.policy);
    policy.budget.ratio = a.ratio;
    policy.budget.prefill_ratio = a.r_p;
    policy.budget.decoding_ratio = a.r_d;
    policy.params = a.params;
    policy.budget.sink_count = a.params.sink_count;
    if (a.shot_scan == "continue") {
        policy.params.shot_scan = policies::ShotScan::ContinuePastMisfit;
    } else if (a.shot_scan != "stop") {
        throw ValidationError("--shot-scan must be 'stop' or 'continue'");
    }
    const auto seg = policies::ShotSegmentation::from_meta(trace.meta());
    const auto retained = policies::run_policy(policy, trace, seg);

    nlohmann::json j{{"policy", policies::to_json(policy)},
                     {"prompt_len", trace.keys()},
                     {"budget_tokens", budget_tokens(policy.kind == policies::PolicyKind::ShotKV ? policy.budget.prefill()
                                                                                                : policy.budget.ratio,
                                                     trace.keys(), policy.budget.min_keep)},
                     {"retained", to_json(retained)}};
    const fs::path out = a.out.empty() ? out_dir_or(g, ".") / "retained.json" : fs::path(a.out);
    write_text(out, j.dump(2) + "\n");
    std::cout << "wrote " << out.string() << " (" << retained.max_size() << " of " << trace.keys() << " tokens kept)\n";
    return 0;
}

struct AnalyzeArgs {
    std::string trace;
    std::size_t exclude_sinks = 0;
    std::vector<double> coverage_at;
    std::string csv;
    std::string heatmap;
    std::optional<std::uint32_t> layer, head;
    bool validate = false;
};

int run_analyze(const Globals& g, AnalyzeArgs a) {
    std::vector<std::string> warnings;
    const auto trace = traceio::read_trace(a.trace, warnings);
    for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
    if (a.validate) {
        const auto report = traceio::validate_trace(trace);
        std::cout << report.to_json().dump(2) << '\n';
        if (!report.ok()) return 1;
    }
    const auto scores = analysis::aggregate_attention(trace);
    const auto curve = analysis::cumulative_distribution(scores, a.exclude_sinks, a.trace);
    const fs::path csv = a.csv.empty() ? out_dir_or(g, ".") / "coverage.csv" : fs::path(a.csv);
    analysis::write_curve_csv(curve, csv);
    std::cout << "wrote " << csv.string() << " (exclude_first_n=" << a.exclude_sinks
              << ", aggregated over all layers, heads and query rows)\n";
    for (double p : a.coverage_at) {
        std::printf("coverage_at(%.4g) = %.6f\n", p, analysis::coverage_at(curve, p));
    }
    if (!a.heatmap.empty()) {
        analysis::heatmap_export(trace, a.layer, a.head, a.heatmap);
        std::cout << "wrote " << a.heatmap << '\n';
    }
    return 0;
}

int run_sweep(const Globals& g) {
    if (!g.config) throw ValidationError("sweep needs --config");
    const auto path = harness::ratio_sweep(load_config(g));
    std::cout << "wrote " << path.string() << '\n';
    return 0;
}

int run_deltap(const Globals& g, const std::string& scores, const std::string& base, const std::string& out) {
    const std::string table = harness::delta_p_table(harness::read_scores(scores), base);
    if (!out.empty()) {
        write_text(out, table);
    } else if (g.out_dir) {
        write_text(out_dir_or(g, ".") / "deltap.csv", table);
    }
    std::cout << table;
    return 0;
}

int run_bench(const Globals& g, double ratio, std::optional<std::size_t> reps) {
    if (!g.config) throw ValidationError("bench needs --config");
    auto config = load_config(g);
    if (reps) config.bench_repetitions = *reps;
    const std::string table = harness::bench_csv(harness::bench_policies(config, ratio));
    fs::create_directories(config.output_dir);
    write_text(config.output_dir / "bench.csv", table);
    std::cout << table;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"kvlab: KV-cache compression laboratory"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--seed", g.seed, "Override the model seed");
    app.add_option("--out-dir", g.out_dir, "Directory for outputs");
    app.add_option("--config", g.config, "Experiment config (JSON)");

    TraceArgs trace_args;
    auto* trace = app.add_subcommand("trace", "Run the toy model on a prompt and write a KVTR trace");
    trace->add_option("--prompt", trace_args.prompt, "Prompt text");
    trace->add_option("--prompt-file", trace_args.prompt_file, "Prompt file");
    trace->add_option("--out", trace_args.out, "Output path (default <out-dir>/trace.kvtr)");
    trace->add_option("--mode", trace_args.mode, "full | last")->capture_default_str();
    trace->add_option("--marker", trace_args.marker, "Shot delimiter for segmentation");
    trace->add_option("--layers", trace_args.model.layers)->capture_default_str();
    trace->add_option("--heads", trace_args.model.heads)->capture_default_str();
    trace->add_option("--head-dim", trace_args.model.head_dim)->capture_default_str();
    trace->add_option("--max-seq", trace_args.model.max_seq)->capture_default_str();

    CompressArgs compress_args;
    auto* compress = app.add_subcommand("compress", "Apply a policy to a trace and write the retained set as JSON");
    compress->add_option("--trace", compress_args.trace)->required();
    compress->add_option("--policy", compress_args.policy)->capture_default_str();
    compress->add_option("--ratio", compress_args.ratio)->capture_default_str();
    compress->add_option("--r-p", compress_args.r_p, "ShotKV prefill ratio");
    compress->add_option("--r-d", compress_args.r_d, "ShotKV decoding ratio");
    compress->add_option("--sink-count", compress_args.params.sink_count)->capture_default_str();
    compress->add_option("--obs-window", compress_args.params.obs_window)->capture_default_str();
    compress->add_option("--pool-kernel", compress_args.params.pool_kernel)->capture_default_str();
    compress->add_option("--recent-count", compress_args.params.recent_count)->capture_default_str();
    compress->add_option("--chunk-size", compress_args.params.chunk_size)->capture_default_str();
    compress->add_option("--pyramid-min-ratio", compress_args.params.pyramid_min_ratio)->capture_default_str();
    compress->add_option("--shot-query-rows", compress_args.params.shot_query_rows)->capture_default_str();
    compress->add_option("--shot-scan", compress_args.shot_scan, "stop | continue")->capture_default_str();
    compress->add_option("--out", compress_args.out);

    AnalyzeArgs analyze_args;
    auto* analyze = app.add_subcommand("analyze", "Coverage curve, coverage statistics and heatmaps for a trace");
    analyze->add_option("--trace", analyze_args.trace)->required();
    analyze->add_option("--exclude-sinks", analyze_args.exclude_sinks, "Drop the first N tokens")->capture_default_str();
    analyze->add_option("--coverage-at", analyze_args.coverage_at, "Token fraction(s) to report");
    analyze->add_option("--csv", analyze_args.csv, "Curve CSV path (default <out-dir>/coverage.csv)");
    analyze->add_option("--heatmap", analyze_args.heatmap, "PGM heatmap path");
    analyze->add_option("--layer", analyze_args.layer, "Heatmap layer (default: mean)");
    analyze->add_option("--head", analyze_args.head, "Heatmap head (default: mean)");
    analyze->add_flag("--validate", analyze_args.validate, "Print the validation report");

    auto* sweep = app.add_subcommand("sweep", "Ratio sweep over policies (config JSON -> CSV + SVG)");

    std::string scores_path, base_label = "FullKV", deltap_out;
    auto* deltap = app.add_subcommand("deltap", "Relative performance change table from scores.csv");
    deltap->add_option("--scores", scores_path)->required();
    deltap->add_option("--base", base_label, "Label of the uncompressed score")->capture_default_str();
    deltap->add_option("--out", deltap_out);

    double bench_ratio = 0.5;
    std::optional<std::size_t> bench_reps;
    auto* bench = app.add_subcommand("bench", "Policy selection latency and generation throughput");
    bench->add_option("--ratio", bench_ratio)->capture_default_str();
    bench->add_option("--reps", bench_reps, "Repetitions per policy (at least 100)");

    std::string plot_csv, plot_out, plot_metric = "kl";
    auto* plot = app.add_subcommand("plot", "Render a sweep CSV as SVG");
    plot->add_option("--csv", plot_csv)->required();
    plot->add_option("--out", plot_out)->required();
    plot->add_option("--metric", plot_metric)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*trace) return run_trace(g, trace_args);
        if (*compress) return run_compress(g, compress_args);
        if (*analyze) return run_analyze(g, analyze_args);
        if (*sweep) return run_sweep(g);
        if (*deltap) return run_deltap(g, scores_path, base_label, deltap_out);
        if (*bench) return run_bench(g, bench_ratio, bench_reps);
        if (*plot) {
            harness::plot_sweep(plot_csv, plot_out, plot_metric);
            std::cout << "wrote " << plot_out << '\n';
            return 0;
        }
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
