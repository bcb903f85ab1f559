// Copyright (C) 2026 kvlab authors
// SPDX-License-Identifier: Apache-2.0

#include "kvlab/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <future>
#include <map>
#include <sstream>

#include "kvlab/error.hpp"

namespace kvlab::harness {

namespace {

using policies::PolicyConfig;
using policies::PolicyKind;

std::string fmt_g(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

std::string fmt_fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return buf;
}

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(line);
    while (std::getline(is, cur, sep)) out.push_back(cur);
    if (!line.empty() && line.back() == sep) out.emplace_back();
    return out;
}

std::string trim(std::string s) {
    const auto not_space = [](unsigned char c) { return !std::isspace(c); };
    s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
    s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
    return s;
}

std::optional<double> parse_number(const std::string& s) {
    if (s.empty()) return std::nullopt;
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) return std::nullopt;
        return v;
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

std::vector<double> log_softmax(const std::vector<float>& logits) {
    double peak = -std::numeric_limits<double>::infinity();
    for (float v : logits) peak = std::max(peak, static_cast<double>(v));
    double sum = 0.0;
    for (float v : logits) sum += std::exp(v - peak);
    const double lse = peak + std::log(sum);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw IoError("write failed for " + path.string());
}

PolicyConfig cell_policy(const PolicyConfig& base, double ratio) {
    PolicyConfig c = base;
    c.budget.ratio = ratio;
    if (c.kind == PolicyKind::ShotKV) {
        c.budget.prefill_ratio = ratio;
        c.budget.decoding_ratio = ratio;
    } else {
        c.budget.prefill_ratio.reset();
        c.budget.decoding_ratio.reset();
    }
    return c;
}

double metric_value(const ResultRow& row, const std::string& metric) {
    if (metric == "kl") return row.divergence.kl;
    if (metric == "top1_match") return row.divergence.top1_match;
    if (metric == "max_abs") return row.divergence.max_abs;
    if (metric == "retained_prefill") return static_cast<double>(row.retained_prefill);
    if (metric == "retained_decoding") return static_cast<double>(row.retained_decoding);
    if (metric == "wall_ms") return row.wall_ms;
    throw ConfigError("unknown plot metric '" + metric + "'");
}

}  // namespace

double delta_p(double p_c, double p_base) {
    if (p_base == 0.0) {
        throw ArithmeticError("relative change against a zero baseline score");
    }
    return (p_c - p_base) / p_base;
}

Divergence divergence(const std::vector<std::vector<float>>& logits_full,
                      const std::vector<std::vector<float>>& logits_compressed) {
    if (logits_full.size() != logits_compressed.size()) {
        throw ValidationError("logit matrices differ in step count (" + std::to_string(logits_full.size()) + " vs " +
                              std::to_string(logits_compressed.size()) + ")");
    }
    Divergence d;
    if (logits_full.empty()) return d;
    double kl_sum = 0.0;
    std::size_t matches = 0;
    for (std::size_t s = 0; s < logits_full.size(); ++s) {
        const auto& a = logits_full[s];
        const auto& b = logits_compressed[s];
        if (a.size() != b.size() || a.empty()) {
            throw ValidationError("logit rows differ in width at step " + std::to_string(s));
        }
        const auto la = log_softmax(a);
        const auto lb = log_softmax(b);
        double kl = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            kl += std::exp(la[i]) * (la[i] - lb[i]);
            d.max_abs = std::max(d.max_abs, static_cast<double>(std::abs(a[i] - b[i])));
        }
        kl_sum += kl;
        matches += tinyformer::argmax(a) == tinyformer::argmax(b);
    }
    d.kl = kl_sum / static_cast<double>(logits_full.size());
    d.top1_match = static_cast<double>(matches) / static_cast<double>(logits_full.size());
    return d;
}

std::vector<double> default_ratio_grid() {
    std::vector<double> grid;
    for (int k = 9; k >= 1; --k) grid.push_back(k / 10.0);
    return grid;
}

void ExperimentConfig::validate() const {
    model.validate();
    if (policies.empty()) throw ConfigError("experiment needs at least one policy");
    if (ratios.empty()) throw ConfigError("experiment needs at least one ratio");
    for (double r : ratios) {
        if (!(r > 0.0 && r <= 1.0)) throw BudgetError("ratio " + fmt_g(r) + " outside (0, 1]");
    }
    if (prompt.empty()) throw ConfigError("experiment prompt is empty");
    for (const auto& p : policies) p.validate();
    segmentation.validate(prompt.size());
}

ExperimentConfig experiment_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
    ExperimentConfig c;
    try {
        if (j.contains("model")) c.model = tinyformer::model_config_from_json(j.at("model"));
        if (j.contains("seed")) {
            c.seed = j.at("seed").get<std::uint64_t>();
            c.model.seed = c.seed;
        } else {
            c.seed = c.model.seed;
        }

        const auto& prompt = j.at("prompt");
        if (prompt.is_string()) {
            c.prompt = prompt.get<std::string>();
        } else if (prompt.contains("text")) {
            c.prompt = prompt.at("text").get<std::string>();
        } else {
            std::filesystem::path file = prompt.at("file").get<std::string>();
            if (file.is_relative()) file = base_dir / file;
            c.prompt = read_file(file);
        }

        if (j.contains("segmentation")) {
            const auto& s = j.at("segmentation");
            if (s.contains("marker")) {
                c.segmentation = policies::ShotSegmentation::from_marker(c.prompt, s.at("marker").get<std::string>());
            } else {
                if (s.contains("shots")) c.segmentation.shots = s.at("shots").get<std::vector<Span>>();
                if (s.contains("mandatory")) c.segmentation.mandatory = s.at("mandatory").get<std::vector<Span>>();
            }
        }

        const nlohmann::json shared = j.value("params", nlohmann::json::object());
        for (const auto& p : j.at("policies")) {
            nlohmann::json merged = shared;
            if (p.is_string()) {
                merged["kind"] = p.get<std::string>();
            } else {
                merged.update(p);
            }
            c.policies.push_back(policies::policy_from_json(merged));
        }

        c.ratios = j.contains("ratios") ? j.at("ratios").get<std::vector<double>>() : default_ratio_grid();
        c.max_new = j.value("max_new", c.max_new);
        c.output_dir = j.value("output_dir", c.output_dir.string());
        if (j.contains("metrics")) c.metrics = j.at("metrics").get<std::vector<std::string>>();
        c.workers = std::max<std::size_t>(1, j.value("workers", c.workers));
        c.bench_repetitions = j.value("bench_repetitions", c.bench_repetitions);
        c.plot_metric = j.value("plot_metric", c.plot_metric);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed experiment config: ") + e.what());
    }
    return c;
}

nlohmann::json to_json(const ExperimentConfig& c) {
    nlohmann::json policies = nlohmann::json::array();
    for (const auto& p : c.policies) policies.push_back(policies::to_json(p));
    return {{"model", tinyformer::to_json(c.model)},
            {"seed", c.seed},
            {"prompt", c.prompt},
            {"segmentation", {{"shots", c.segmentation.shots}, {"mandatory", c.segmentation.mandatory}}},
            {"policies", policies},
            {"ratios", c.ratios},
            {"max_new", c.max_new},
            {"output_dir", c.output_dir.string()},
            {"metrics", c.metrics},
            {"workers", c.workers},
            {"bench_repetitions", c.bench_repetitions},
            {"plot_metric", c.plot_metric},
            {"aggregation", "scores summed over layers, heads and query rows"}};
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
    const std::string text = read_file(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("cannot parse " + path.string() + ": " + e.what());
    }
    return experiment_from_json(j, path.parent_path());
}

std::optional<double> ResultRow::delta() const {
    if (!p_c || !p_base) return std::nullopt;
    return delta_p(*p_c, *p_base);
}

std::vector<ResultRow> run_sweep(const ExperimentConfig& config) {
    config.validate();
    const tinyformer::Model model(config.model);
    const auto prompt = tinyformer::tokenize(config.prompt);

    PolicyConfig full;
    const auto baseline = tinyformer::generate(model, prompt, config.max_new, full, config.segmentation);
    tinyformer::GenerateOptions forced;
    if (!baseline.generated_ids.empty()) {
        forced.forced_tokens = std::vector<tinyformer::TokenId>(baseline.generated_ids.begin(), baseline.generated_ids.end() - 1);
    }

    struct Cell {
        std::size_t policy_index;
        double ratio;
    };
    std::vector<Cell> cells;
    for (std::size_t p = 0; p < config.policies.size(); ++p) {
        for (double r : config.ratios) cells.push_back({p, r});
    }

    auto run_cell = [&](const Cell& cell) {
        const PolicyConfig policy = cell_policy(config.policies[cell.policy_index], cell.ratio);
        const auto gen = tinyformer::generate(model, prompt, config.max_new, policy, config.segmentation, forced);
        const auto report = cache_report(gen.final_cache);
        ResultRow row;
        row.policy = policy.kind;
        row.ratio = cell.ratio;
        if (policy.kind == PolicyKind::ShotKV) {
            row.r_p = policy.budget.prefill();
            row.r_d = policy.budget.decoding();
        }
        row.divergence = divergence(baseline.per_step_logits, gen.per_step_logits);
        row.retained_prefill = report.prefill_tokens;
        row.retained_decoding = report.decoding_tokens;
        row.wall_ms = gen.selection_seconds * 1e3;
        return row;
    };

    std::vector<ResultRow> rows(cells.size());
    const std::size_t workers = std::max<std::size_t>(1, config.workers);
    for (std::size_t begin = 0; begin < cells.size(); begin += workers) {
        const std::size_t end = std::min(cells.size(), begin + workers);
        if (workers == 1) {
            rows[begin] = run_cell(cells[begin]);
            continue;
        }
        std::vector<std::future<ResultRow>> batch;
        for (std::size_t i = begin; i < end; ++i) batch.push_back(std::async(std::launch::async, run_cell, cells[i]));
        for (std::size_t i = begin; i < end; ++i) rows[i] = batch[i - begin].get();
    }

    std::vector<std::size_t> order(rows.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (cells[a].policy_index != cells[b].policy_index) return cells[a].policy_index < cells[b].policy_index;
        return cells[a].ratio > cells[b].ratio;
    });
    std::vector<ResultRow> sorted;
    sorted.reserve(rows.size());
    for (std::size_t i : order) sorted.push_back(rows[i]);
    return sorted;
}

std::string sweep_csv(const std::vector<ResultRow>& rows) {
    std::string out = std::string(kSweepHeader) + "\n";
    for (const auto& r : rows) {
        out += policies::to_string(r.policy);
        out += "," + fmt_g(r.ratio);
        out += "," + (r.r_p ? fmt_g(*r.r_p) : std::string());
        out += "," + (r.r_d ? fmt_g(*r.r_d) : std::string());
        out += "," + fmt_g(r.divergence.kl);
        out += "," + fmt_g(r.divergence.top1_match);
        out += "," + fmt_g(r.divergence.max_abs);
        out += "," + std::to_string(r.retained_prefill);
        out += "," + std::to_string(r.retained_decoding);
        out += "," + fmt_fixed(r.wall_ms, 3);
        out += "\n";
    }
    return out;
}

std::vector<ResultRow> parse_sweep_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || trim(line) != kSweepHeader) {
        throw FormatError("sweep CSV must start with the header '" + std::string(kSweepHeader) + "'");
    }
    std::vector<ResultRow> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        line = trim(line);
        if (line.empty()) continue;
        const auto f = split(line, ',');
        if (f.size() != 10) {
            throw FormatError("sweep CSV line " + std::to_string(line_no) + " has " + std::to_string(f.size()) + " fields");
        }
        auto number = [&](std::size_t i) {
            auto v = parse_number(f[i]);
            if (!v) throw FormatError("sweep CSV line " + std::to_string(line_no) + ": bad number '" + f[i] + "'");
            return *v;
        };
        ResultRow r;
        try {
            r.policy = policies::parse_policy_kind(f[0]);
        } catch (const ConfigError& e) {
            throw FormatError("sweep CSV line " + std::to_string(line_no) + ": " + e.what());
        }
        r.ratio = number(1);
        r.r_p = parse_number(f[2]);
        r.r_d = parse_number(f[3]);
        r.divergence = {number(4), number(5), number(6)};
        r.retained_prefill = static_cast<std::size_t>(number(7));
        r.retained_decoding = static_cast<std::size_t>(number(8));
        r.wall_ms = number(9);
        rows.push_back(r);
    }
    if (rows.empty()) throw FormatError("sweep CSV has no data rows");
    return rows;
}

std::string plot_svg(const std::vector<ResultRow>& rows, const std::string& metric) {
    if (rows.empty()) throw FormatError("nothing to plot");
    constexpr double kWidth = 640, kHeight = 400, kLeft = 70, kRight = 150, kTop = 30, kBottom = 50;
    const double plot_w = kWidth - kLeft - kRight, plot_h = kHeight - kTop - kBottom;
    static const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

    std::vector<PolicyKind> order;
    std::map<PolicyKind, std::vector<std::pair<double, double>>> series;
    double x_min = rows.front().ratio, x_max = x_min, y_min = 0.0, y_max = 0.0;
    for (const auto& r : rows) {
        if (!series.count(r.policy)) order.push_back(r.policy);
        const double y = metric_value(r, metric);
        series[r.policy].emplace_back(r.ratio, y);
        x_min = std::min(x_min, r.ratio);
        x_max = std::max(x_max, r.ratio);
        y_min = std::min(y_min, y);
        y_max = std::max(y_max, y);
    }
    if (y_max <= y_min) y_max = y_min + 1.0;
    auto sx = [&](double ratio) {
        return x_max > x_min ? kLeft + (x_max - ratio) / (x_max - x_min) * plot_w : kLeft + plot_w / 2;
    };
    auto sy = [&](double v) { return kTop + (y_max - v) / (y_max - y_min) * plot_h; };

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight << "\" viewBox=\"0 0 "
       << kWidth << " " << kHeight << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop + plot_h << "\" x2=\"" << kLeft + plot_w << "\" y2=\"" << kTop + plot_h
       << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kTop + plot_h
       << "\" stroke=\"black\"/>\n";

    std::vector<double> ticks;
    for (const auto& r : rows) ticks.push_back(r.ratio);
    std::sort(ticks.begin(), ticks.end(), std::greater<>());
    ticks.erase(std::unique(ticks.begin(), ticks.end()), ticks.end());
    for (double t : ticks) {
        os << "<text x=\"" << fmt_fixed(sx(t), 2) << "\" y=\"" << kTop + plot_h + 18
           << "\" font-size=\"11\" text-anchor=\"middle\">" << fmt_fixed(t, 2) << "</text>\n";
    }
    for (int i = 0; i <= 4; ++i) {
        const double v = y_min + (y_max - y_min) * i / 4.0;
        os << "<text x=\"" << kLeft - 6 << "\" y=\"" << fmt_fixed(sy(v) + 4, 2) << "\" font-size=\"11\" text-anchor=\"end\">"
           << fmt_g(v) << "</text>\n";
    }
    os << "<text x=\"" << kLeft + plot_w / 2 << "\" y=\"" << kHeight - 10
       << "\" font-size=\"12\" text-anchor=\"middle\">compression ratio</text>\n";
    os << "<text x=\"14\" y=\"" << kTop + plot_h / 2 << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
       << kTop + plot_h / 2 << ")\">" << metric << "</text>\n";

    for (std::size_t i = 0; i < order.size(); ++i) {
        auto pts = series[order[i]];
        std::stable_sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
        const char* color = kPalette[i % std::size(kPalette)];
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        for (std::size_t k = 0; k < pts.size(); ++k) {
            os << (k ? " " : "") << fmt_fixed(sx(pts[k].first), 2) << "," << fmt_fixed(sy(pts[k].second), 2);
        }
        os << "\"/>\n";
        const double ly = kTop + 16.0 * static_cast<double>(i) + 8;
        os << "<rect x=\"" << kLeft + plot_w + 12 << "\" y=\"" << ly - 8 << "\" width=\"10\" height=\"10\" fill=\"" << color
           << "\"/>\n";
        os << "<text x=\"" << kLeft + plot_w + 28 << "\" y=\"" << ly + 1 << "\" font-size=\"11\">"
           << policies::to_string(order[i]) << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

void plot_sweep(const std::filesystem::path& csv_path, const std::filesystem::path& out_path, const std::string& metric) {
    const auto rows = parse_sweep_csv(read_file(csv_path));
    const std::string svg = plot_svg(rows, metric);
    write_file(out_path, svg);
}

std::filesystem::path ratio_sweep(const ExperimentConfig& config) {
    const auto rows = run_sweep(config);
    std::filesystem::create_directories(config.output_dir);
    const auto csv_path = config.output_dir / "sweep.csv";
    write_file(csv_path, sweep_csv(rows));
    write_file(config.output_dir / "sweep.svg", plot_svg(rows, config.plot_metric));
    write_file(config.output_dir / "sweep_config.json", to_json(config).dump(2) + "\n");
    return csv_path;
}

std::vector<BenchRow> bench_policies(const ExperimentConfig& config, double ratio) {
    config.validate();
    using Clock = std::chrono::steady_clock;
    const tinyformer::Model model(config.model);
    const auto prompt = tinyformer::tokenize(config.prompt);
    const auto pre = model.prefill(prompt, TraceMode::Full);
    const std::size_t reps = std::max<std::size_t>(100, config.bench_repetitions);

    std::vector<BenchRow> out;
    for (const auto& base : config.policies) {
        const PolicyConfig policy = cell_policy(base, ratio);
        std::vector<double> samples;
        samples.reserve(reps);
        for (std::size_t i = 0; i < reps; ++i) {
            const auto t0 = Clock::now();
            const auto retained = policies::run_policy(policy, pre.trace, config.segmentation);
            samples.push_back(std::chrono::duration<double, std::micro>(Clock::now() - t0).count());
            if (retained.units.empty()) throw Error("policy returned no retention units");
        }
        std::sort(samples.begin(), samples.end());
        BenchRow row;
        row.policy = policy.kind;
        row.ratio = ratio;
        row.repetitions = reps;
        row.median_us = samples.size() % 2 ? samples[samples.size() / 2]
                                           : 0.5 * (samples[samples.size() / 2 - 1] + samples[samples.size() / 2]);
        const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(samples.size())));
        row.p95_us = samples[std::max<std::size_t>(rank, 1) - 1];

        const auto t0 = Clock::now();
        const auto gen = tinyformer::generate(model, prompt, config.max_new, policy, config.segmentation);
        const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
        row.tokens_per_second = secs > 0 ? static_cast<double>(gen.generated_ids.size()) / secs : 0.0;
        out.push_back(row);
    }
    return out;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
    std::string out = "policy,ratio,repetitions,median_us,p95_us,tokens_per_s\n";
    for (const auto& r : rows) {
        out += std::string(policies::to_string(r.policy)) + "," + fmt_g(r.ratio) + "," + std::to_string(r.repetitions) + "," +
               fmt_fixed(r.median_us, 3) + "," + fmt_fixed(r.p95_us, 3) + "," + fmt_fixed(r.tokens_per_second, 1) + "\n";
    }
    return out;
}

std::vector<ScoreEntry> read_scores(const std::filesystem::path& path) {
    std::istringstream in(read_file(path));
    std::vector<ScoreEntry> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        line = trim(line);
        if (line.empty()) continue;
        const auto f = split(line, ',');
        if (f.size() != 2) throw FormatError("scores line " + std::to_string(line_no) + " must be 'label,value'");
        const auto v = parse_number(trim(f[1]));
        if (!v) {
            if (line_no == 1) continue;  // header
            throw FormatError("scores line " + std::to_string(line_no) + ": bad value '" + f[1] + "'");
        }
        out.push_back({trim(f[0]), *v});
    }
    if (out.empty()) throw FormatError(path.string() + " holds no scores");
    return out;
}

std::string delta_p_table(const std::vector<ScoreEntry>& scores, const std::string& base_label) {
    const auto base = std::find_if(scores.begin(), scores.end(), [&](const ScoreEntry& s) { return s.label == base_label; });
    if (base == scores.end()) throw ValidationError("no baseline score labelled '" + base_label + "'");
    std::string out = "label,value,delta_p\n";
    for (const auto& s : scores) {
        out += s.label + "," + fmt_g(s.value) + "," + fmt_fixed(delta_p(s.value, base->value), 6) + "\n";
    }
    return out;
}

}  // namespace kvlab::harness
