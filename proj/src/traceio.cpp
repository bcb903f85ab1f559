// Copyright (C) 2026 kvlab authors
// SPDX-License-Identifier: Apache-2.0

#include "kvlab/traceio.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <iterator>
#include <sstream>

#include "kvlab/error.hpp"

namespace kvlab::traceio {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 24));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::string row_label(std::uint32_t l, std::uint32_t h, std::uint32_t q) {
    return "(l=" + std::to_string(l) + ", h=" + std::to_string(h) + ", q=" + std::to_string(q) + ")";
}

double causal_row_sum(const AttentionTrace& trace, std::uint32_t l, std::uint32_t h, std::uint32_t q) {
    auto row = trace.row(l, h, q);
    const std::uint32_t last = trace.query_position(q);
    double sum = 0.0;
    for (std::uint32_t t = 0; t <= last && t < row.size(); ++t) {
        sum += row[t];
    }
    return sum;
}

std::string span_problem(const std::vector<Span>& spans, std::uint32_t keys, const char* what) {
    for (std::size_t i = 0; i < spans.size(); ++i) {
        const Span& s = spans[i];
        if (s.start >= s.end || s.end > keys) {
            return std::string(what) + "[" + std::to_string(i) + "] = [" + std::to_string(s.start) + ", " +
                   std::to_string(s.end) + ") is empty or exceeds T=" + std::to_string(keys);
        }
        if (i > 0 && s.start < spans[i - 1].end) {
            return std::string(what) + "[" + std::to_string(i) + "] overlaps or is out of order";
        }
    }
    return {};
}

}  // namespace

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
    std::filesystem::path out = path;
    out += ".meta.json";
    return out;
}

nlohmann::json meta_to_json(const TraceMeta& meta) {
    nlohmann::json j;
    j["tokens"] = meta.tokens;
    j["shots"] = meta.shots;
    j["mandatory"] = meta.mandatory;
    j["sink_count"] = meta.sink_count;
    j["model"] = meta.model;
    j["params"] = meta.params;
    return j;
}

TraceMeta meta_from_json(const nlohmann::json& j) {
    try {
        TraceMeta meta;
        meta.tokens = j.value("tokens", nlohmann::json::array());
        if (j.contains("shots")) meta.shots = j.at("shots").get<std::vector<Span>>();
        if (j.contains("mandatory")) meta.mandatory = j.at("mandatory").get<std::vector<Span>>();
        meta.sink_count = j.value("sink_count", 4u);
        meta.model = j.value("model", std::string{});
        meta.params = j.value("params", nlohmann::json::object());
        return meta;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed trace metadata: ") + e.what());
    }
}

std::vector<std::uint8_t> encode(const AttentionTrace& trace) {
    std::vector<std::uint8_t> out;
    out.reserve(kHeaderBytes + trace.weights().size() * 4);
    out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
    put_u32(out, kVersion);
    put_u32(out, trace.layers());
    put_u32(out, trace.heads());
    put_u32(out, trace.queries());
    put_u32(out, trace.keys());
    for (float w : trace.weights()) {
        put_u32(out, std::bit_cast<std::uint32_t>(w));
    }
    return out;
}

AttentionTrace decode(const std::vector<std::uint8_t>& bytes, std::uint64_t max_elements) {
    if (bytes.size() < kHeaderBytes) {
        throw FormatError("truncated KVTR header: expected at least " + std::to_string(kHeaderBytes) + " bytes, got " +
                          std::to_string(bytes.size()));
    }
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw FormatError("bad magic: not a KVTR file");
    }
    const std::uint32_t version = get_u32(bytes.data() + 4);
    if (version != kVersion) {
        throw FormatError("unsupported KVTR version " + std::to_string(version));
    }
    const std::uint32_t L = get_u32(bytes.data() + 8);
    const std::uint32_t H = get_u32(bytes.data() + 12);
    const std::uint32_t Q = get_u32(bytes.data() + 16);
    const std::uint32_t T = get_u32(bytes.data() + 20);
    if (L == 0 || H == 0 || Q == 0 || T == 0 || Q > T) {
        throw FormatError("implausible KVTR dimensions L=" + std::to_string(L) + " H=" + std::to_string(H) +
                          " Q=" + std::to_string(Q) + " T=" + std::to_string(T));
    }
    const std::uint64_t elements = std::uint64_t{L} * H * Q * T;
    if (elements > max_elements) {
        throw FormatError("KVTR tensor of " + std::to_string(elements) + " elements exceeds limit " +
                          std::to_string(max_elements));
    }
    const std::uint64_t expected = kHeaderBytes + elements * 4;
    if (bytes.size() != expected) {
        throw FormatError("KVTR length mismatch: expected " + std::to_string(expected) + " bytes, got " +
                          std::to_string(bytes.size()));
    }
    AttentionTrace trace(L, H, Q, T);
    auto& weights = trace.weights();
    const std::uint8_t* p = bytes.data() + kHeaderBytes;
    for (std::size_t i = 0; i < weights.size(); ++i, p += 4) {
        weights[i] = std::bit_cast<float>(get_u32(p));
    }
    return trace;
}

void write_trace(const AttentionTrace& trace, const std::filesystem::path& path) {
    const auto bytes = encode(trace);
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot open " + path.string() + " for writing");
        }
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw IoError("write failed for " + path.string());
        }
    }
    std::ofstream meta(sidecar_path(path), std::ios::trunc);
    if (!meta) {
        throw IoError("cannot open " + sidecar_path(path).string() + " for writing");
    }
    meta << meta_to_json(trace.meta()).dump(2) << '\n';
    if (!meta) {
        throw IoError("write failed for " + sidecar_path(path).string());
    }
}

AttentionTrace read_trace(const std::filesystem::path& path, std::vector<std::string>& warnings, const ReadOptions& options) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    AttentionTrace trace = decode(bytes, options.max_elements);

    const auto meta_path = sidecar_path(path);
    if (std::filesystem::exists(meta_path)) {
        std::ifstream meta_in(meta_path);
        nlohmann::json j;
        try {
            meta_in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("cannot parse " + meta_path.string() + ": " + e.what());
        }
        trace.meta() = meta_from_json(j);
    } else if (options.require_sidecar) {
        throw IoError("missing sidecar " + meta_path.string());
    }

    for (std::uint32_t l = 0; l < trace.layers(); ++l) {
        for (std::uint32_t h = 0; h < trace.heads(); ++h) {
            for (std::uint32_t q = 0; q < trace.queries(); ++q) {
                const double drift = std::abs(causal_row_sum(trace, l, h, q) - 1.0);
                if (!(drift <= kRowSumFail)) {
                    throw ValidationError("row " + row_label(l, h, q) + " sums to " +
                                          std::to_string(causal_row_sum(trace, l, h, q)) + ", not 1");
                }
                if (drift > kRowSumWarn) {
                    warnings.push_back("row " + row_label(l, h, q) + " drifts from 1 by " + std::to_string(drift));
                }
            }
        }
    }
    return trace;
}

AttentionTrace read_trace(const std::filesystem::path& path, const ReadOptions& options) {
    std::vector<std::string> warnings;
    AttentionTrace trace = read_trace(path, warnings, options);
    for (const auto& w : warnings) {
        std::cerr << "warning: " << path.string() << ": " << w << '\n';
    }
    return trace;
}

bool ValidationReport::ok() const { return failures() == 0; }

std::size_t ValidationReport::failures() const {
    std::size_t n = 0;
    for (const auto& c : checks) n += c.severity == Severity::Failure;
    return n;
}

std::size_t ValidationReport::warnings() const {
    std::size_t n = 0;
    for (const auto& c : checks) n += c.severity == Severity::Warning;
    return n;
}

const Check* ValidationReport::find(const std::string& name) const {
    for (const auto& c : checks) {
        if (c.name == name) return &c;
    }
    return nullptr;
}

nlohmann::json ValidationReport::to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& c : checks) {
        const char* status = c.severity == Severity::Ok ? "pass" : c.severity == Severity::Warning ? "warn" : "fail";
        arr.push_back({{"check", c.name}, {"status", status}, {"detail", c.detail}});
    }
    return {{"ok", ok()}, {"checks", arr}};
}

ValidationReport validate_trace(const AttentionTrace& trace) {
    ValidationReport report;
    auto add = [&](std::string name, Severity sev, std::string detail = {}) {
        report.checks.push_back({std::move(name), sev, std::move(detail)});
    };

    const std::uint64_t expected = std::uint64_t{trace.layers()} * trace.heads() * trace.queries() * trace.keys();
    if (expected == 0 || trace.queries() > trace.keys() || trace.weights().size() != expected) {
        add("dimensions", Severity::Failure,
            "L=" + std::to_string(trace.layers()) + " H=" + std::to_string(trace.heads()) +
                " Q=" + std::to_string(trace.queries()) + " T=" + std::to_string(trace.keys()));
        return report;
    }
    add("dimensions", Severity::Ok);

    std::string finite_issue, range_issue, causal_issue, sum_fail, sum_warn;
    for (std::uint32_t l = 0; l < trace.layers(); ++l) {
        for (std::uint32_t h = 0; h < trace.heads(); ++h) {
            for (std::uint32_t q = 0; q < trace.queries(); ++q) {
                auto row = trace.row(l, h, q);
                const std::uint32_t pos = trace.query_position(q);
                double sum = 0.0;
                for (std::uint32_t t = 0; t < row.size(); ++t) {
                    const float w = row[t];
                    if (!std::isfinite(w)) {
                        if (finite_issue.empty()) finite_issue = "non-finite weight at " + row_label(l, h, q);
                        continue;
                    }
                    if ((w < 0.0f || w > 1.0f + kRowSumFail) && range_issue.empty()) {
                        range_issue = "weight " + std::to_string(w) + " at " + row_label(l, h, q) + " t=" + std::to_string(t);
                    }
                    if (t > pos) {
                        if (w != 0.0f && causal_issue.empty()) {
                            causal_issue = "nonzero weight above diagonal at " + row_label(l, h, q) + " t=" + std::to_string(t);
                        }
                    } else {
                        sum += w;
                    }
                }
                const double drift = std::abs(sum - 1.0);
                if (!(drift <= kRowSumFail)) {
                    if (sum_fail.empty()) sum_fail = "row " + row_label(l, h, q) + " sums to " + std::to_string(sum);
                } else if (drift > kRowSumWarn && sum_warn.empty()) {
                    sum_warn = "row " + row_label(l, h, q) + " drifts by " + std::to_string(drift);
                }
            }
        }
    }
    add("finite", finite_issue.empty() ? Severity::Ok : Severity::Failure, finite_issue);
    add("range", range_issue.empty() ? Severity::Ok : Severity::Failure, range_issue);
    add("causality", causal_issue.empty() ? Severity::Ok : Severity::Failure, causal_issue);
    if (!sum_fail.empty()) {
        add("row_sum", Severity::Failure, sum_fail);
    } else {
        add("row_sum", sum_warn.empty() ? Severity::Ok : Severity::Warning, sum_warn);
    }

    const auto& meta = trace.meta();
    std::string spans = span_problem(meta.shots, trace.keys(), "shots");
    if (spans.empty()) spans = span_problem(meta.mandatory, trace.keys(), "mandatory");
    if (spans.empty()) {
        for (const auto& m : meta.mandatory) {
            for (const auto& s : meta.shots) {
                if (m.start < s.end && s.start < m.end) {
                    spans = "mandatory range overlaps a shot";
                }
            }
        }
    }
    add("meta_spans", spans.empty() ? Severity::Ok : Severity::Failure, spans);

    const bool tokens_ok = !meta.tokens.is_array() ? false : (meta.tokens.empty() || meta.tokens.size() == trace.keys());
    add("meta_tokens", tokens_ok ? Severity::Ok : Severity::Failure,
        tokens_ok ? "" : "sidecar lists " + std::to_string(meta.tokens.size()) + " tokens for T=" + std::to_string(trace.keys()));
    return report;
}

}  // namespace kvlab::traceio
