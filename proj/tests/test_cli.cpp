// Copyright (C) 2026 kvlab authors
// SPDX-License-Identifier: Apache-2.0

#include <sys/wait.h>

#include <cstdlib>

#include "doctest.h"
#include "json.hpp"
#include "testing.hpp"

namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
    const std::string cmd = std::string(KVLAB_CLI) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

}  // namespace

TEST_CASE("trace, compress, analyze") {
    const auto dir = kvtest::scratch_dir("cli_flow");
    const auto trace = dir / "t.kvtr";
    CHECK(run("trace --prompt 'Q\n1+1=2\n2+2=4\n3+3=' --marker '\n' --layers 2 --out " + q(trace)) == 0);
    CHECK(fs::exists(trace));
    CHECK(fs::exists(dir / "t.kvtr.meta.json"));

    CHECK(run("compress --trace " + q(trace) + " --policy ShotKV --r-p 0.6 --out " + q(dir / "keep.json")) == 0);
    const auto kept = nlohmann::json::parse(kvtest::read_file(dir / "keep.json"));
    CHECK(kept["retained"]["segment"] == "prefill");
    CHECK(kept["policy"]["kind"] == "ShotKV");

    CHECK(run("compress --trace " + q(trace) + " --policy SnapKV --ratio 0.5 --obs-window 4 --out " + q(dir / "snap.json")) == 0);
    CHECK(run("analyze --trace " + q(trace) + " --exclude-sinks 4 --coverage-at 0.2 --csv " + q(dir / "c.csv") +
              " --heatmap " + q(dir / "h.pgm") + " --validate") == 0);
    CHECK(kvtest::read_file(dir / "c.csv").rfind("p,mass\n", 0) == 0);
    CHECK(kvtest::read_file(dir / "h.pgm").rfind("P5\n", 0) == 0);
}

TEST_CASE("exit codes") {
    const auto dir = kvtest::scratch_dir("cli_codes");
    CHECK(run("analyze --trace " + q(dir / "missing.kvtr")) == 2);
    std::ofstream(dir / "junk.kvtr") << "not a trace at all, definitely";
    CHECK(run("analyze --trace " + q(dir / "junk.kvtr")) == 2);
    CHECK(run("trace --prompt abc --out " + q(dir / "t.kvtr")) == 0);
    CHECK(run("compress --trace " + q(dir / "t.kvtr") + " --ratio 1.5") == 1);
    CHECK(run("compress --trace " + q(dir / "t.kvtr") + " --policy LRU") == 1);
    CHECK(run("--no-such-flag") == 1);
    CHECK(run("sweep") == 1);
    CHECK(run("--help") == 0);
}

TEST_CASE("deltap and plot") {
    const auto dir = kvtest::scratch_dir("cli_deltap");
    std::ofstream(dir / "scores.csv") << "label,value\nFullKV,0.7945\nShotKV,0.5143\n";
    CHECK(run("deltap --scores " + q(dir / "scores.csv") + " --out " + q(dir / "d.csv")) == 0);
    CHECK(kvtest::read_file(dir / "d.csv").find("ShotKV,0.5143,-0.352675") != std::string::npos);
    CHECK(run("deltap --scores " + q(dir / "scores.csv") + " --base H2O") == 1);

    std::ofstream(dir / "s.csv") << "policy,ratio,r_p,r_d,kl,top1_match,max_abs,retained_prefill,retained_decoding,wall_ms\n"
                                 << "FullKV,0.5,,,0,1,0,10,5,0.010\nH2O,0.5,,,0.2,0.5,1,5,2,0.020\n";
    CHECK(run("plot --csv " + q(dir / "s.csv") + " --out " + q(dir / "s.svg") + " --metric top1_match") == 0);
    CHECK(fs::exists(dir / "s.svg"));
    std::ofstream(dir / "bad.csv") << "x,y\n";
    CHECK(run("plot --csv " + q(dir / "bad.csv") + " --out " + q(dir / "bad.svg")) == 2);
}

TEST_CASE("sweep and bench from a config") {
    const auto dir = kvtest::scratch_dir("cli_sweep");
    std::ofstream(dir / "exp.json") << R"({"model": {"layers": 1, "heads": 2, "head_dim": 8}, "seed": 1,
        "prompt": "#\n1+1=2\n2+3=5\n4+4=", "segmentation": {"marker": "\n"},
        "policies": ["FullKV", "ShotKV"], "ratios": [1.0, 0.5], "max_new": 4})";
    CHECK(run("--config " + q(dir / "exp.json") + " --out-dir " + q(dir / "out") + " sweep") == 0);
    CHECK(fs::exists(dir / "out" / "sweep.csv"));
    CHECK(fs::exists(dir / "out" / "sweep.svg"));
    CHECK(run("--config " + q(dir / "exp.json") + " --out-dir " + q(dir / "out") + " bench --reps 100") == 0);
    CHECK(kvtest::read_file(dir / "out" / "bench.csv").find("ShotKV,") != std::string::npos);
}
