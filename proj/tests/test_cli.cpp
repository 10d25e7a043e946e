#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "reflekt/cli.hpp"

using namespace reflekt;
using namespace reflekt::cli;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::string scratch(const std::string& name) {
    fs::path p = fs::path(::testing::TempDir()) / ("reflekt_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

const char* kSmallRun = R"({
  "domain": {"modes": 64},
  "schedule": {"n": 512},
  "sde": {"samples": 2000, "dt": 1e-3, "paths": 200, "T": 0.2},
  "evaluation": {"fp_cells": 256, "resamples": 50},
  "seeds": {"sde": 3, "generate": 4, "bootstrap": 5}
})";

}  // namespace

TEST(Config, DefaultsAndEffectiveJsonAreStable) {
    RunConfig a = parse_config("{}");
    RunConfig b = parse_config(default_config_json());
    EXPECT_EQ(a.effective_json(), b.effective_json());
    EXPECT_EQ(a.modes, 256);
    EXPECT_EQ(a.score, "exact");
    auto j = nlohmann::json::parse(a.effective_json());
    for (const char* s : {"domain", "diffusivity", "p0", "schedule", "sde", "training", "nets", "evaluation", "seeds",
                          "output_dir"})
        EXPECT_TRUE(j.contains(s)) << s;
}

TEST(Config, RejectsUnknownKeysTypesAndValues) {
    EXPECT_THROW(parse_config(R"({"domian": {}})"), ConfigError);
    EXPECT_THROW(parse_config(R"({"sde": {"dtt": 1e-3}})"), ConfigError);
    EXPECT_THROW(parse_config(R"({"sde": {"paths": 10.5}})"), ConfigError);
    EXPECT_THROW(parse_config(R"({"nets": {"score": "magic"}})"), ConfigError);
    EXPECT_THROW(parse_config(R"({"seeds": {"colour": 1}})"), ConfigError);
    EXPECT_THROW(parse_config(R"({"seeds": {"sde": -1}})"), ConfigError);
    EXPECT_THROW(parse_config(R"({"domain": {"lows": [0, 0], "highs": [1]}})"), ConfigError);
    EXPECT_THROW(parse_config("not json"), ConfigError);
}

TEST(Config, OverridesTakePrecedenceAndAreValidated) {
    RunConfig c = parse_config(R"({"sde": {"dt": 1e-3}, "nets": {"score": "network"}})",
                               {"sde.dt=5e-4", "nets.score=exact", "output_dir=somewhere", "seeds.data=7"});
    EXPECT_DOUBLE_EQ(c.dt, 5e-4);
    EXPECT_EQ(c.score, "exact");
    EXPECT_EQ(c.output_dir, "somewhere");
    EXPECT_EQ(c.seed("data"), 7u);
    EXPECT_THROW(c.seed("train"), ConfigError);
    EXPECT_THROW(parse_config("{}", {"sde.nope=1"}), ConfigError);
    EXPECT_THROW(parse_config("{}", {"a.b.c=1"}), ConfigError);
    EXPECT_THROW(parse_config("{}", {"novalue"}), ConfigError);
}

TEST(Hashing, Sha256KnownVector) {
    const std::string dir = scratch("hash");
    const std::string p = dir + "/abc.txt";
    std::ofstream(p) << "abc";
    EXPECT_EQ(sha256_file(p), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(BuildNet, MultAuditSweepAndDeterministicVerify) {
    const std::string dir = scratch("mult");
    BuildNetParams p;
    p.kind = "mult";
    p.m = 8;
    p.C = 1.0;
    p.out = dir + "/mult.json";
    EXPECT_EQ(cmd_build_net(p), ExitOk);
    auto audit = nlohmann::json::parse(slurp(audit_path_for(p.out)));
    EXPECT_EQ(audit["size"]["L"], 16);
    EXPECT_EQ(audit["stated_size"]["S"], 186);
    EXPECT_TRUE(audit["sweep"]["pass"].get<bool>());

    VerifyParams v;
    v.net_path = p.out;
    v.csv_path = dir + "/a.csv";
    EXPECT_EQ(cmd_verify(v), ExitOk);
    v.csv_path = dir + "/b.csv";
    EXPECT_EQ(cmd_verify(v), ExitOk);
    EXPECT_EQ(slurp(dir + "/a.csv"), slurp(dir + "/b.csv"));
}

TEST(BuildNet, TamperedWeightFailsVerify) {
    const std::string dir = scratch("tamper");
    BuildNetParams p;
    p.kind = "mult";
    p.m = 6;
    p.C = 2.0;
    p.out = dir + "/mult.json";
    ASSERT_EQ(cmd_build_net(p), ExitOk);
    // halve one entry below the layer maximum, which keeps the stored size metadata valid
    auto j = nlohmann::json::parse(slurp(p.out));
    auto& A = j["layers"][3]["A"];
    double top = 0.0;
    for (auto& row : A)
        for (auto& v : row) top = std::max(top, std::abs(v.get<double>()));
    bool done = false;
    for (auto& row : A)
        for (auto& v : row)
            if (!done && v.get<double>() != 0.0 && std::abs(v.get<double>()) < top) {
                v = v.get<double>() * 0.5;
                done = true;
            }
    ASSERT_TRUE(done);
    std::ofstream(p.out) << j.dump();
    VerifyParams v;
    v.net_path = p.out;
    EXPECT_EQ(cmd_verify(v), ExitBoundViolation);
    EXPECT_NE(slurp(dir + "/mult.verify.csv").find(",0\n"), std::string::npos);
}

TEST(BuildNet, MissingParameterAndKind) {
    BuildNetParams p;
    p.kind = "mult";
    EXPECT_THROW(cmd_build_net(p), ConfigError);
    p.kind = "teapot";
    EXPECT_THROW(cmd_build_net(p), ConfigError);
    VerifyParams v;
    v.net_path = scratch("none") + "/missing.json";
    EXPECT_THROW(cmd_verify(v), DependencyError);
}

TEST(BuildNet, ScoreDescriptorSupBound) {
    const std::string dir = scratch("score");
    BuildNetParams p;
    p.kind = "score";
    p.overrides = {"domain.modes=32", "schedule.n=256"};
    p.out = dir + "/score.json";
    p.points = 400;
    EXPECT_EQ(cmd_build_net(p), ExitOk);
    VerifyParams v;
    v.net_path = p.out;
    v.points = 400;
    EXPECT_EQ(cmd_verify(v), ExitOk);
}

TEST(Pipeline, DependencyErrorsAndDeterministicOutputs) {
    const std::string dir = scratch("pipe");
    RunConfig cfg = parse_config(kSmallRun, {"output_dir=" + dir});
    EXPECT_THROW(cmd_evaluate(cfg), DependencyError);
    EXPECT_THROW(cmd_generate(parse_config(kSmallRun, {"output_dir=" + dir, "nets.score=trained"})), DependencyError);
    EXPECT_THROW(cmd_generate(parse_config(kSmallRun, {"output_dir=" + dir, "seeds.generate=null"})), ConfigError);

    ASSERT_EQ(cmd_generate(cfg), ExitOk);
    const std::string first = slurp(dir + "/samples.csv");
    ASSERT_EQ(cmd_generate(cfg), ExitOk);
    EXPECT_EQ(first, slurp(dir + "/samples.csv"));
    RunConfig other = parse_config(kSmallRun, {"output_dir=" + dir, "seeds.generate=9"});
    ASSERT_EQ(cmd_generate(other), ExitOk);
    EXPECT_NE(first, slurp(dir + "/samples.csv"));
    ASSERT_EQ(cmd_generate(cfg), ExitOk);

    // exact-score ablation reproduces the ergodic bound check
    EXPECT_EQ(cmd_evaluate(cfg), ExitOk);
    const std::string report = slurp(dir + "/report.json");
    EXPECT_EQ(cmd_evaluate(cfg), ExitOk);
    EXPECT_EQ(report, slurp(dir + "/report.json"));
    auto r = nlohmann::json::parse(report);
    EXPECT_TRUE(r["ergodic_bound_holds"].get<bool>());
    EXPECT_LE(r["error_report"]["tv_ergodic"].get<double>(), r["error_report"]["ergodic_bound"].get<double>());

    ASSERT_EQ(cmd_simulate(cfg), ExitOk);
    auto m = nlohmann::json::parse(slurp(dir + "/manifest.json"));
    for (const char* c : {"simulate", "generate", "evaluate"}) {
        ASSERT_TRUE(m["commands"].contains(c)) << c;
        EXPECT_EQ(m["commands"][c]["code_version"], code_version());
        for (const auto& o : m["commands"][c]["outputs"])
            EXPECT_EQ(o["sha256"], sha256_file(dir + "/" + o["path"].get<std::string>())) << o["path"];
    }
    EXPECT_EQ(m["commands"]["generate"]["seeds"]["generate"], 4);
}
