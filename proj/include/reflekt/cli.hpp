#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "reflekt/evaluation.hpp"

namespace reflekt::cli {

enum ExitCode { ExitOk = 0, ExitUsage = 1, ExitBoundViolation = 2, ExitRuntime = 3 };

// An upstream artifact that a command depends on is missing from the output directory.
struct DependencyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Effective run configuration. Every field has a default except the seeds and output_dir, which a
// command must find in the config when it needs them.
struct RunConfig {
    // domain
    std::vector<double> lows = {0.0};
    std::vector<double> highs = {1.0};
    int modes = 256;
    // diffusivity: "constant" (f = c) or "cosine" (f_i = scale_i (1 + amplitude_i cos(pi u_i)), u_i in [0, 1])
    std::string diffusivity = "constant";
    double diffusivity_c = 1.0;
    std::vector<double> cosine_scale;
    std::vector<double> cosine_amplitude;
    // p0: "uniform", "single_mode" or "synthetic"
    std::string p0_kind = "single_mode";
    int p0_mode = 1;
    double p0_amplitude = 0.5;
    double p0_decay = 2.0;
    int p0_s = 2;
    double p0_beta = 1.0;
    // schedule; positive T_lo / T_hi replace the formulas
    double n = 4096;
    double c_lo = 0.1;
    double T_lo = 0.0;
    double T_hi = 0.0;
    // sde
    double dt = 1e-4;
    double T = 1.0;
    int paths = 1000;
    int record_stride = 0;
    int samples = 10000;
    int table_space_nodes = -1;
    int table_time_nodes = 256;
    // training
    std::vector<int> hidden = {64, 64};
    TrainSchedule schedule;
    int draws_per_point = 8;
    std::string time_sampling = "log_uniform";
    double validation_fraction = 0.25;
    double clamp_C = 0.0;  // 0 selects 4 / alpha sup p0
    // nets
    std::string score = "exact";  // score source: "exact", "network" or "trained"
    std::string primitives = "network";
    int ell = -1;
    int N = -1;  // -1 selects the schedule's N
    // evaluation
    FokkerPlanckConfig fp;
    int bins = 0;
    int resamples = 200;
    std::vector<double> rate_ns = {512, 1024, 2048, 4096, 8192};
    int rate_seeds = 3;
    std::string rate_mode = "exact_network";

    std::map<std::string, std::uint64_t> seeds;
    std::string output_dir;

    // Canonical JSON of the effective configuration (defaults filled in).
    std::string effective_json() const;
    // Named seed; throws ConfigError when the config does not set it.
    std::uint64_t seed(const std::string& name) const;
    const std::string& require_output_dir() const;
};

// Parse a JSON config; overrides are "section.key=value" with value parsed as JSON (else taken as a string).
// Unknown sections or keys are rejected with ConfigError.
RunConfig parse_config(const std::string& text, const std::vector<std::string>& overrides = {});
RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {});
// Documented defaults as a config file.
std::string default_config_json();

struct CommandOptions {
    bool record_timing = false;  // wall-clock fields are written as 0 otherwise, keeping outputs byte-identical
};

int cmd_simulate(const RunConfig& cfg, const CommandOptions& opt = {});
int cmd_train(const RunConfig& cfg, const CommandOptions& opt = {});
int cmd_generate(const RunConfig& cfg, const CommandOptions& opt = {});
int cmd_evaluate(const RunConfig& cfg, const CommandOptions& opt = {});
int cmd_rate_study(const RunConfig& cfg, const CommandOptions& opt = {});

struct BuildNetParams {
    std::string kind;  // mult, reciprocal, cap, chebyshev, hN, score
    int m = -1;
    double C = 1.0;
    int k_lo = -1, k_hi = -1;
    int k = -1, i = 0, ell3 = -1;
    std::string config_path;  // hN and score
    std::vector<std::string> overrides;
    std::string out;  // network file; the audit goes next to it as <stem>.audit.json
    int points = 10000;
    std::uint64_t seed = 1;
};
int cmd_build_net(const BuildNetParams& p);

struct VerifyParams {
    std::string net_path;
    std::string csv_path;  // empty writes next to the network as <stem>.verify.csv
    int points = 10000;
    std::uint64_t seed = 1;
};
int cmd_verify(const VerifyParams& p);

struct SweepRow {
    std::string region;
    double measured = 0.0;
    double bound = 0.0;
    bool pass = false;
};
std::string sweep_csv(const std::vector<SweepRow>& rows);

std::string audit_path_for(const std::string& net_path);
std::string sha256_file(const std::string& path);
std::string code_version();

}  // namespace reflekt::cli
