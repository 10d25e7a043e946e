#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <omp.h>

#include "CLI11.hpp"
#include "reflekt/cli.hpp"

using namespace reflekt;
using namespace reflekt::cli;

int main(int argc, char** argv) {
    CLI::App app{"reflekt: denoising reflected diffusion models on boxes"};
    app.require_subcommand(0, 1);
    bool print_defaults = false;
    app.add_flag("--print-defaults", print_defaults, "Print the default config and exit");
    app.set_version_flag("--version", code_version());

    BuildNetParams bn;
    auto* build = app.add_subcommand("build-net", "Build a constructive network and write it with its audit");
    build->add_option("kind", bn.kind, "mult, reciprocal, cap, chebyshev, hN or score")->required();
    build->add_option("--m", bn.m, "Accuracy bits (mult, reciprocal, cap)");
    build->add_option("--C", bn.C, "Range of the second factor (mult)");
    build->add_option("--k-lo", bn.k_lo, "Reciprocal range lower exponent");
    build->add_option("--k-hi", bn.k_hi, "Reciprocal range upper exponent");
    build->add_option("--k", bn.k, "Chebyshev degree");
    build->add_option("--i", bn.i, "Chebyshev node index");
    build->add_option("--ell3", bn.ell3, "Chebyshev product accuracy bits");
    build->add_option("--config", bn.config_path, "Run config (hN, score)");
    build->add_option("--set", bn.overrides, "Config override section.key=value (hN, score)");
    build->add_option("--out", bn.out, "Network file (default <kind>.json)");
    build->add_option("--points", bn.points, "Bound sweep points")->check(CLI::PositiveNumber);
    build->add_option("--seed", bn.seed, "Bound sweep seed");

    VerifyParams vp;
    auto* verify = app.add_subcommand("verify", "Sweep a network against its stated bound");
    verify->add_option("net", vp.net_path, "Network file written by build-net")->required();
    verify->add_option("--csv", vp.csv_path, "Output CSV (default <stem>.verify.csv)");
    verify->add_option("--points", vp.points, "Sweep points")->check(CLI::PositiveNumber);
    verify->add_option("--seed", vp.seed, "Sweep seed");

    std::string config_path;
    std::vector<std::string> overrides;
    CommandOptions opt;
    auto pipeline = [&](const std::string& name, const std::string& help) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("--config", config_path, "Run config (JSON)")->required();
        sub->add_option("--set", overrides, "Override section.key=value; applied after the config file");
        sub->add_flag("--record-timing", opt.record_timing, "Write wall-clock times (outputs are then not byte-stable)");
        return sub;
    };
    auto* simulate_cmd = pipeline("simulate", "Simulate the forward reflected SDE from p0");
    auto* train_cmd = pipeline("train", "Sample data from p0 and train a score network by denoising score matching");
    auto* generate_cmd = pipeline("generate", "Run the backward SDE from the uniform law");
    auto* evaluate_cmd = pipeline("evaluate", "Error decomposition of the generated law");
    auto* rate_cmd = pipeline("rate-study", "Total error against n over seeds with a slope fit");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? ExitOk : ExitUsage;
    }
    if (print_defaults) {
        std::cout << default_config_json();
        return ExitOk;
    }
    if (app.get_subcommands().empty()) {
        std::cerr << app.help();
        return ExitUsage;
    }
    omp_set_num_threads(worker_count());

    try {
        if (build->parsed()) return cmd_build_net(bn);
        if (verify->parsed()) return cmd_verify(vp);
        RunConfig cfg = load_config(config_path, overrides);
        if (simulate_cmd->parsed()) return cmd_simulate(cfg, opt);
        if (train_cmd->parsed()) return cmd_train(cfg, opt);
        if (generate_cmd->parsed()) return cmd_generate(cfg, opt);
        if (evaluate_cmd->parsed()) return cmd_evaluate(cfg, opt);
        if (rate_cmd->parsed()) return cmd_rate_study(cfg, opt);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        std::cerr << "run 'reflekt " << (app.get_subcommands().empty() ? "" : app.get_subcommands()[0]->get_name())
                  << " --help' for usage\n";
        return ExitUsage;
    } catch (const DependencyError& e) {
        std::cerr << "dependency error: " << e.what() << "\n";
        return ExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "runtime failure: " << e.what() << "\n";
        return ExitRuntime;
    }
    return ExitUsage;
}
