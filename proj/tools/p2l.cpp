#include <cstdio>
#include <string>
#include <vector>

#include "p2l/config.hpp"
#include "p2l/runner.hpp"

namespace {

void print_usage() {
    std::printf(
        "Usage: p2l <command> [options]\n"
        "\n"
        "Commands:\n"
        "  gen-data        Generate the task datasets, vocabulary and corpora\n"
        "  train-guidance  Pretrain and freeze the guidance model\n"
        "  mine            Mine positive samples with the current policy\n"
        "  train-flow      Train the rectified flow on mined positives\n"
        "  train-policy    Run the alternating mine/flow/PPO rounds\n"
        "  eval            Evaluate the current checkpoints on the eval split\n"
        "  report          Print the per-round metrics of a finished run\n"
        "  full-run        All stages end to end\n"
        "\n"
        "Options:\n"
        "  --config PATH   JSON config (defaults apply when omitted)\n"
        "  --set KEY=VALUE Override a config field (repeatable, dotted paths)\n"
        "  --out DIR       Output directory (same as --set out_dir=DIR)\n"
        "  --seed U64      Master seed (same as --set master_seed=N)\n"
        "  --steps N       ODE steps (same as --set flow.ode_steps=N)\n"
        "  --verbose       Progress logging on stderr\n"
        "\n"
        "Environment: P2L_THREADS caps within-stage parallelism.\n");
}

} // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        print_usage();
        return 2;
    }
    const std::string command = argv[1];
    if (command == "--help" || command == "-h" || command == "help") {
        print_usage();
        return 0;
    }

    std::string config_path;
    bool have_config = false, verbose = false;
    std::vector<std::string> overrides;
    for (int i = 2; i < argc; ++i) {
        const std::string arg = argv[i];
        auto next = [&](const char* flag) -> std::string {
            if (i + 1 >= argc) {
                std::fprintf(stderr, "p2l: %s requires a value\n", flag);
                std::exit(2);
            }
            return argv[++i];
        };
        if (arg == "--config") {
            config_path = next("--config");
            have_config = true;
        } else if (arg == "--set") {
            overrides.push_back(next("--set"));
        } else if (arg == "--out") {
            overrides.push_back("out_dir=" + next("--out"));
        } else if (arg == "--seed") {
            overrides.push_back("master_seed=" + next("--seed"));
        } else if (arg == "--steps") {
            overrides.push_back("flow.ode_steps=" + next("--steps"));
        } else if (arg == "--verbose") {
            verbose = true;
        } else {
            std::fprintf(stderr, "p2l: unknown option '%s'\n", arg.c_str());
            return 2;
        }
    }

    try {
        const p2l::ExperimentConfig cfg = p2l::parse_config(have_config ? &config_path : nullptr, overrides);
        return p2l::run_command(command, cfg, verbose);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "p2l: %s\n", e.what());
        return 1;
    }
}
