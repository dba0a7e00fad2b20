#pragma once

#include <string>

#include "p2l/config.hpp"

namespace p2l {

// Executes one subcommand: gen-data, train-guidance, mine, train-flow,
// train-policy, eval, report or full-run. Artifacts land under cfg.out_dir
// together with a machine-readable run manifest. Returns a process exit code.
int run_command(const std::string& command, const ExperimentConfig& cfg, bool verbose);

} // namespace p2l
