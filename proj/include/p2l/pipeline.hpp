#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "p2l/eval.hpp"
#include "p2l/flow.hpp"
#include "p2l/policy.hpp"
#include "p2l/synth.hpp"

namespace p2l {

enum class RewardSource { Flow, RawGuidance };

struct PipelineConfig {
    GenerationConfig gen;
    PpoConfig ppo;
    std::size_t mine_generations = 3;
    std::size_t max_positives = 2000; // deterministic downsample cap for D_p
    std::size_t eval_trials = 5;
    RewardSource reward_source = RewardSource::Flow;
    bool verbose = false;
    // invoked after each round's mining pass (the runner persists D_p here)
    std::function<void(std::size_t round, const std::vector<PositiveSample>&, const MiningStats&)> on_mined;
};

struct RoundOutcome {
    std::vector<eval::MetricReport> reports; // rounds + 1 entries
    std::vector<MiningStats> mining;
    std::vector<double> flow_final_loss;
    std::size_t dropped_episodes = 0;
};

// Mines positives with the current policy against the raw guidance scorer.
std::vector<PositiveSample> mine_with_policy(const synth::TaskSpec& spec, const Vocabulary& vocab,
                                             const std::vector<synth::TaskItem>& items, const PolicyModel& policy,
                                             const GuidanceModel& guidance, const GenerationConfig& gen,
                                             std::size_t generations, std::uint64_t seed, MiningStats* stats);

// The alternating schedule: per round, (1) mine positives with the current
// policy, (2) train the flow on D_p, (3) PPO-train the policy with
// flow-generated (or raw-guidance) per-sentence rewards; a report is appended
// per round plus the round-0 baseline.
RoundOutcome run_rounds(const synth::TaskSpec& spec, const Vocabulary& vocab, const synth::Dataset& dataset,
                        PolicyModel& policy, const GuidanceModel& guidance, FlowModel& flow,
                        const PipelineConfig& cfg, std::uint64_t master_seed, const std::string* csv_path = nullptr);

} // namespace p2l
