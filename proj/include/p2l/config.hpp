#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "p2l/flow.hpp"
#include "p2l/guidance.hpp"
#include "p2l/pipeline.hpp"
#include "p2l/policy.hpp"
#include "p2l/synth.hpp"

namespace p2l {

struct PolicyInitConfig {
    std::size_t epochs = 8;
    double lr = 1e-3;
    std::size_t batch = 16;
    double clue_noise = 0.45;
    double clue_drop = 0.25;
};

struct StageToggles {
    bool gen_data = true;
    bool train_guidance = true;
    bool policy_init = true;
    bool rounds = true;
    bool eval = true;
};

// Everything one experiment needs, stage seeds included. The master seed
// derives per-stage seeds as derive_seed(master, stage_index); stage indices
// are fixed: 0 gen-data, 1 train-guidance, 2 policy-init, 3 rounds, 4 eval.
struct ExperimentConfig {
    std::uint64_t master_seed = 1;
    std::string out_dir = "runs/default";
    synth::TaskSpec task;                 // task.seed == 0 means "derive from master"
    GuidanceConfig guidance;              // net dims + pretraining settings
    TransformerConfig policy_net;
    PolicyInitConfig policy_init;
    FlowConfig flow;
    GenerationConfig generation;
    PpoConfig ppo;
    std::size_t mine_generations = 3;
    std::size_t max_positives = 2000;
    std::size_t eval_trials = 5;
    RewardSource reward_source = RewardSource::Flow;
    StageToggles stages;

    void validate() const;
};

enum class Stage : std::uint64_t { GenData = 0, TrainGuidance = 1, PolicyInit = 2, Rounds = 3, Eval = 4 };

inline std::uint64_t stage_seed(const ExperimentConfig& cfg, Stage stage) {
    return derive_seed(cfg.master_seed, static_cast<std::uint64_t>(stage));
}

// The documented default table, as JSON (committed copy lives in
// configs/default.json).
nlohmann::json default_config_json();

// Loads (file overlays defaults), applies repeatable `key.path=value`
// overrides, validates. Unknown keys and type mismatches are all collected
// into one ConfigError.
ExperimentConfig parse_config(const std::string* path, const std::vector<std::string>& overrides);

nlohmann::json config_to_json(const ExperimentConfig& cfg);

} // namespace p2l
