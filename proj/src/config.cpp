#include "p2l/config.hpp"

#include <fstream>
#include <sstream>

#include "p2l/errors.hpp"

namespace p2l {

using nlohmann::json;

nlohmann::json default_config_json() {
    return json{
        {"master_seed", 1},
        {"out_dir", "runs/default"},
        {"task",
         {{"decision_count", 5},
          {"n_features", 4},
          {"feature_arity", 3},
          {"rule_weights", {1, 2, 3, 4}},
          {"rule_offset", 0},
          {"blind_spot_rate", 0.2},
          {"train_size", 2000},
          {"eval_size", 500},
          {"renderer", "multiple_choice"},
          {"corpus_strings_per_item", 3},
          {"ctx_scramble_rate", 1.0},
          {"full_clue_rate", 0.5},
          {"seed", 0}}},
        {"guidance",
         {{"layers", 2},
          {"d_model", 24},
          {"d_k", 24},
          {"heads", 1},
          {"n_max", 96},
          {"d_ff", 96},
          {"epochs", 10},
          {"lr", 1e-3},
          {"batch", 16}}},
        {"policy",
         {{"layers", 2},
          {"d_model", 24},
          {"d_k", 24},
          {"heads", 1},
          {"n_max", 96},
          {"d_ff", 96},
          {"init",
           {{"epochs", 8}, {"lr", 1e-3}, {"batch", 16}, {"clue_noise", 0.45}, {"clue_drop", 0.25}}}}},
        {"flow",
         {{"pe_dim", 0},
          {"proj_hidden", 0},
          {"sigma_z", 1.0},
          {"ode_steps", 10},
          {"epochs", 100},
          {"lr", 2e-4},
          {"batch", 128},
          {"sample_target", false},
          {"reinit_per_round", false}}},
        {"generation", {{"temperature", 0.7}, {"max_sentences", 5}, {"max_tokens_per_sentence", 8}}},
        {"ppo",
         {{"clip", 0.2},
          {"gamma", 1.0},
          {"gae_lambda", 0.95},
          {"kl_beta", 0.02},
          {"entropy_coef", 0.01},
          {"value_coef", 0.5},
          {"lr", 2e-5},
          {"epochs_per_round", 10},
          {"episodes_per_iter", 64},
          {"update_epochs", 2},
          {"minibatch", 16},
          {"rounds", 2},
          {"spread_rewards_uniform", false},
          {"normalize_advantages", true}}},
        {"mining", {{"generations", 3}, {"max_positives", 2000}}},
        {"eval", {{"trials", 5}}},
        {"reward_source", "flow"},
        {"stages",
         {{"gen_data", true}, {"train_guidance", true}, {"policy_init", true}, {"rounds", true}, {"eval", true}}},
    };
}

namespace {

// same JSON "kind" up to int/float interchange
bool type_compatible(const json& a, const json& b) {
    if (a.is_number() && b.is_number()) return true;
    return a.type() == b.type();
}

void merge_into(json& base, const json& overlay, const std::string& prefix, std::vector<std::string>& problems) {
    for (auto it = overlay.begin(); it != overlay.end(); ++it) {
        const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (!base.contains(it.key())) {
            problems.push_back("unknown key: " + path);
            continue;
        }
        json& slot = base[it.key()];
        if (slot.is_object() && it->is_object()) {
            merge_into(slot, *it, path, problems);
        } else if (!type_compatible(slot, *it)) {
            problems.push_back("type mismatch at " + path + ": expected " + std::string(slot.type_name()) +
                               ", got " + std::string(it->type_name()));
        } else {
            slot = *it;
        }
    }
}

json parse_override_value(const std::string& text) {
    // try JSON first (numbers, bools, arrays), fall back to a bare string
    try {
        return json::parse(text);
    } catch (const json::exception&) {
        return json(text);
    }
}

void apply_override(json& base, const std::string& spec, std::vector<std::string>& problems) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos) {
        problems.push_back("override missing '=': " + spec);
        return;
    }
    const std::string path = spec.substr(0, eq);
    const json value = parse_override_value(spec.substr(eq + 1));

    std::vector<std::string> keys;
    std::stringstream ss(path);
    std::string part;
    while (std::getline(ss, part, '.')) keys.push_back(part);
    json* slot = &base;
    for (std::size_t i = 0; i < keys.size(); ++i) {
        if (!slot->is_object() || !slot->contains(keys[i])) {
            problems.push_back("unknown key: " + path);
            return;
        }
        slot = &(*slot)[keys[i]];
        if (i + 1 == keys.size()) {
            if (!type_compatible(*slot, value)) {
                problems.push_back("type mismatch at " + path + ": expected " + std::string(slot->type_name()) +
                                   ", got " + std::string(value.type_name()));
                return;
            }
            *slot = value;
        }
    }
}

TransformerConfig net_from(const json& j, std::size_t vocab) {
    TransformerConfig c;
    c.layers = j.at("layers").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.d_k = j.at("d_k").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.n_max = j.at("n_max").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.vocab = vocab;
    return c;
}

} // namespace

void ExperimentConfig::validate() const {
    task.validate();
    guidance.net.validate();
    policy_net.validate();
    generation.validate();
    ppo.validate();
    const std::size_t budget = generation.max_sentences * (generation.max_tokens_per_sentence + 1) + 1;
    const std::size_t prompt = task.renderer == synth::Renderer::MultipleChoice
                                   ? 1 + task.n_features + 1 + task.decision_count + 1
                                   : 4 + task.n_features + 1;
    if (prompt + budget > policy_net.n_max)
        throw ConfigError("config: policy n_max too small for the context plus generation budget");
    // worst-case guidance prompt: context + max sentences + stem + decision
    const std::size_t worst = prompt - 1 + generation.max_sentences * (generation.max_tokens_per_sentence + 1) + 3;
    if (worst > guidance.net.n_max)
        throw ConfigError("config: guidance n_max too small for full-explanation prompts");
}

ExperimentConfig parse_config(const std::string* path, const std::vector<std::string>& overrides) {
    json merged = default_config_json();
    std::vector<std::string> problems;
    if (path != nullptr) {
        std::ifstream in(*path);
        if (!in) throw ConfigError("config: cannot open " + *path);
        json file;
        try {
            file = json::parse(in);
        } catch (const json::exception& e) {
            throw ConfigError("config: malformed JSON in " + *path + ": " + e.what());
        }
        merge_into(merged, file, "", problems);
    }
    for (const auto& ov : overrides) apply_override(merged, ov, problems);
    if (!problems.empty()) {
        std::string msg = "config validation failed:";
        for (const auto& p : problems) msg += "\n  - " + p;
        throw ConfigError(msg);
    }

    ExperimentConfig cfg;
    cfg.master_seed = merged.at("master_seed").get<std::uint64_t>();
    cfg.out_dir = merged.at("out_dir").get<std::string>();

    const json& t = merged.at("task");
    cfg.task.decision_count = t.at("decision_count").get<std::size_t>();
    cfg.task.n_features = t.at("n_features").get<std::size_t>();
    cfg.task.feature_arity = t.at("feature_arity").get<std::size_t>();
    cfg.task.rule_weights = t.at("rule_weights").get<std::vector<int>>();
    cfg.task.rule_offset = t.at("rule_offset").get<int>();
    cfg.task.blind_spot_rate = t.at("blind_spot_rate").get<double>();
    cfg.task.train_size = t.at("train_size").get<std::size_t>();
    cfg.task.eval_size = t.at("eval_size").get<std::size_t>();
    const std::string renderer = t.at("renderer").get<std::string>();
    if (renderer == "multiple_choice")
        cfg.task.renderer = synth::Renderer::MultipleChoice;
    else if (renderer == "trajectory")
        cfg.task.renderer = synth::Renderer::Trajectory;
    else
        throw ConfigError("config: unknown renderer '" + renderer + "'");
    cfg.task.corpus_strings_per_item = t.at("corpus_strings_per_item").get<std::size_t>();
    cfg.task.ctx_scramble_rate = t.at("ctx_scramble_rate").get<double>();
    cfg.task.full_clue_rate = t.at("full_clue_rate").get<double>();
    cfg.task.seed = t.at("seed").get<std::uint64_t>();
    if (cfg.task.seed == 0) cfg.task.seed = stage_seed(cfg, Stage::GenData);

    const std::size_t vocab = synth::build_vocabulary(cfg.task).size();
    const json& g = merged.at("guidance");
    cfg.guidance.net = net_from(g, vocab);
    cfg.guidance.train_epochs = g.at("epochs").get<std::size_t>();
    cfg.guidance.lr = g.at("lr").get<double>();
    cfg.guidance.batch_size = g.at("batch").get<std::size_t>();

    const json& p = merged.at("policy");
    cfg.policy_net = net_from(p, vocab);
    const json& pi = p.at("init");
    cfg.policy_init.epochs = pi.at("epochs").get<std::size_t>();
    cfg.policy_init.lr = pi.at("lr").get<double>();
    cfg.policy_init.batch = pi.at("batch").get<std::size_t>();
    cfg.policy_init.clue_noise = pi.at("clue_noise").get<double>();
    cfg.policy_init.clue_drop = pi.at("clue_drop").get<double>();

    const json& f = merged.at("flow");
    cfg.flow.n_decisions = cfg.task.decision_count;
    cfg.flow.d_model = cfg.guidance.net.d_model;
    cfg.flow.pe_dim = f.at("pe_dim").get<std::size_t>();
    cfg.flow.proj_hidden = f.at("proj_hidden").get<std::size_t>();
    cfg.flow.sigma_z = f.at("sigma_z").get<double>();
    cfg.flow.ode_steps = f.at("ode_steps").get<std::size_t>();
    cfg.flow.train_epochs = f.at("epochs").get<std::size_t>();
    cfg.flow.lr = f.at("lr").get<double>();
    cfg.flow.batch_size = f.at("batch").get<std::size_t>();
    cfg.flow.sample_target = f.at("sample_target").get<bool>();
    cfg.flow.reinit_per_round = f.at("reinit_per_round").get<bool>();

    const json& gen = merged.at("generation");
    cfg.generation.temperature = gen.at("temperature").get<double>();
    cfg.generation.max_sentences = gen.at("max_sentences").get<std::size_t>();
    cfg.generation.max_tokens_per_sentence = gen.at("max_tokens_per_sentence").get<std::size_t>();

    const json& ppo = merged.at("ppo");
    cfg.ppo.clip = ppo.at("clip").get<double>();
    cfg.ppo.gamma = ppo.at("gamma").get<double>();
    cfg.ppo.gae_lambda = ppo.at("gae_lambda").get<double>();
    cfg.ppo.kl_beta = ppo.at("kl_beta").get<double>();
    cfg.ppo.entropy_coef = ppo.at("entropy_coef").get<double>();
    cfg.ppo.value_coef = ppo.at("value_coef").get<double>();
    cfg.ppo.lr = ppo.at("lr").get<double>();
    cfg.ppo.epochs_per_round = ppo.at("epochs_per_round").get<std::size_t>();
    cfg.ppo.episodes_per_iter = ppo.at("episodes_per_iter").get<std::size_t>();
    cfg.ppo.update_epochs = ppo.at("update_epochs").get<std::size_t>();
    cfg.ppo.minibatch = ppo.at("minibatch").get<std::size_t>();
    cfg.ppo.rounds = ppo.at("rounds").get<std::size_t>();
    cfg.ppo.spread_rewards_uniform = ppo.at("spread_rewards_uniform").get<bool>();
    cfg.ppo.normalize_advantages = ppo.at("normalize_advantages").get<bool>();

    cfg.mine_generations = merged.at("mining").at("generations").get<std::size_t>();
    cfg.max_positives = merged.at("mining").at("max_positives").get<std::size_t>();
    cfg.eval_trials = merged.at("eval").at("trials").get<std::size_t>();

    const std::string rs = merged.at("reward_source").get<std::string>();
    if (rs == "flow")
        cfg.reward_source = RewardSource::Flow;
    else if (rs == "guidance")
        cfg.reward_source = RewardSource::RawGuidance;
    else
        throw ConfigError("config: unknown reward_source '" + rs + "'");

    const json& st = merged.at("stages");
    cfg.stages.gen_data = st.at("gen_data").get<bool>();
    cfg.stages.train_guidance = st.at("train_guidance").get<bool>();
    cfg.stages.policy_init = st.at("policy_init").get<bool>();
    cfg.stages.rounds = st.at("rounds").get<bool>();
    cfg.stages.eval = st.at("eval").get<bool>();

    cfg.validate();
    return cfg;
}

nlohmann::json config_to_json(const ExperimentConfig& cfg) {
    json j = default_config_json();
    j["master_seed"] = cfg.master_seed;
    j["out_dir"] = cfg.out_dir;
    j["task"]["decision_count"] = cfg.task.decision_count;
    j["task"]["n_features"] = cfg.task.n_features;
    j["task"]["feature_arity"] = cfg.task.feature_arity;
    j["task"]["rule_weights"] = cfg.task.rule_weights;
    j["task"]["rule_offset"] = cfg.task.rule_offset;
    j["task"]["blind_spot_rate"] = cfg.task.blind_spot_rate;
    j["task"]["train_size"] = cfg.task.train_size;
    j["task"]["eval_size"] = cfg.task.eval_size;
    j["task"]["renderer"] = cfg.task.renderer == synth::Renderer::MultipleChoice ? "multiple_choice" : "trajectory";
    j["task"]["corpus_strings_per_item"] = cfg.task.corpus_strings_per_item;
    j["task"]["ctx_scramble_rate"] = cfg.task.ctx_scramble_rate;
    j["task"]["full_clue_rate"] = cfg.task.full_clue_rate;
    j["task"]["seed"] = cfg.task.seed;
    j["guidance"]["layers"] = cfg.guidance.net.layers;
    j["guidance"]["d_model"] = cfg.guidance.net.d_model;
    j["guidance"]["d_k"] = cfg.guidance.net.d_k;
    j["guidance"]["heads"] = cfg.guidance.net.heads;
    j["guidance"]["n_max"] = cfg.guidance.net.n_max;
    j["guidance"]["d_ff"] = cfg.guidance.net.d_ff;
    j["guidance"]["epochs"] = cfg.guidance.train_epochs;
    j["guidance"]["lr"] = cfg.guidance.lr;
    j["guidance"]["batch"] = cfg.guidance.batch_size;
    j["policy"]["layers"] = cfg.policy_net.layers;
    j["policy"]["d_model"] = cfg.policy_net.d_model;
    j["policy"]["d_k"] = cfg.policy_net.d_k;
    j["policy"]["heads"] = cfg.policy_net.heads;
    j["policy"]["n_max"] = cfg.policy_net.n_max;
    j["policy"]["d_ff"] = cfg.policy_net.d_ff;
    j["policy"]["init"]["epochs"] = cfg.policy_init.epochs;
    j["policy"]["init"]["lr"] = cfg.policy_init.lr;
    j["policy"]["init"]["batch"] = cfg.policy_init.batch;
    j["policy"]["init"]["clue_noise"] = cfg.policy_init.clue_noise;
    j["policy"]["init"]["clue_drop"] = cfg.policy_init.clue_drop;
    j["flow"]["pe_dim"] = cfg.flow.pe_dim;
    j["flow"]["proj_hidden"] = cfg.flow.proj_hidden;
    j["flow"]["sigma_z"] = cfg.flow.sigma_z;
    j["flow"]["ode_steps"] = cfg.flow.ode_steps;
    j["flow"]["epochs"] = cfg.flow.train_epochs;
    j["flow"]["lr"] = cfg.flow.lr;
    j["flow"]["batch"] = cfg.flow.batch_size;
    j["flow"]["sample_target"] = cfg.flow.sample_target;
    j["flow"]["reinit_per_round"] = cfg.flow.reinit_per_round;
    j["generation"]["temperature"] = cfg.generation.temperature;
    j["generation"]["max_sentences"] = cfg.generation.max_sentences;
    j["generation"]["max_tokens_per_sentence"] = cfg.generation.max_tokens_per_sentence;
    j["ppo"]["clip"] = cfg.ppo.clip;
    j["ppo"]["gamma"] = cfg.ppo.gamma;
    j["ppo"]["gae_lambda"] = cfg.ppo.gae_lambda;
    j["ppo"]["kl_beta"] = cfg.ppo.kl_beta;
    j["ppo"]["entropy_coef"] = cfg.ppo.entropy_coef;
    j["ppo"]["value_coef"] = cfg.ppo.value_coef;
    j["ppo"]["lr"] = cfg.ppo.lr;
    j["ppo"]["epochs_per_round"] = cfg.ppo.epochs_per_round;
    j["ppo"]["episodes_per_iter"] = cfg.ppo.episodes_per_iter;
    j["ppo"]["update_epochs"] = cfg.ppo.update_epochs;
    j["ppo"]["minibatch"] = cfg.ppo.minibatch;
    j["ppo"]["rounds"] = cfg.ppo.rounds;
    j["ppo"]["spread_rewards_uniform"] = cfg.ppo.spread_rewards_uniform;
    j["ppo"]["normalize_advantages"] = cfg.ppo.normalize_advantages;
    j["mining"]["generations"] = cfg.mine_generations;
    j["mining"]["max_positives"] = cfg.max_positives;
    j["eval"]["trials"] = cfg.eval_trials;
    j["reward_source"] = cfg.reward_source == RewardSource::Flow ? "flow" : "guidance";
    j["stages"]["gen_data"] = cfg.stages.gen_data;
    j["stages"]["train_guidance"] = cfg.stages.train_guidance;
    j["stages"]["policy_init"] = cfg.stages.policy_init;
    j["stages"]["rounds"] = cfg.stages.rounds;
    j["stages"]["eval"] = cfg.stages.eval;
    return j;
}

} // namespace p2l
