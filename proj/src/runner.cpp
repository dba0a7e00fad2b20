#include "p2l/runner.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "json.hpp"
#include "p2l/checkpoint.hpp"
#include "p2l/errors.hpp"
#include "p2l/eval.hpp"
#include "p2l/pipeline.hpp"

namespace p2l {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct RunContext {
    const ExperimentConfig& cfg;
    bool verbose;
    fs::path out;
    Vocabulary vocab;
    json manifest;

    explicit RunContext(const ExperimentConfig& c, bool v) : cfg(c), verbose(v), out(c.out_dir) {
        fs::create_directories(out);
        vocab = synth::build_vocabulary(c.task);
        manifest["version"] = kVersion;
        manifest["master_seed"] = std::to_string(c.master_seed);
        manifest["config"] = config_to_json(c);
        manifest["stage_seeds"] = {
            {"gen_data", std::to_string(stage_seed(c, Stage::GenData))},
            {"train_guidance", std::to_string(stage_seed(c, Stage::TrainGuidance))},
            {"policy_init", std::to_string(stage_seed(c, Stage::PolicyInit))},
            {"rounds", std::to_string(stage_seed(c, Stage::Rounds))},
            {"eval", std::to_string(stage_seed(c, Stage::Eval))},
        };
        manifest["artifacts"] = json::array();
        manifest["durations_s"] = json::object();
    }

    std::string path(const std::string& name) const { return (out / name).string(); }

    void record_artifact(const std::string& name) {
        json a;
        a["path"] = name;
        a["checksum"] = file_checksum_hex(path(name));
        a["bytes"] = fs::file_size(path(name));
        manifest["artifacts"].push_back(std::move(a));
    }

    void record_duration(const std::string& stage, double secs) { manifest["durations_s"][stage] = secs; }

    void flush_manifest(const std::string& command) {
        manifest["command"] = command;
        std::ofstream out_file(path("run_manifest.json"));
        out_file << manifest.dump(2) << "\n";
    }

    PolicyModel::TokenIds token_ids() const {
        return {vocab.pad_id(), vocab.delimiter_id(), vocab.eot_id()};
    }
};

void write_jsonl(const std::string& path, const std::vector<json>& lines) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("runner: cannot write " + path);
    for (const auto& l : lines) out << l.dump() << "\n";
}

std::vector<json> read_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("runner: cannot read " + path);
    std::vector<json> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        lines.push_back(json::parse(line));
    }
    return lines;
}

std::vector<std::vector<int>> read_corpus(const RunContext& ctx, const std::string& name) {
    std::vector<std::vector<int>> corpus;
    for (const auto& l : read_jsonl(ctx.path(name)))
        corpus.push_back(ctx.vocab.encode(l.get<std::vector<std::string>>()));
    return corpus;
}

synth::Dataset load_dataset(const RunContext& ctx) {
    synth::Dataset ds;
    auto load_split = [&](const std::string& name, std::vector<synth::TaskItem>& split) {
        for (const auto& l : read_jsonl(ctx.path(name))) {
            synth::TaskItem item;
            item.features = l.at("features").get<std::vector<int>>();
            item.context = ctx.vocab.encode(l.at("context").get<std::vector<std::string>>());
            item.decision = l.at("decision").get<int>();
            item.pattern = l.at("pattern").get<std::size_t>();
            split.push_back(std::move(item));
        }
    };
    load_split("dataset_train.jsonl", ds.train);
    load_split("dataset_eval.jsonl", ds.eval);
    return ds;
}

// ---------------------------------------------------------------------------
// stages
// ---------------------------------------------------------------------------

void stage_gen_data(RunContext& ctx) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto& task = ctx.cfg.task;

    json vocab_json;
    vocab_json["tokens"] = ctx.vocab.tokens();
    vocab_json["pad"] = "<pad>";
    vocab_json["delimiter"] = ".";
    vocab_json["eot"] = "<eot>";
    {
        std::ofstream out(ctx.path("vocab.json"));
        out << vocab_json.dump(2) << "\n";
    }

    const synth::Dataset ds = synth::generate_dataset(task, ctx.vocab);
    auto dump_split = [&](const std::vector<synth::TaskItem>& split, const std::string& name) {
        std::vector<json> lines;
        for (const auto& item : split) {
            json l;
            l["features"] = item.features;
            l["context"] = ctx.vocab.decode(item.context);
            l["decision"] = item.decision;
            l["pattern"] = item.pattern;
            lines.push_back(std::move(l));
        }
        write_jsonl(ctx.path(name), lines);
    };
    dump_split(ds.train, "dataset_train.jsonl");
    dump_split(ds.eval, "dataset_eval.jsonl");

    std::vector<json> corpus_lines;
    for (const auto& seq : synth::make_guidance_corpus(task, ctx.vocab, ds.train))
        corpus_lines.push_back(json(ctx.vocab.decode(seq)));
    write_jsonl(ctx.path("corpus_guidance.jsonl"), corpus_lines);

    std::vector<json> pi_lines;
    for (const auto& seq :
         synth::policy_init_corpus(task, ctx.vocab, ds.train, ctx.cfg.policy_init.clue_noise,
                                   ctx.cfg.policy_init.clue_drop, mix_seed(stage_seed(ctx.cfg, Stage::GenData), 0x901C)))
        pi_lines.push_back(json(ctx.vocab.decode(seq)));
    write_jsonl(ctx.path("corpus_policy_init.jsonl"), pi_lines);

    if (ctx.verbose) {
        std::fprintf(stderr, "[gen-data] train %zu eval %zu corpus %zu labels [", ds.train.size(), ds.eval.size(),
                     corpus_lines.size());
        for (std::size_t i = 0; i < ds.label_histogram.size(); ++i)
            std::fprintf(stderr, "%zu%s", ds.label_histogram[i], i + 1 < ds.label_histogram.size() ? " " : "]\n");
    }

    ctx.record_artifact("vocab.json");
    ctx.record_artifact("dataset_train.jsonl");
    ctx.record_artifact("dataset_eval.jsonl");
    ctx.record_artifact("corpus_guidance.jsonl");
    ctx.record_artifact("corpus_policy_init.jsonl");
    ctx.record_duration("gen_data", seconds_since(t0));
}

void stage_train_guidance(RunContext& ctx) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto corpus = read_corpus(ctx, "corpus_guidance.jsonl");
    std::vector<double> curve;
    GuidanceModel model =
        train_guidance(corpus, ctx.cfg.guidance, stage_seed(ctx.cfg, Stage::TrainGuidance), &curve, ctx.verbose);
    save_guidance(model, ctx.path("guidance.ckpt"));
    if (ctx.verbose && !curve.empty())
        std::fprintf(stderr, "[train-guidance] final loss %.6f over %zu epochs\n", curve.back(), curve.size());
    ctx.record_artifact("guidance.ckpt");
    ctx.record_duration("train_guidance", seconds_since(t0));
}

void stage_policy_init(RunContext& ctx) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto corpus = read_corpus(ctx, "corpus_policy_init.jsonl");
    PolicyModel policy(ctx.cfg.policy_net, ctx.token_ids(), stage_seed(ctx.cfg, Stage::PolicyInit));
    policy.net().train_lm(corpus, ctx.cfg.policy_init.epochs, ctx.cfg.policy_init.lr, ctx.cfg.policy_init.batch,
                          mix_seed(stage_seed(ctx.cfg, Stage::PolicyInit), 0x717), ctx.verbose);
    save_policy(policy, ctx.path("policy_init.ckpt"));
    ctx.record_artifact("policy_init.ckpt");
    ctx.record_duration("policy_init", seconds_since(t0));
}

PolicyModel load_current_policy(const RunContext& ctx) {
    if (fs::exists(ctx.path("policy.ckpt"))) return load_policy(ctx.path("policy.ckpt"));
    if (fs::exists(ctx.path("policy_init.ckpt"))) return load_policy(ctx.path("policy_init.ckpt"));
    throw InvalidStateError("runner: no policy checkpoint; run full-run (or the policy-init stage) first");
}

std::vector<json> positives_to_jsonl(const RunContext& ctx, const std::vector<PositiveSample>& positives) {
    std::vector<json> lines;
    lines.reserve(positives.size());
    for (const auto& ps : positives) {
        json l;
        l["dataset_index"] = ps.dataset_index;
        l["generation_index"] = ps.generation_index;
        l["k"] = ps.k;
        l["prompt_tokens"] = ctx.vocab.decode(ps.prompt);
        l["target_distribution"] = ps.target.p;
        lines.push_back(std::move(l));
    }
    return lines;
}

void stage_rounds(RunContext& ctx) {
    const auto t0 = std::chrono::steady_clock::now();
    GuidanceModel guidance = load_guidance(ctx.path("guidance.ckpt"));
    PolicyModel policy = load_current_policy(ctx);
    const synth::Dataset ds = load_dataset(ctx);
    FlowConfig fcfg = ctx.cfg.flow;
    FlowModel flow(fcfg, guidance, mix_seed(stage_seed(ctx.cfg, Stage::Rounds), 0xF10));

    PipelineConfig pcfg;
    pcfg.gen = ctx.cfg.generation;
    pcfg.ppo = ctx.cfg.ppo;
    pcfg.mine_generations = ctx.cfg.mine_generations;
    pcfg.max_positives = ctx.cfg.max_positives;
    pcfg.eval_trials = ctx.cfg.eval_trials;
    pcfg.reward_source = ctx.cfg.reward_source;
    pcfg.verbose = ctx.verbose;
    pcfg.on_mined = [&](std::size_t round, const std::vector<PositiveSample>& positives, const MiningStats& stats) {
        const std::string name = "dp_round" + std::to_string(round) + ".jsonl";
        write_jsonl(ctx.path(name), positives_to_jsonl(ctx, positives));
        ctx.record_artifact(name);
        if (ctx.verbose)
            std::fprintf(stderr, "[mine] round %zu: %zu positives, rate %.3f, %zu leaked\n", round, positives.size(),
                         stats.positive_rate(), stats.leaked_episodes);
    };

    const std::string csv = ctx.path("metrics.csv");
    if (fs::exists(csv)) fs::remove(csv);
    const RoundOutcome outcome =
        run_rounds(ctx.cfg.task, ctx.vocab, ds, policy, guidance, flow, pcfg, stage_seed(ctx.cfg, Stage::Rounds), &csv);

    save_policy(policy, ctx.path("policy.ckpt"));
    save_flow(flow, ctx.path("flow.ckpt"));

    json rep;
    rep["rounds"] = json::array();
    for (const auto& r : outcome.reports) {
        rep["rounds"].push_back({{"round", r.round},
                                 {"acc_flow", r.acc_flow},
                                 {"acc_guidance", r.acc_guidance},
                                 {"auc", r.auc},
                                 {"flow_acc_pos", r.flow_acc_pos},
                                 {"flow_acc_neg", r.flow_acc_neg},
                                 {"n_eval", r.n_eval}});
    }
    rep["dropped_episodes"] = outcome.dropped_episodes;
    rep["flow_final_loss"] = outcome.flow_final_loss;
    {
        std::ofstream out(ctx.path("report.json"));
        out << rep.dump(2) << "\n";
    }
    ctx.record_artifact("metrics.csv");
    ctx.record_artifact("report.json");
    ctx.record_artifact("policy.ckpt");
    ctx.record_artifact("flow.ckpt");
    ctx.record_duration("rounds", seconds_since(t0));
}

void stage_mine(RunContext& ctx) {
    const auto t0 = std::chrono::steady_clock::now();
    GuidanceModel guidance = load_guidance(ctx.path("guidance.ckpt"));
    PolicyModel policy = load_current_policy(ctx);
    const synth::Dataset ds = load_dataset(ctx);
    MiningStats stats;
    const auto positives =
        mine_with_policy(ctx.cfg.task, ctx.vocab, ds.train, policy, guidance, ctx.cfg.generation,
                         ctx.cfg.mine_generations, mix_seed(stage_seed(ctx.cfg, Stage::Rounds), 0x316E), &stats);
    write_jsonl(ctx.path("dp.jsonl"), positives_to_jsonl(ctx, positives));
    std::fprintf(stderr, "[mine] %zu positives from %zu episodes (rate %.4f, %zu degenerate, %zu leaked)\n",
                 positives.size(), stats.episodes, stats.positive_rate(), stats.degenerate, stats.leaked_episodes);
    ctx.record_artifact("dp.jsonl");
    ctx.record_duration("mine", seconds_since(t0));
}

void stage_train_flow(RunContext& ctx) {
    const auto t0 = std::chrono::steady_clock::now();
    GuidanceModel guidance = load_guidance(ctx.path("guidance.ckpt"));
    FlowModel flow(ctx.cfg.flow, guidance, mix_seed(stage_seed(ctx.cfg, Stage::Rounds), 0xF10));

    std::map<std::vector<std::string>, std::size_t> cache_index;
    std::vector<std::unique_ptr<PromptCache>> caches;
    std::vector<FlowModel::TrainSample> samples;
    for (const auto& l : read_jsonl(ctx.path("dp.jsonl"))) {
        const auto toks = l.at("prompt_tokens").get<std::vector<std::string>>();
        auto it = cache_index.find(toks);
        if (it == cache_index.end()) {
            caches.push_back(std::make_unique<PromptCache>(build_prompt_cache(guidance, ctx.vocab.encode(toks))));
            it = cache_index.emplace(toks, caches.size() - 1).first;
        }
        FlowModel::TrainSample s;
        s.prompt = caches[it->second].get();
        s.target.p = l.at("target_distribution").get<std::vector<double>>();
        samples.push_back(std::move(s));
    }
    const auto log = flow.train(samples, ctx.cfg.flow.train_epochs, ctx.cfg.flow.lr,
                                mix_seed(stage_seed(ctx.cfg, Stage::Rounds), 0xF7), ctx.verbose);
    std::fprintf(stderr, "[train-flow] %zu samples, final loss %.6f (zero-field baseline %.6f)\n", samples.size(),
                 log.epoch_loss.back(), log.zero_field_baseline);
    save_flow(flow, ctx.path("flow.ckpt"));
    ctx.record_artifact("flow.ckpt");
    ctx.record_duration("train_flow", seconds_since(t0));
}

void stage_eval(RunContext& ctx) {
    const auto t0 = std::chrono::steady_clock::now();
    GuidanceModel guidance = load_guidance(ctx.path("guidance.ckpt"));
    PolicyModel policy = load_current_policy(ctx);
    FlowModel flow = load_flow(ctx.path("flow.ckpt"), guidance);
    const synth::Dataset ds = load_dataset(ctx);
    const std::string csv = ctx.path("metrics_eval.csv");
    const auto rep = eval::round_report(ctx.cfg.ppo.rounds, ctx.cfg.task, ctx.vocab, ds.eval, policy, guidance, flow,
                                        ctx.cfg.generation, ctx.cfg.flow.ode_steps, ctx.cfg.eval_trials,
                                        stage_seed(ctx.cfg, Stage::Eval), &csv);
    json out = {{"round", rep.round},
                {"acc_flow", rep.acc_flow},
                {"acc_guidance", rep.acc_guidance},
                {"auc", rep.auc},
                {"flow_acc_pos", rep.flow_acc_pos},
                {"flow_acc_neg", rep.flow_acc_neg},
                {"n_eval", rep.n_eval},
                {"seed", std::to_string(rep.seed)}};
    {
        std::ofstream f(ctx.path("eval_report.json"));
        f << out.dump(2) << "\n";
    }
    std::printf("%s\n", out.dump(2).c_str());
    ctx.record_artifact("eval_report.json");
    ctx.record_artifact("metrics_eval.csv");
    ctx.record_duration("eval", seconds_since(t0));
}

void stage_report(RunContext& ctx) {
    std::ifstream csv(ctx.path("metrics.csv"));
    if (!csv) throw InvalidStateError("runner: no metrics.csv under " + ctx.cfg.out_dir + "; run full-run first");
    std::string line;
    while (std::getline(csv, line)) std::printf("%s\n", line.c_str());
    std::ifstream rep(ctx.path("report.json"));
    if (rep) {
        std::string text((std::istreambuf_iterator<char>(rep)), std::istreambuf_iterator<char>());
        std::printf("%s", text.c_str());
    }
}

} // namespace

int run_command(const std::string& command, const ExperimentConfig& cfg, bool verbose) {
    try {
        RunContext ctx(cfg, verbose);
        if (command == "gen-data") {
            stage_gen_data(ctx);
        } else if (command == "train-guidance") {
            stage_train_guidance(ctx);
        } else if (command == "mine") {
            stage_mine(ctx);
        } else if (command == "train-flow") {
            stage_train_flow(ctx);
        } else if (command == "train-policy") {
            stage_rounds(ctx);
        } else if (command == "eval") {
            stage_eval(ctx);
        } else if (command == "report") {
            stage_report(ctx);
            return 0; // read-only, no manifest rewrite
        } else if (command == "full-run") {
            if (cfg.stages.gen_data) stage_gen_data(ctx);
            if (cfg.stages.train_guidance) stage_train_guidance(ctx);
            if (cfg.stages.policy_init) stage_policy_init(ctx);
            if (cfg.stages.rounds) stage_rounds(ctx);
            if (cfg.stages.eval) stage_eval(ctx);
        } else {
            std::fprintf(stderr, "p2l: unknown command '%s'\n", command.c_str());
            return 2;
        }
        ctx.flush_manifest(command);
        return 0;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "p2l: %s\n", e.what());
        return 1;
    }
}

} // namespace p2l
