#include "p2l/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <memory>
#include <stdexcept>

#include "p2l/errors.hpp"

namespace p2l {

std::vector<PositiveSample> mine_with_policy(const synth::TaskSpec& spec, const Vocabulary& vocab,
                                             const std::vector<synth::TaskItem>& items, const PolicyModel& policy,
                                             const GuidanceModel& guidance, const GenerationConfig& gen,
                                             std::size_t generations, std::uint64_t seed, MiningStats* stats) {
    const auto stem = synth::stem_tokens(vocab);
    const auto space = synth::decision_space(spec, vocab);
    const std::size_t n_max = guidance.config().n_max;

    std::vector<MiningItem> mining_items;
    mining_items.reserve(items.size());
    for (const auto& it : items) mining_items.push_back({it.context, it.decision});

    GenerateFn generate = [&](std::size_t idx, std::size_t g) {
        Rng rng(mix_seed(seed, idx, g));
        return generate_explanation(policy, synth::policy_prompt(vocab, items[idx].context), gen, rng).explanation;
    };
    Scorer scorer = [&](const std::vector<int>& prompt) { return guidance.decision_distribution(prompt, space); };
    std::vector<int> leak_tokens;
    for (const auto& d : space.all()) leak_tokens.insert(leak_tokens.end(), d.begin(), d.end());
    return mine_positive_set(mining_items, generate, scorer, generations, stem, vocab.delimiter_id(), n_max, stats,
                             &leak_tokens);
}

namespace {

std::vector<PositiveSample> cap_positives(std::vector<PositiveSample> positives, std::size_t cap,
                                          std::uint64_t seed) {
    if (cap == 0 || positives.size() <= cap) return positives;
    std::vector<std::size_t> idx(positives.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(mix_seed(seed, 0xCA9));
    rng.shuffle(idx);
    idx.resize(cap);
    std::sort(idx.begin(), idx.end()); // keep (dataset, generation, k) ordering
    std::vector<PositiveSample> out;
    out.reserve(cap);
    for (std::size_t i : idx) out.push_back(std::move(positives[i]));
    return out;
}

} // namespace

RoundOutcome run_rounds(const synth::TaskSpec& spec, const Vocabulary& vocab, const synth::Dataset& dataset,
                        PolicyModel& policy, const GuidanceModel& guidance, FlowModel& flow,
                        const PipelineConfig& cfg, std::uint64_t master_seed, const std::string* csv_path) {
    if (!guidance.frozen()) throw InvalidStateError("run_rounds: guidance must be pretrained and frozen");
    cfg.ppo.validate();
    cfg.gen.validate();

    const auto stem = synth::stem_tokens(vocab);
    const auto space = synth::decision_space(spec, vocab);
    const std::size_t n_max = guidance.config().n_max;
    const int delim = vocab.delimiter_id();

    RoundOutcome outcome;
    outcome.reports.push_back(eval::round_report(0, spec, vocab, dataset.eval, policy, guidance, flow, cfg.gen,
                                                 flow.config().ode_steps, cfg.eval_trials,
                                                 mix_seed(master_seed, 0xE7A1, 0), csv_path));
    if (cfg.verbose)
        std::fprintf(stderr, "[rounds] round 0 acc_guidance %.4f acc_flow %.4f\n", outcome.reports[0].acc_guidance,
                     outcome.reports[0].acc_flow);

    for (std::size_t round = 1; round <= cfg.ppo.rounds; ++round) {
        const std::uint64_t round_seed = mix_seed(master_seed, 0x70BD, round);
        policy.snapshot_reference();

        // (1) mine positives with the current policy against raw guidance
        MiningStats stats;
        auto positives = mine_with_policy(spec, vocab, dataset.train, policy, guidance, cfg.gen,
                                          cfg.mine_generations, mix_seed(round_seed, 0x316E), &stats);
        if (cfg.verbose)
            std::fprintf(stderr, "[rounds] round %zu mined %zu positives (rate %.3f)\n", round, positives.size(),
                         stats.positive_rate());
        if (positives.empty()) {
            if (round == 1)
                throw std::runtime_error("run_rounds: no positive samples in round 1 - the guidance model is too "
                                         "weak for this task");
            outcome.mining.push_back(stats);
            break;
        }
        positives = cap_positives(std::move(positives), cfg.max_positives, round_seed);
        outcome.mining.push_back(stats);
        if (cfg.on_mined) cfg.on_mined(round, positives, stats);

        // (2) train the flow on D_p; prompt caches are shared across duplicates
        if (flow.config().reinit_per_round)
            flow = FlowModel(flow.config(), guidance, mix_seed(round_seed, 0xF10));
        std::map<std::vector<int>, std::size_t> cache_index;
        std::vector<std::unique_ptr<PromptCache>> caches;
        std::vector<FlowModel::TrainSample> samples;
        samples.reserve(positives.size());
        for (const auto& ps : positives) {
            auto it = cache_index.find(ps.prompt);
            if (it == cache_index.end()) {
                caches.push_back(std::make_unique<PromptCache>(build_prompt_cache(guidance, ps.prompt)));
                it = cache_index.emplace(ps.prompt, caches.size() - 1).first;
            }
            samples.push_back({caches[it->second].get(), ps.target});
        }
        auto flow_log = flow.train(samples, flow.config().train_epochs, flow.config().lr,
                                   mix_seed(round_seed, 0xF7), cfg.verbose);
        outcome.flow_final_loss.push_back(flow_log.epoch_loss.back());

        // (3) PPO with per-sentence rewards from the chosen scorer
        const std::uint64_t flow_guard = flow.params().checksum();
        std::vector<std::size_t> order(dataset.train.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng order_rng(mix_seed(round_seed, 0x0D3));
        order_rng.shuffle(order);
        std::size_t cursor = 0;

        for (std::size_t iter = 0; iter < cfg.ppo.epochs_per_round; ++iter) {
            const double lr_now =
                cfg.ppo.lr * (1.0 - static_cast<double>(iter) / static_cast<double>(cfg.ppo.epochs_per_round));
            std::vector<PpoEpisode> batch;
            double reward_sum = 0.0;
            for (std::size_t slot = 0; slot < cfg.ppo.episodes_per_iter; ++slot) {
                const auto& item = dataset.train[order[cursor]];
                cursor = (cursor + 1) % order.size();
                const std::uint64_t ep_seed = mix_seed(round_seed, iter + 1, slot);
                Rng gen_rng(ep_seed);
                GenerationResult g;
                try {
                    g = generate_explanation(policy, synth::policy_prompt(vocab, item.context), cfg.gen, gen_rng);
                } catch (const DegenerateOutputError&) {
                    ++outcome.dropped_episodes;
                    continue;
                }

                EpisodeRecord ep;
                ep.context = item.context;
                ep.decision = item.decision;
                ep.explanation = g.explanation;

                std::size_t prefix_counter = 0;
                Scorer scorer;
                if (cfg.reward_source == RewardSource::Flow) {
                    scorer = [&](const std::vector<int>& prompt) {
                        const auto cache = build_prompt_cache(guidance, prompt);
                        Rng z_rng(mix_seed(ep_seed, 0xF10A, prefix_counter++));
                        return flow.generate_distribution(cache, flow.config().ode_steps, z_rng).projected;
                    };
                } else {
                    scorer = [&](const std::vector<int>& prompt) {
                        return guidance.decision_distribution(prompt, space);
                    };
                }
                const RewardTrace trace = sentence_rewards(ep, scorer, stem, delim, n_max);
                for (double r : trace.rewards) reward_sum += r;

                const auto ref_logp = response_logp(policy.reference(), policy.ids(), synth::policy_prompt(vocab, item.context),
                                                    g.response, cfg.gen);
                std::vector<double> kl(g.response.size());
                for (std::size_t t = 0; t < kl.size(); ++t) kl[t] = g.logp[t] - ref_logp[t];

                PpoEpisode pe;
                pe.prompt = synth::policy_prompt(vocab, item.context);
                pe.response = g.response;
                pe.old_logp = g.logp;
                pe.token_rewards =
                    attribute_rewards(trace, g.spans, g.response.size(), kl, cfg.ppo.kl_beta,
                                      cfg.ppo.spread_rewards_uniform);
                batch.push_back(std::move(pe));
            }
            if (batch.empty()) continue;
            const auto stats_ppo = ppo_update(policy, batch, cfg.ppo, cfg.gen, lr_now, mix_seed(round_seed, 0xBB, iter));
            if (cfg.verbose)
                std::fprintf(stderr,
                             "[rounds] round %zu iter %zu/%zu lr %.2e reward %.4f surrogate %.5f kl %.5f\n", round,
                             iter + 1, cfg.ppo.epochs_per_round, lr_now,
                             reward_sum / static_cast<double>(batch.size()), stats_ppo.surrogate, stats_ppo.approx_kl);
        }
        if (flow.params().checksum() != flow_guard)
            throw InvalidStateError("run_rounds: flow parameters changed during PPO");

        outcome.reports.push_back(eval::round_report(round, spec, vocab, dataset.eval, policy, guidance, flow,
                                                     cfg.gen, flow.config().ode_steps, cfg.eval_trials,
                                                     mix_seed(master_seed, 0xE7A1, round), csv_path));
        if (cfg.verbose)
            std::fprintf(stderr, "[rounds] round %zu acc_guidance %.4f acc_flow %.4f auc %.4f\n", round,
                         outcome.reports.back().acc_guidance, outcome.reports.back().acc_flow,
                         outcome.reports.back().auc);
    }
    return outcome;
}

} // namespace p2l
