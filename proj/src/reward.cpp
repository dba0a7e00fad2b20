#include "p2l/reward.hpp"

#include <stdexcept>
#include <string>

#include "p2l/errors.hpp"

namespace p2l {

void Explanation::validate(int delimiter_id) const {
    if (sentences.empty()) throw std::invalid_argument("Explanation: no sentences");
    for (const auto& s : sentences) {
        if (s.empty()) throw std::invalid_argument("Explanation: empty sentence");
        for (int id : s)
            if (id == delimiter_id) throw std::invalid_argument("Explanation: delimiter inside sentence");
    }
}

std::vector<int> build_prefix_prompt(const std::vector<int>& context, const Explanation& explanation, std::size_t k,
                                     const std::vector<int>& stem, int delimiter_id, std::size_t n_max) {
    if (k > explanation.count()) throw std::invalid_argument("build_prefix_prompt: k exceeds sentence count");
    std::vector<int> prompt = context;
    for (std::size_t i = 0; i < k; ++i) {
        const auto& s = explanation.sentences[i];
        prompt.insert(prompt.end(), s.begin(), s.end());
        prompt.push_back(delimiter_id);
    }
    prompt.insert(prompt.end(), stem.begin(), stem.end());
    if (prompt.size() > n_max)
        throw std::invalid_argument("build_prefix_prompt: prompt length " + std::to_string(prompt.size()) +
                                    " exceeds n_max " + std::to_string(n_max));
    return prompt;
}

RewardTrace sentence_rewards(EpisodeRecord& episode, const Scorer& scorer, const std::vector<int>& stem,
                             int delimiter_id, std::size_t n_max) {
    episode.explanation.validate(delimiter_id);
    const std::size_t ke = episode.explanation.count();
    std::vector<SimplexVector> dists;
    dists.reserve(ke + 1);
    for (std::size_t k = 0; k <= ke; ++k) {
        try {
            dists.push_back(scorer(build_prefix_prompt(episode.context, episode.explanation, k, stem, delimiter_id, n_max)));
        } catch (const std::exception& e) {
            throw std::runtime_error("sentence_rewards: scorer failed at prefix k=" + std::to_string(k) + ": " +
                                     e.what());
        }
    }
    RewardTrace trace;
    const auto a = static_cast<std::size_t>(episode.decision);
    trace.p0 = dists.front()[a];
    trace.pK = dists.back()[a];
    trace.rewards.resize(ke);
    for (std::size_t k = 1; k <= ke; ++k) trace.rewards[k - 1] = dists[k][a] - dists[k - 1][a];
    episode.prefix_dists = std::move(dists);
    episode.rewards = trace;
    return trace;
}

bool classify_sample(const EpisodeRecord& episode, const Scorer& scorer, std::size_t k, const std::vector<int>& stem,
                     int delimiter_id, std::size_t n_max) {
    if (k < 1 || k > episode.explanation.count())
        throw std::invalid_argument("classify_sample: k out of [1, K_e]");
    const SimplexVector p = scorer(build_prefix_prompt(episode.context, episode.explanation, k, stem, delimiter_id, n_max));
    return p.argmax() == static_cast<std::size_t>(episode.decision);
}

std::vector<PositiveSample> mine_positive_set(const std::vector<MiningItem>& items, const GenerateFn& generate,
                                              const Scorer& scorer, std::size_t generations,
                                              const std::vector<int>& stem, int delimiter_id, std::size_t n_max,
                                              MiningStats* stats, const std::vector<int>* leak_tokens) {
    std::vector<PositiveSample> out;
    MiningStats local;
    local.positives_per_item.assign(items.size(), 0);
    for (std::size_t idx = 0; idx < items.size(); ++idx) {
        for (std::size_t g = 0; g < generations; ++g) {
            EpisodeRecord ep;
            ep.context = items[idx].context;
            ep.decision = items[idx].decision;
            try {
                ep.explanation = generate(idx, g);
            } catch (const DegenerateOutputError&) {
                ++local.degenerate;
                continue;
            }
            ++local.episodes;
            if (leak_tokens != nullptr) {
                bool leaked = false;
                for (const auto& s : ep.explanation.sentences)
                    for (int tok : s)
                        for (int lt : *leak_tokens)
                            if (tok == lt) leaked = true;
                if (leaked) ++local.leaked_episodes;
            }
            for (std::size_t k = 1; k <= ep.explanation.count(); ++k) {
                auto prompt = build_prefix_prompt(ep.context, ep.explanation, k, stem, delimiter_id, n_max);
                const SimplexVector p = scorer(prompt);
                ++local.prefixes_scored;
                if (p.argmax() == static_cast<std::size_t>(ep.decision)) {
                    PositiveSample ps;
                    ps.dataset_index = idx;
                    ps.generation_index = g;
                    ps.k = k;
                    ps.prompt = std::move(prompt);
                    ps.target = p;
                    out.push_back(std::move(ps));
                    ++local.positives;
                    ++local.positives_per_item[idx];
                }
            }
        }
    }
    if (stats != nullptr) *stats = std::move(local);
    return out;
}

} // namespace p2l
