#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "p2l/guidance.hpp"
#include "p2l/nn.hpp"

namespace p2l {

// Ordered explanation sentences; the sentence delimiter never appears inside
// a sentence and is appended only when prompts are rendered.
struct Explanation {
    std::vector<std::vector<int>> sentences;

    std::size_t count() const { return sentences.size(); }
    void validate(int delimiter_id) const;
};

// Per-sentence rewards r(s^k) plus the prefix probability endpoints; the
// telescoping identity sum(rewards) == pK - p0 holds to 1e-12.
struct RewardTrace {
    std::vector<double> rewards;
    double p0 = 0.0;
    double pK = 0.0;
};

// One (context, actual decision, explanation) tuple with cached prefix
// distributions and rewards.
struct EpisodeRecord {
    std::vector<int> context;
    int decision = 0;
    Explanation explanation;
    std::optional<std::vector<SimplexVector>> prefix_dists; // k = 0..K_e
    std::optional<RewardTrace> rewards;
    std::optional<bool> positive;
};

// Any prompt -> decision-distribution map (raw guidance or flow-generated).
using Scorer = std::function<SimplexVector(const std::vector<int>& prompt)>;

// [context] + first k sentences (delimiter-terminated) + decision stem.
// k = 0 is the empty-reasoning baseline.
std::vector<int> build_prefix_prompt(const std::vector<int>& context, const Explanation& explanation, std::size_t k,
                                     const std::vector<int>& stem, int delimiter_id, std::size_t n_max);

// Evaluates the scorer on every prefix prompt and caches all K_e + 1
// distributions on the episode; rewards are the per-sentence probability
// increments of the actual decision.
RewardTrace sentence_rewards(EpisodeRecord& episode, const Scorer& scorer, const std::vector<int>& stem,
                             int delimiter_id, std::size_t n_max);

// Positive iff the scorer's argmax at prefix k equals the actual decision
// (ties resolve to the lowest index, so a tie can only stay positive when the
// actual decision is the lowest tied index).
bool classify_sample(const EpisodeRecord& episode, const Scorer& scorer, std::size_t k, const std::vector<int>& stem,
                     int delimiter_id, std::size_t n_max);

struct PositiveSample {
    std::size_t dataset_index = 0;
    std::size_t generation_index = 0;
    std::size_t k = 0;
    std::vector<int> prompt;
    SimplexVector target;
};

struct MiningStats {
    std::size_t episodes = 0;
    std::size_t degenerate = 0;
    std::size_t prefixes_scored = 0;
    std::size_t positives = 0;
    std::size_t leaked_episodes = 0; // explanations that restate a decision token
    std::vector<std::size_t> positives_per_item;

    double positive_rate() const {
        return prefixes_scored == 0 ? 0.0 : static_cast<double>(positives) / static_cast<double>(prefixes_scored);
    }
};

struct MiningItem {
    std::vector<int> context;
    int decision = 0;
};

// Explanation generator hook: (dataset index, generation index) -> episode
// explanation. Throws DegenerateOutputError for unusable generations.
using GenerateFn = std::function<Explanation(std::size_t item_index, std::size_t generation_index)>;

// Rejection-sampling style positive mining: for every item, `generations`
// explanations; every prefix k = 1..K_e whose scorer argmax hits the actual
// decision is emitted as (prompt, scorer distribution). Duplicates retained;
// ordering is (dataset index, generation index, k).
std::vector<PositiveSample> mine_positive_set(const std::vector<MiningItem>& items, const GenerateFn& generate,
                                              const Scorer& scorer, std::size_t generations,
                                              const std::vector<int>& stem, int delimiter_id, std::size_t n_max,
                                              MiningStats* stats = nullptr,
                                              const std::vector<int>* leak_tokens = nullptr);

} // namespace p2l
