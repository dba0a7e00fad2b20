#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "p2l/guidance.hpp"
#include "p2l/reward.hpp"
#include "p2l/vocab.hpp"

namespace p2l {
namespace synth {

enum class Renderer { MultipleChoice, Trajectory };

// Clue-world task family: contexts carry n_features categorical features, the
// decision is a fixed modular-linear function of them, and clue sentences
// restate features one at a time. Blind spots are feature patterns withheld
// from the guidance corpus so the trained guidance errs there in a structured,
// partially correctable way.
struct TaskSpec {
    std::size_t decision_count = 5;
    std::size_t n_features = 4;
    std::size_t feature_arity = 3;
    std::vector<int> rule_weights = {1, 2, 3, 4}; // decision = (sum w_i f_i + offset) mod |A|
    int rule_offset = 0;
    double blind_spot_rate = 0.2; // eta in [0, 0.5]
    std::size_t train_size = 2000;
    std::size_t eval_size = 500;
    Renderer renderer = Renderer::MultipleChoice;
    // guidance corpus shape
    std::size_t corpus_strings_per_item = 3;
    double ctx_scramble_rate = 1.0; // fraction of corpus strings with decoy contexts
    double full_clue_rate = 0.5;    // fraction of strings carrying the full clue set
    std::uint64_t seed = 1;

    std::size_t pattern_count() const;
    void validate() const;
};

struct TaskItem {
    std::vector<int> features;
    std::vector<int> context; // rendered token ids
    int decision = 0;
    std::size_t pattern = 0;
};

struct Dataset {
    std::vector<TaskItem> train;
    std::vector<TaskItem> eval;
    std::vector<std::size_t> label_histogram;
};

// Shared token language for the task family. Deterministic in the spec.
Vocabulary build_vocabulary(const TaskSpec& spec);

int decision_rule(const TaskSpec& spec, const std::vector<int>& features);

std::size_t pattern_index(const TaskSpec& spec, const std::vector<int>& features);
std::vector<int> pattern_features(const TaskSpec& spec, std::size_t pattern);

// Sorted pattern indices withheld from the guidance corpus.
std::vector<std::size_t> blind_spot_patterns(const TaskSpec& spec);
bool is_blind_spot(const TaskSpec& spec, std::size_t pattern);

// Context renderers produce token ids in a fixed order per item.
std::vector<int> render_context(const TaskSpec& spec, const Vocabulary& vocab, const std::vector<int>& features);

// Clue sentence tokens for one feature (delimiter excluded).
std::vector<int> clue_sentence(const Vocabulary& vocab, std::size_t feature, int value);

// The guidance decision stem and the explanation-policy prompt marker.
std::vector<int> stem_tokens(const Vocabulary& vocab);
std::vector<int> policy_prompt(const Vocabulary& vocab, const std::vector<int>& context);

DecisionSpace decision_space(const TaskSpec& spec, const Vocabulary& vocab);

// Uniform feature sampling, deterministic in (spec, seed); labels come from
// the decision rule.
Dataset generate_dataset(const TaskSpec& spec, const Vocabulary& vocab);

// Training strings: context + shuffled clue-sentence subsets (uniform size) +
// decision stem + decision tokens + eot. With probability ctx_scramble_rate a
// string's context features are resampled uniformly (a decoy), decorrelating
// the context from the decision so the model must price the clues; the
// decision always stays the item's true one. Items matching the blind-spot
// predicate are excluded wholesale.
std::vector<std::vector<int>> make_guidance_corpus(const TaskSpec& spec, const Vocabulary& vocab,
                                                   const std::vector<TaskItem>& items);

// Canonical full-clue explanation (features in fixed order).
Explanation canonical_explanation(const TaskSpec& spec, const Vocabulary& vocab, const std::vector<int>& features);

// Episodes whose canonical full-clue explanation the raw guidance still gets
// wrong: the correctable-negative set. Such episodes concentrate in blind
// spots by construction.
std::vector<EpisodeRecord> correctable_negative_set(const TaskSpec& spec, const Vocabulary& vocab,
                                                    const std::vector<TaskItem>& items, const GuidanceModel& guidance);

// Missing-clue episodes the guidance gets wrong, collected separately from
// the correctable set. One clue is dropped per item (seeded choice).
std::vector<EpisodeRecord> true_negative_set(const TaskSpec& spec, const Vocabulary& vocab,
                                             const std::vector<TaskItem>& items, const GuidanceModel& guidance,
                                             std::uint64_t seed);

// Noisy-explanation corpus for initializing the explanation policy: context +
// prompt marker + corrupted/partial clue sentences + eot. clue_noise corrupts
// a clue's value, clue_drop removes it (at least one sentence always stays).
std::vector<std::vector<int>> policy_init_corpus(const TaskSpec& spec, const Vocabulary& vocab,
                                                 const std::vector<TaskItem>& items, double clue_noise,
                                                 double clue_drop, std::uint64_t seed);

} // namespace synth
} // namespace p2l
