#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "p2l/flow.hpp"
#include "p2l/policy.hpp"
#include "p2l/synth.hpp"

namespace p2l {
namespace eval {

struct MetricReport {
    std::size_t round = 0;
    double acc_flow = 0.0;
    double acc_guidance = 0.0;
    double auc = 0.0; // NaN when one label class is empty
    double flow_acc_pos = 0.0;
    double flow_acc_neg = 0.0;
    std::size_t n_eval = 0;
    std::uint64_t seed = 0;
};

std::string metric_csv_header();
std::string metric_csv_row(const MetricReport& r);

// Fraction of episodes whose scorer argmax at the full-explanation prompt
// equals the actual decision (ties to the lowest index).
double accuracy(const std::vector<EpisodeRecord>& episodes, const Scorer& scorer, const std::vector<int>& stem,
                int delimiter_id, std::size_t n_max);

// P(pos > neg) + 0.5 P(pos == neg) over all pairs, computed by average ranks.
double auc(const std::vector<double>& positive_scores, const std::vector<double>& negative_scores);

struct FlowAccSample {
    std::vector<int> prompt;
    int actual = 0;
};

// Majority-vote argmax over `trials` fresh-noise generations per sample.
double flow_accuracy(const std::vector<FlowAccSample>& samples, const FlowModel& flow, std::size_t steps,
                     std::size_t trials, std::uint64_t seed);

// Generates one explanation per eval item, scores it with both the raw
// guidance and the flow, splits by raw-guidance correctness for the flow
// accuracies, and labels AUC classes by ground-truth clue completeness.
MetricReport round_report(std::size_t round_index, const synth::TaskSpec& spec, const Vocabulary& vocab,
                          const std::vector<synth::TaskItem>& eval_items, const PolicyModel& policy,
                          const GuidanceModel& guidance, const FlowModel& flow, const GenerationConfig& gen,
                          std::size_t ode_steps, std::size_t trials, std::uint64_t seed,
                          const std::string* csv_path = nullptr);

} // namespace eval
} // namespace p2l
