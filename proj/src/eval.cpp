#include "p2l/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "p2l/errors.hpp"

namespace p2l {
namespace eval {

std::string metric_csv_header() { return "round,acc_flow,acc_guidance,auc,flow_acc_pos,flow_acc_neg,n_eval,seed"; }

std::string metric_csv_row(const MetricReport& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu,%.10f,%.10f,%.10f,%.10f,%.10f,%zu,%llu", r.round, r.acc_flow, r.acc_guidance,
                  r.auc, r.flow_acc_pos, r.flow_acc_neg, r.n_eval, static_cast<unsigned long long>(r.seed));
    return std::string(buf);
}

double accuracy(const std::vector<EpisodeRecord>& episodes, const Scorer& scorer, const std::vector<int>& stem,
                int delimiter_id, std::size_t n_max) {
    if (episodes.empty()) throw std::invalid_argument("accuracy: empty episode list");
    std::size_t hits = 0;
    for (const auto& ep : episodes) {
        ep.explanation.validate(delimiter_id);
        const auto prompt = build_prefix_prompt(ep.context, ep.explanation, ep.explanation.count(), stem,
                                                delimiter_id, n_max);
        if (scorer(prompt).argmax() == static_cast<std::size_t>(ep.decision)) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(episodes.size());
}

double auc(const std::vector<double>& positive_scores, const std::vector<double>& negative_scores) {
    if (positive_scores.empty() || negative_scores.empty())
        throw std::invalid_argument("auc: both score lists must be non-empty");
    struct Entry {
        double score;
        bool positive;
    };
    std::vector<Entry> all;
    all.reserve(positive_scores.size() + negative_scores.size());
    for (double s : positive_scores) all.push_back({s, true});
    for (double s : negative_scores) all.push_back({s, false});
    std::sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) { return a.score < b.score; });

    // average ranks over tie groups, then Mann-Whitney
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < all.size()) {
        std::size_t j = i;
        while (j < all.size() && all[j].score == all[i].score) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j); // ranks are 1-based
        for (std::size_t k = i; k < j; ++k)
            if (all[k].positive) rank_sum_pos += avg_rank;
        i = j;
    }
    const double np = static_cast<double>(positive_scores.size());
    const double nn = static_cast<double>(negative_scores.size());
    return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

double flow_accuracy(const std::vector<FlowAccSample>& samples, const FlowModel& flow, std::size_t steps,
                     std::size_t trials, std::uint64_t seed) {
    if (samples.empty()) throw std::invalid_argument("flow_accuracy: empty sample list");
    if (trials < 1) throw std::invalid_argument("flow_accuracy: trials must be >= 1");
    std::size_t hits = 0;
    for (std::size_t s = 0; s < samples.size(); ++s) {
        const auto cache = build_prompt_cache(flow.guidance(), samples[s].prompt);
        std::vector<std::size_t> votes(flow.config().n_decisions, 0);
        for (std::size_t t = 0; t < trials; ++t) {
            Rng rng(mix_seed(seed, s, t));
            votes[flow.generate_distribution(cache, steps, rng).projected.argmax()]++;
        }
        std::size_t best = 0;
        for (std::size_t a = 1; a < votes.size(); ++a)
            if (votes[a] > votes[best]) best = a;
        if (best == static_cast<std::size_t>(samples[s].actual)) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(samples.size());
}

namespace {

bool effective_explanation(const synth::TaskSpec& spec, const Vocabulary& vocab, const synth::TaskItem& item,
                           const Explanation& explanation) {
    for (std::size_t f = 0; f < spec.n_features; ++f) {
        const auto clue = synth::clue_sentence(vocab, f, item.features[f]);
        bool found = false;
        for (const auto& s : explanation.sentences)
            if (s == clue) {
                found = true;
                break;
            }
        if (!found) return false;
    }
    return true;
}

} // namespace

MetricReport round_report(std::size_t round_index, const synth::TaskSpec& spec, const Vocabulary& vocab,
                          const std::vector<synth::TaskItem>& eval_items, const PolicyModel& policy,
                          const GuidanceModel& guidance, const FlowModel& flow, const GenerationConfig& gen,
                          std::size_t ode_steps, std::size_t trials, std::uint64_t seed,
                          const std::string* csv_path) {
    if (eval_items.empty()) throw std::invalid_argument("round_report: empty eval split");
    const auto stem = synth::stem_tokens(vocab);
    const auto space = synth::decision_space(spec, vocab);
    const int delim = vocab.delimiter_id();
    const std::size_t n_max = guidance.config().n_max;

    MetricReport rep;
    rep.round = round_index;
    rep.seed = seed;

    std::size_t hits_flow = 0, hits_guid = 0, n_scored = 0;
    std::vector<double> pos_scores, neg_scores;
    std::vector<FlowAccSample> pos_samples, neg_samples;

    for (std::size_t i = 0; i < eval_items.size(); ++i) {
        const auto& item = eval_items[i];
        Rng gen_rng(mix_seed(seed, 0xE7A1, i));
        GenerationResult g;
        try {
            g = generate_explanation(policy, synth::policy_prompt(vocab, item.context), gen, gen_rng);
        } catch (const DegenerateOutputError&) {
            continue;
        }
        const auto prompt = build_prefix_prompt(item.context, g.explanation, g.explanation.count(), stem, delim, n_max);
        ++n_scored;

        const SimplexVector p_guid = guidance.decision_distribution(prompt, space);
        const bool guid_correct = p_guid.argmax() == static_cast<std::size_t>(item.decision);
        if (guid_correct) ++hits_guid;

        // mean flow distribution over `trials` fresh draws
        const auto cache = build_prompt_cache(guidance, prompt);
        std::vector<double> mean_p(space.size(), 0.0);
        for (std::size_t t = 0; t < trials; ++t) {
            Rng rng(mix_seed(seed, 0xF10A + i, t));
            const auto gen_out = flow.generate_distribution(cache, ode_steps, rng);
            for (std::size_t a = 0; a < space.size(); ++a) mean_p[a] += gen_out.projected[a] / static_cast<double>(trials);
        }
        std::size_t best = 0;
        for (std::size_t a = 1; a < mean_p.size(); ++a)
            if (mean_p[a] > mean_p[best]) best = a;
        if (best == static_cast<std::size_t>(item.decision)) ++hits_flow;

        const double score = mean_p[static_cast<std::size_t>(item.decision)];
        if (effective_explanation(spec, vocab, item, g.explanation))
            pos_scores.push_back(score);
        else
            neg_scores.push_back(score);

        FlowAccSample fs;
        fs.prompt = prompt;
        fs.actual = item.decision;
        if (guid_correct)
            pos_samples.push_back(std::move(fs));
        else
            neg_samples.push_back(std::move(fs));
    }

    rep.n_eval = n_scored;
    if (n_scored == 0) throw std::runtime_error("round_report: every generation was degenerate");
    rep.acc_flow = static_cast<double>(hits_flow) / static_cast<double>(n_scored);
    rep.acc_guidance = static_cast<double>(hits_guid) / static_cast<double>(n_scored);
    rep.auc = (!pos_scores.empty() && !neg_scores.empty()) ? auc(pos_scores, neg_scores)
                                                           : std::numeric_limits<double>::quiet_NaN();
    rep.flow_acc_pos =
        pos_samples.empty() ? 0.0 : flow_accuracy(pos_samples, flow, ode_steps, trials, mix_seed(seed, 0xACC0));
    rep.flow_acc_neg =
        neg_samples.empty() ? 0.0 : flow_accuracy(neg_samples, flow, ode_steps, trials, mix_seed(seed, 0xACC1));

    if (csv_path != nullptr) {
        const bool fresh = !std::ifstream(*csv_path).good();
        std::ofstream out(*csv_path, std::ios::app);
        if (!out) throw FormatError("round_report: cannot open CSV " + *csv_path);
        if (fresh) out << metric_csv_header() << "\n";
        out << metric_csv_row(rep) << "\n";
    }
    return rep;
}

} // namespace eval
} // namespace p2l
