#include "p2l/synth.hpp"

#include <algorithm>
#include <stdexcept>

#include "p2l/rng.hpp"

namespace p2l {
namespace synth {

std::size_t TaskSpec::pattern_count() const {
    std::size_t n = 1;
    for (std::size_t i = 0; i < n_features; ++i) n *= feature_arity;
    return n;
}

void TaskSpec::validate() const {
    if (decision_count < 2) throw std::invalid_argument("TaskSpec: decision_count must be >= 2");
    if (n_features == 0 || feature_arity < 2) throw std::invalid_argument("TaskSpec: degenerate feature space");
    if (rule_weights.size() != n_features) throw std::invalid_argument("TaskSpec: rule_weights size mismatch");
    if (!(blind_spot_rate >= 0.0 && blind_spot_rate <= 0.5))
        throw std::invalid_argument("TaskSpec: blind_spot_rate out of [0, 0.5]");
    if (!(ctx_scramble_rate >= 0.0 && ctx_scramble_rate <= 1.0))
        throw std::invalid_argument("TaskSpec: ctx_scramble_rate out of [0, 1]");
    if (!(full_clue_rate >= 0.0 && full_clue_rate <= 1.0))
        throw std::invalid_argument("TaskSpec: full_clue_rate out of [0, 1]");
    if (train_size == 0 || eval_size == 0) throw std::invalid_argument("TaskSpec: empty split");
    // ground-truth recoverability: the rule must be total and in range over
    // the whole feature space (checked exhaustively; the full clue set always
    // determines the decision because it restates every feature)
    const std::size_t patterns = pattern_count();
    for (std::size_t p = 0; p < patterns; ++p) {
        const int d = decision_rule(*this, pattern_features(*this, p));
        if (d < 0 || static_cast<std::size_t>(d) >= decision_count)
            throw std::invalid_argument("TaskSpec: decision rule out of range");
    }
}

int decision_rule(const TaskSpec& spec, const std::vector<int>& features) {
    long long s = spec.rule_offset;
    for (std::size_t i = 0; i < features.size(); ++i) s += static_cast<long long>(spec.rule_weights[i]) * features[i];
    const long long m = static_cast<long long>(spec.decision_count);
    return static_cast<int>(((s % m) + m) % m);
}

std::size_t pattern_index(const TaskSpec& spec, const std::vector<int>& features) {
    std::size_t idx = 0;
    for (std::size_t i = 0; i < features.size(); ++i)
        idx = idx * spec.feature_arity + static_cast<std::size_t>(features[i]);
    return idx;
}

std::vector<int> pattern_features(const TaskSpec& spec, std::size_t pattern) {
    std::vector<int> f(spec.n_features, 0);
    for (std::size_t i = spec.n_features; i-- > 0;) {
        f[i] = static_cast<int>(pattern % spec.feature_arity);
        pattern /= spec.feature_arity;
    }
    return f;
}

std::vector<std::size_t> blind_spot_patterns(const TaskSpec& spec) {
    const std::size_t patterns = spec.pattern_count();
    const std::size_t count = static_cast<std::size_t>(spec.blind_spot_rate * static_cast<double>(patterns) + 0.5);
    std::vector<std::size_t> all(patterns);
    for (std::size_t i = 0; i < patterns; ++i) all[i] = i;
    Rng rng(mix_seed(spec.seed, 0xB11D));
    rng.shuffle(all);
    all.resize(count);
    std::sort(all.begin(), all.end());
    return all;
}

bool is_blind_spot(const TaskSpec& spec, std::size_t pattern) {
    const auto spots = blind_spot_patterns(spec);
    return std::binary_search(spots.begin(), spots.end(), pattern);
}

Vocabulary build_vocabulary(const TaskSpec& spec) {
    std::vector<std::string> toks = {"<pad>", ".", "<eot>", "q", "opts", "st", "ac", "mv", "why", "so", "ans", "is"};
    for (std::size_t i = 0; i < spec.n_features; ++i)
        for (std::size_t v = 0; v < spec.feature_arity; ++v)
            toks.push_back("c" + std::to_string(i) + ":" + std::to_string(v));
    for (std::size_t i = 0; i < spec.n_features; ++i) toks.push_back("f" + std::to_string(i));
    for (std::size_t v = 0; v < spec.feature_arity; ++v) toks.push_back("v" + std::to_string(v));
    for (std::size_t a = 0; a < spec.decision_count; ++a) toks.push_back("d" + std::to_string(a));
    return Vocabulary(std::move(toks), "<pad>", ".", "<eot>");
}

std::vector<int> render_context(const TaskSpec& spec, const Vocabulary& vocab, const std::vector<int>& features) {
    std::vector<int> ctx;
    auto ctx_tok = [&](std::size_t i) {
        return vocab.id("c" + std::to_string(i) + ":" + std::to_string(features[i]));
    };
    if (spec.renderer == Renderer::MultipleChoice) {
        ctx.push_back(vocab.id("q"));
        for (std::size_t i = 0; i < spec.n_features; ++i) ctx.push_back(ctx_tok(i));
        ctx.push_back(vocab.id("opts"));
        for (std::size_t a = 0; a < spec.decision_count; ++a) ctx.push_back(vocab.id("d" + std::to_string(a)));
    } else {
        // trajectory renderer: two pseudo steps, features split across them,
        // the second step's action missing
        const std::size_t half = (spec.n_features + 1) / 2;
        ctx.push_back(vocab.id("st"));
        for (std::size_t i = 0; i < half; ++i) ctx.push_back(ctx_tok(i));
        ctx.push_back(vocab.id("ac"));
        ctx.push_back(vocab.id("mv"));
        ctx.push_back(vocab.id("st"));
        for (std::size_t i = half; i < spec.n_features; ++i) ctx.push_back(ctx_tok(i));
        ctx.push_back(vocab.id("ac"));
    }
    return ctx;
}

std::vector<int> clue_sentence(const Vocabulary& vocab, std::size_t feature, int value) {
    return {vocab.id("f" + std::to_string(feature)), vocab.id("is"), vocab.id("v" + std::to_string(value))};
}

std::vector<int> stem_tokens(const Vocabulary& vocab) { return {vocab.id("so"), vocab.id("ans")}; }

std::vector<int> policy_prompt(const Vocabulary& vocab, const std::vector<int>& context) {
    std::vector<int> p = context;
    p.push_back(vocab.id("why"));
    return p;
}

DecisionSpace decision_space(const TaskSpec& spec, const Vocabulary& vocab) {
    std::vector<std::vector<int>> decisions;
    for (std::size_t a = 0; a < spec.decision_count; ++a)
        decisions.push_back({vocab.id("d" + std::to_string(a))});
    return DecisionSpace(std::move(decisions));
}

Dataset generate_dataset(const TaskSpec& spec, const Vocabulary& vocab) {
    spec.validate();
    Dataset ds;
    ds.label_histogram.assign(spec.decision_count, 0);
    Rng rng(mix_seed(spec.seed, 0xDA7A));
    const std::size_t total = spec.train_size + spec.eval_size;
    for (std::size_t n = 0; n < total; ++n) {
        TaskItem item;
        item.features.resize(spec.n_features);
        for (auto& f : item.features) f = static_cast<int>(rng.index(spec.feature_arity));
        item.pattern = pattern_index(spec, item.features);
        item.decision = decision_rule(spec, item.features);
        item.context = render_context(spec, vocab, item.features);
        ds.label_histogram[static_cast<std::size_t>(item.decision)]++;
        if (n < spec.train_size)
            ds.train.push_back(std::move(item));
        else
            ds.eval.push_back(std::move(item));
    }
    return ds;
}

std::vector<std::vector<int>> make_guidance_corpus(const TaskSpec& spec, const Vocabulary& vocab,
                                                   const std::vector<TaskItem>& items) {
    std::vector<std::vector<int>> corpus;
    const int delim = vocab.delimiter_id();
    const int eot = vocab.eot_id();
    const auto stem = stem_tokens(vocab);
    for (std::size_t idx = 0; idx < items.size(); ++idx) {
        const auto& item = items[idx];
        if (is_blind_spot(spec, item.pattern)) continue;
        Rng rng(mix_seed(spec.seed, 0xC0B5, idx));
        for (std::size_t s = 0; s < spec.corpus_strings_per_item; ++s) {
            std::vector<int> toks;
            if (rng.uniform() < spec.ctx_scramble_rate) {
                // decoy context: resampled features, decision kept true, so
                // the stem prediction must be priced from the clues alone
                std::vector<int> decoy(spec.n_features);
                for (auto& f : decoy) f = static_cast<int>(rng.index(spec.feature_arity));
                toks = render_context(spec, vocab, decoy);
            } else {
                toks = item.context;
            }
            std::vector<std::size_t> order(spec.n_features);
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            rng.shuffle(order);
            const std::size_t subset =
                rng.uniform() < spec.full_clue_rate ? spec.n_features : rng.index(spec.n_features + 1);
            for (std::size_t i = 0; i < subset; ++i) {
                const std::size_t f = order[i];
                auto clue = clue_sentence(vocab, f, item.features[f]);
                toks.insert(toks.end(), clue.begin(), clue.end());
                toks.push_back(delim);
            }
            toks.insert(toks.end(), stem.begin(), stem.end());
            toks.push_back(vocab.id("d" + std::to_string(item.decision)));
            toks.push_back(eot);
            corpus.push_back(std::move(toks));
        }
    }
    return corpus;
}

Explanation canonical_explanation(const TaskSpec& spec, const Vocabulary& vocab, const std::vector<int>& features) {
    Explanation e;
    for (std::size_t i = 0; i < spec.n_features; ++i)
        e.sentences.push_back(clue_sentence(vocab, i, features[i]));
    return e;
}

std::vector<EpisodeRecord> correctable_negative_set(const TaskSpec& spec, const Vocabulary& vocab,
                                                    const std::vector<TaskItem>& items,
                                                    const GuidanceModel& guidance) {
    std::vector<EpisodeRecord> out;
    const auto stem = stem_tokens(vocab);
    const auto space = decision_space(spec, vocab);
    for (const auto& item : items) {
        EpisodeRecord ep;
        ep.context = item.context;
        ep.decision = item.decision;
        ep.explanation = canonical_explanation(spec, vocab, item.features);
        const auto prompt = build_prefix_prompt(ep.context, ep.explanation, ep.explanation.count(), stem,
                                                vocab.delimiter_id(), guidance.config().n_max);
        const SimplexVector p = guidance.decision_distribution(prompt, space);
        if (p.argmax() != static_cast<std::size_t>(item.decision)) {
            ep.positive = false;
            out.push_back(std::move(ep));
        }
    }
    return out;
}

std::vector<EpisodeRecord> true_negative_set(const TaskSpec& spec, const Vocabulary& vocab,
                                             const std::vector<TaskItem>& items, const GuidanceModel& guidance,
                                             std::uint64_t seed) {
    std::vector<EpisodeRecord> out;
    const auto stem = stem_tokens(vocab);
    const auto space = decision_space(spec, vocab);
    for (std::size_t idx = 0; idx < items.size(); ++idx) {
        const auto& item = items[idx];
        Rng rng(mix_seed(seed, 0x72E6, idx));
        const std::size_t dropped = rng.index(spec.n_features);
        EpisodeRecord ep;
        ep.context = item.context;
        ep.decision = item.decision;
        for (std::size_t i = 0; i < spec.n_features; ++i)
            if (i != dropped) ep.explanation.sentences.push_back(clue_sentence(vocab, i, item.features[i]));
        const auto prompt = build_prefix_prompt(ep.context, ep.explanation, ep.explanation.count(), stem,
                                                vocab.delimiter_id(), guidance.config().n_max);
        const SimplexVector p = guidance.decision_distribution(prompt, space);
        if (p.argmax() != static_cast<std::size_t>(item.decision)) {
            ep.positive = false;
            out.push_back(std::move(ep));
        }
    }
    return out;
}

std::vector<std::vector<int>> policy_init_corpus(const TaskSpec& spec, const Vocabulary& vocab,
                                                 const std::vector<TaskItem>& items, double clue_noise,
                                                 double clue_drop, std::uint64_t seed) {
    std::vector<std::vector<int>> corpus;
    const int delim = vocab.delimiter_id();
    for (std::size_t idx = 0; idx < items.size(); ++idx) {
        const auto& item = items[idx];
        Rng rng(mix_seed(seed, 0x901C, idx));
        std::vector<std::size_t> order(spec.n_features);
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        std::vector<int> toks = policy_prompt(vocab, item.context);
        std::size_t kept = 0;
        for (std::size_t i = 0; i < order.size(); ++i) {
            const std::size_t f = order[i];
            const bool last_chance = (kept == 0 && i + 1 == order.size());
            if (!last_chance && rng.uniform() < clue_drop) continue;
            int value = item.features[f];
            if (rng.uniform() < clue_noise) {
                // corrupt to a different value
                value = static_cast<int>(rng.index(spec.feature_arity - 1));
                if (value >= item.features[f]) ++value;
            }
            auto clue = clue_sentence(vocab, f, value);
            toks.insert(toks.end(), clue.begin(), clue.end());
            toks.push_back(delim);
            ++kept;
        }
        toks.push_back(vocab.eot_id());
        corpus.push_back(std::move(toks));
    }
    return corpus;
}

} // namespace synth
} // namespace p2l
