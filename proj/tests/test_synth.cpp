#include "doctest.h"

#include <set>

#include "p2l/synth.hpp"
#include "test_util.hpp"

using namespace p2l;

TEST_CASE("dataset generation is deterministic and label-correct") {
    const auto spec = p2l_test::tiny_spec();
    const auto vocab = synth::build_vocabulary(spec);
    const auto a = synth::generate_dataset(spec, vocab);
    const auto b = synth::generate_dataset(spec, vocab);
    REQUIRE(a.train.size() == spec.train_size);
    REQUIRE(a.eval.size() == spec.eval_size);
    for (std::size_t i = 0; i < a.train.size(); ++i) {
        CHECK(a.train[i].features == b.train[i].features);
        CHECK(a.train[i].context == b.train[i].context);
        CHECK(a.train[i].decision == synth::decision_rule(spec, a.train[i].features));
    }
}

TEST_CASE("label histogram tracks the exhaustive pattern frequencies") {
    auto spec = p2l_test::tiny_spec();
    spec.train_size = 4000;
    spec.eval_size = 100;
    const auto vocab = synth::build_vocabulary(spec);
    const auto ds = synth::generate_dataset(spec, vocab);

    // exhaustive enumeration oracle over the full feature space
    std::vector<double> expect(spec.decision_count, 0.0);
    const std::size_t patterns = spec.pattern_count();
    for (std::size_t p = 0; p < patterns; ++p)
        expect[static_cast<std::size_t>(synth::decision_rule(spec, synth::pattern_features(spec, p)))] +=
            1.0 / static_cast<double>(patterns);
    const double total = static_cast<double>(spec.train_size + spec.eval_size);
    for (std::size_t d = 0; d < spec.decision_count; ++d) {
        const double measured = static_cast<double>(ds.label_histogram[d]) / total;
        CHECK(std::abs(measured - expect[d]) <= 0.05);
    }
}

TEST_CASE("guidance corpus respects blind spots") {
    auto spec = p2l_test::tiny_spec();
    const auto vocab = synth::build_vocabulary(spec);
    const auto ds = synth::generate_dataset(spec, vocab);

    SUBCASE("eta = 0 covers every item") {
        auto open_spec = spec;
        open_spec.blind_spot_rate = 0.0;
        const auto corpus = synth::make_guidance_corpus(open_spec, vocab, ds.train);
        CHECK(corpus.size() == ds.train.size() * open_spec.corpus_strings_per_item);
    }

    SUBCASE("blind-spot items never appear (exhaustive check)") {
        const auto spots = synth::blind_spot_patterns(spec);
        REQUIRE(!spots.empty());
        std::size_t expected = 0;
        for (const auto& item : ds.train)
            if (!synth::is_blind_spot(spec, item.pattern)) ++expected;
        const auto corpus = synth::make_guidance_corpus(spec, vocab, ds.train);
        CHECK(corpus.size() == expected * spec.corpus_strings_per_item);

        // no corpus string may teach a blind-spot (clue pattern -> decision)
        // pair: reconstruct the pattern from the clue sentences when complete
        for (const auto& seq : corpus) {
            std::vector<int> feats(spec.n_features, -1);
            for (std::size_t i = 0; i + 2 < seq.size(); ++i) {
                const std::string& a = vocab.token(seq[i]);
                const std::string& b = vocab.token(seq[i + 1]);
                const std::string& c = vocab.token(seq[i + 2]);
                if (a.size() == 2 && a[0] == 'f' && b == "is" && c.size() == 2 && c[0] == 'v')
                    feats[static_cast<std::size_t>(a[1] - '0')] = c[1] - '0';
            }
            bool complete = true;
            for (int f : feats)
                if (f < 0) complete = false;
            if (complete) {
                const std::size_t pat = synth::pattern_index(spec, feats);
                CHECK(!synth::is_blind_spot(spec, pat));
                // the decision token matches the rule on the clue-stated pattern
                const std::string dec_tok = vocab.token(seq[seq.size() - 2]);
                CHECK(dec_tok == "d" + std::to_string(synth::decision_rule(spec, feats)));
            }
        }
    }
}

TEST_CASE("vocabulary closure over every generator") {
    const auto spec = p2l_test::tiny_spec();
    const auto vocab = synth::build_vocabulary(spec);
    const auto ds = synth::generate_dataset(spec, vocab);
    auto check_seq = [&](const std::vector<int>& seq) {
        for (int tok : seq) {
            CHECK(tok >= 0);
            CHECK(static_cast<std::size_t>(tok) < vocab.size());
        }
    };
    for (const auto& item : ds.train) check_seq(item.context);
    for (const auto& seq : synth::make_guidance_corpus(spec, vocab, ds.train)) check_seq(seq);
    for (const auto& seq : synth::policy_init_corpus(spec, vocab, ds.train, 0.4, 0.2, 9)) check_seq(seq);
}

TEST_CASE("spec validation checks the rule exhaustively") {
    auto spec = p2l_test::tiny_spec();
    CHECK_NOTHROW(spec.validate());
    spec.rule_weights = {1};
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
    spec = p2l_test::tiny_spec();
    spec.blind_spot_rate = 0.7;
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}

TEST_CASE("renderers produce the documented shapes") {
    auto spec = p2l_test::tiny_spec();
    const auto vocab = synth::build_vocabulary(spec);
    const std::vector<int> features = {1, 0};

    const auto mc = synth::render_context(spec, vocab, features);
    CHECK(vocab.token(mc.front()) == "q");
    CHECK(mc.size() == 1 + spec.n_features + 1 + spec.decision_count);

    spec.renderer = synth::Renderer::Trajectory;
    const auto tr = synth::render_context(spec, vocab, features);
    CHECK(vocab.token(tr.front()) == "st");
    CHECK(vocab.token(tr.back()) == "ac");
}

TEST_CASE("correctable negatives fail raw guidance by construction") {
    const auto spec = p2l_test::tiny_spec();
    const auto vocab = synth::build_vocabulary(spec);
    const auto ds = synth::generate_dataset(spec, vocab);
    GuidanceModel g = p2l_test::frozen_random_guidance(vocab.size(), 3);

    const auto negs = synth::correctable_negative_set(spec, vocab, ds.eval, g);
    const auto stem = synth::stem_tokens(vocab);
    const auto space = synth::decision_space(spec, vocab);
    Scorer scorer = [&](const std::vector<int>& prompt) { return g.decision_distribution(prompt, space); };
    for (const auto& ep : negs) {
        CHECK(ep.explanation.count() == spec.n_features);
        CHECK_FALSE(classify_sample(ep, scorer, ep.explanation.count(), stem, vocab.delimiter_id(), g.config().n_max));
    }

    // exhaustive scan oracle: recount with a direct argmax comparison
    std::size_t expect = 0;
    for (const auto& item : ds.eval) {
        const auto expl = synth::canonical_explanation(spec, vocab, item.features);
        const auto prompt =
            build_prefix_prompt(item.context, expl, expl.count(), stem, vocab.delimiter_id(), g.config().n_max);
        if (g.decision_distribution(prompt, space).argmax() != static_cast<std::size_t>(item.decision)) ++expect;
    }
    CHECK(negs.size() == expect);

    const auto tn = synth::true_negative_set(spec, vocab, ds.eval, g, 17);
    for (const auto& ep : tn) CHECK(ep.explanation.count() == spec.n_features - 1);
}

TEST_CASE("policy init corpus ends with eot and keeps at least one sentence") {
    const auto spec = p2l_test::tiny_spec();
    const auto vocab = synth::build_vocabulary(spec);
    const auto ds = synth::generate_dataset(spec, vocab);
    const auto corpus = synth::policy_init_corpus(spec, vocab, ds.train, 0.5, 0.9, 4);
    for (const auto& seq : corpus) {
        CHECK(seq.back() == vocab.eot_id());
        std::size_t delims = 0;
        for (int tok : seq)
            if (tok == vocab.delimiter_id()) ++delims;
        CHECK(delims >= 1);
    }
}
