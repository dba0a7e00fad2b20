#pragma once

#include "p2l/guidance.hpp"
#include "p2l/synth.hpp"

namespace p2l_test {

// Tiny clue world: 2 features x 2 values (4 patterns), 3 decisions.
inline p2l::synth::TaskSpec tiny_spec() {
    p2l::synth::TaskSpec spec;
    spec.decision_count = 3;
    spec.n_features = 2;
    spec.feature_arity = 2;
    spec.rule_weights = {1, 2};
    spec.rule_offset = 0;
    spec.blind_spot_rate = 0.25;
    spec.train_size = 60;
    spec.eval_size = 20;
    spec.corpus_strings_per_item = 2;
    spec.ctx_scramble_rate = 1.0;
    spec.seed = 7;
    return spec;
}

inline p2l::TransformerConfig tiny_net(std::size_t vocab) {
    p2l::TransformerConfig cfg;
    cfg.layers = 2;
    cfg.d_model = 12;
    cfg.d_k = 12;
    cfg.heads = 1;
    cfg.vocab = vocab;
    cfg.n_max = 64;
    cfg.d_ff = 24;
    return cfg;
}

// Frozen random-weight guidance: cheap stand-in wherever training quality
// does not matter.
inline p2l::GuidanceModel frozen_random_guidance(std::size_t vocab, std::uint64_t seed = 5) {
    p2l::GuidanceModel g(tiny_net(vocab), seed);
    g.freeze();
    return g;
}

} // namespace p2l_test
