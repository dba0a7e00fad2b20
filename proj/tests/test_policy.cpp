#include "doctest.h"

#include <cmath>

#include "p2l/errors.hpp"
#include "p2l/policy.hpp"
#include "test_util.hpp"

using namespace p2l;

namespace {

PolicyModel tiny_policy(std::size_t vocab = 12, std::uint64_t seed = 3) {
    // specials: 0 pad, 1 delimiter, 2 eot
    return PolicyModel(p2l_test::tiny_net(vocab), {0, 1, 2}, seed);
}

GenerationConfig tiny_gen(double tau = 0.7) {
    GenerationConfig g;
    g.temperature = tau;
    g.max_sentences = 3;
    g.max_tokens_per_sentence = 4;
    return g;
}

} // namespace

TEST_CASE("generate_explanation") {
    PolicyModel policy = tiny_policy();
    const std::vector<int> prompt = {3, 4, 5};

    SUBCASE("temperature -> 0 equals greedy decoding, and is deterministic") {
        Rng r1(1), r2(2);
        const auto a = generate_explanation(policy, prompt, tiny_gen(1e-9), r1);
        const auto b = generate_explanation(policy, prompt, tiny_gen(1e-9), r2);
        CHECK(a.response == b.response);
        for (double lp : a.logp) CHECK(lp == 0.0); // greedy: probability one
    }

    SUBCASE("same seed and context give identical output") {
        Rng r1(42), r2(42);
        const auto a = generate_explanation(policy, prompt, tiny_gen(), r1);
        const auto b = generate_explanation(policy, prompt, tiny_gen(), r2);
        CHECK(a.response == b.response);
        CHECK(a.logp == b.logp);
    }

    SUBCASE("limits are enforced and sentences are never empty") {
        for (std::uint64_t seed = 0; seed < 30; ++seed) {
            Rng rng(seed);
            const auto g = generate_explanation(policy, prompt, tiny_gen(2.0), rng);
            CHECK(g.explanation.count() >= 1);
            CHECK(g.explanation.count() <= 3);
            for (const auto& s : g.explanation.sentences) {
                CHECK(!s.empty());
                CHECK(s.size() <= 4);
            }
            CHECK_NOTHROW(g.explanation.validate(1));
        }
    }

    SUBCASE("recorded log-probs match recomputation exactly") {
        Rng rng(7);
        const auto g = generate_explanation(policy, prompt, tiny_gen(), rng);
        const auto again = response_logp(policy.net(), policy.ids(), prompt, g.response, tiny_gen());
        REQUIRE(again.size() == g.logp.size());
        for (std::size_t t = 0; t < again.size(); ++t) CHECK(std::abs(again[t] - g.logp[t]) <= 1e-10);
    }

    SUBCASE("spans partition the sentence tokens") {
        Rng rng(19);
        const auto g = generate_explanation(policy, prompt, tiny_gen(), rng);
        std::size_t expect = 0;
        REQUIRE(g.spans.size() == g.explanation.count());
        for (std::size_t i = 0; i < g.spans.size(); ++i) {
            CHECK(g.spans[i].first == expect);
            expect = g.spans[i].second;
            // the span covers the sentence plus its delimiter
            CHECK(g.spans[i].second - g.spans[i].first == g.explanation.sentences[i].size() + 1);
        }
        CHECK(expect <= g.response.size());
    }
}

TEST_CASE("attribute_rewards") {
    RewardTrace trace;
    trace.rewards = {0.3};

    SUBCASE("single sentence lands the reward on the final token") {
        std::vector<std::pair<std::size_t, std::size_t>> spans = {{0, 3}};
        std::vector<double> kl(4, 0.0);
        const auto r = attribute_rewards(trace, spans, 4, kl, 0.0);
        CHECK(r == std::vector<double>{0.0, 0.0, 0.3, 0.0});
    }

    SUBCASE("zero trace with zero beta gives all-zero rewards") {
        RewardTrace zt;
        zt.rewards = {0.0, 0.0};
        std::vector<std::pair<std::size_t, std::size_t>> spans = {{0, 2}, {2, 5}};
        std::vector<double> kl(5, 0.0);
        for (double r : attribute_rewards(zt, spans, 5, kl, 0.0)) CHECK(r == 0.0);
    }

    SUBCASE("accounting identity: totals match sentence rewards minus beta KL") {
        RewardTrace t2;
        t2.rewards = {0.25, -0.1};
        std::vector<std::pair<std::size_t, std::size_t>> spans = {{0, 2}, {2, 4}};
        std::vector<double> kl = {0.1, 0.2, 0.0, 0.3, 0.4};
        const double beta = 0.5;
        for (bool uniform : {false, true}) {
            const auto r = attribute_rewards(t2, spans, 5, kl, beta, uniform);
            double total = 0.0, kl_total = 0.0;
            for (double x : r) total += x;
            for (double x : kl) kl_total += x;
            CHECK(total == doctest::Approx(0.25 - 0.1 - beta * kl_total).epsilon(1e-12));
        }
    }

    SUBCASE("span mismatch throws") {
        std::vector<std::pair<std::size_t, std::size_t>> bad = {{0, 2}, {3, 4}};
        std::vector<double> kl(4, 0.0);
        CHECK_THROWS_AS(attribute_rewards(trace, bad, 4, kl, 0.0), std::invalid_argument);
    }
}

namespace {

// assembles an episode whose old log-probs come from the policy itself, so
// the first update pass sees ratio exactly one
PpoEpisode make_episode(const PolicyModel& policy, const std::vector<int>& prompt, const GenerationConfig& gen,
                        std::uint64_t seed, const std::vector<double>* rewards = nullptr) {
    Rng rng(seed);
    PolicyModel copy = policy; // generation must not disturb the caller's model
    const auto g = generate_explanation(copy, prompt, gen, rng);
    PpoEpisode ep;
    ep.prompt = prompt;
    ep.response = g.response;
    ep.old_logp = g.logp;
    ep.token_rewards.assign(g.response.size(), 0.0);
    if (rewards != nullptr) ep.token_rewards = *rewards;
    return ep;
}

} // namespace

TEST_CASE("ppo_update") {
    const std::vector<int> prompt = {3, 4, 5};
    const auto gen = tiny_gen();

    SUBCASE("ratio one everywhere: surrogate equals the mean advantage") {
        PolicyModel policy = tiny_policy();
        PpoConfig cfg;
        cfg.update_epochs = 1;
        cfg.minibatch = 64; // single minibatch
        cfg.normalize_advantages = false;
        cfg.gamma = 1.0;
        cfg.gae_lambda = 1.0;
        cfg.entropy_coef = 0.0;

        auto ep = make_episode(policy, prompt, gen, 5);
        // constant positive reward on every token
        for (auto& r : ep.token_rewards) r = 0.5;
        const auto stats = ppo_update(policy, {ep}, cfg, gen, 1e-6, 1);

        // value head starts at zero, so advantages are reward-to-go
        const std::size_t T = ep.response.size();
        double expect = 0.0;
        for (std::size_t t = 0; t < T; ++t) expect += 0.5 * static_cast<double>(T - t);
        expect /= static_cast<double>(T);
        CHECK(stats.surrogate == doctest::Approx(expect).epsilon(1e-9));
    }

    SUBCASE("ratio two with positive advantages clips to 1.2 advantage") {
        PolicyModel policy = tiny_policy();
        PpoConfig cfg;
        cfg.update_epochs = 1;
        cfg.minibatch = 64;
        cfg.normalize_advantages = false;
        cfg.gamma = 1.0;
        cfg.gae_lambda = 1.0;
        cfg.clip = 0.2;
        cfg.entropy_coef = 0.0;

        auto ep = make_episode(policy, prompt, gen, 5);
        for (auto& r : ep.token_rewards) r = 0.5;
        // fake the old log-probs so that ratio = exp(logp - old) = 2
        for (auto& lp : ep.old_logp) lp -= std::log(2.0);
        const auto stats = ppo_update(policy, {ep}, cfg, gen, 1e-6, 1);

        const std::size_t T = ep.response.size();
        double expect = 0.0;
        for (std::size_t t = 0; t < T; ++t) expect += 1.2 * 0.5 * static_cast<double>(T - t);
        expect /= static_cast<double>(T);
        CHECK(stats.surrogate == doctest::Approx(expect).epsilon(1e-9));
    }

    SUBCASE("zero rewards and zero value head: zero advantages, zero surrogate") {
        PolicyModel policy = tiny_policy();
        PpoConfig cfg;
        cfg.update_epochs = 1;
        cfg.minibatch = 64;
        cfg.normalize_advantages = false;
        cfg.entropy_coef = 0.0;
        auto ep = make_episode(policy, prompt, gen, 9);
        const auto stats = ppo_update(policy, {ep}, cfg, gen, 1e-6, 1);
        CHECK(stats.surrogate == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(stats.value_loss == doctest::Approx(0.0).epsilon(1e-12));
    }

    SUBCASE("GAE with gamma = lambda = 1 equals reward-to-go minus baseline") {
        // direct-sum oracle on a short synthetic sequence, checked through the
        // surrogate at ratio one (same path as the first subcase but with a
        // nonuniform reward pattern)
        PolicyModel policy = tiny_policy();
        PpoConfig cfg;
        cfg.update_epochs = 1;
        cfg.minibatch = 64;
        cfg.normalize_advantages = false;
        cfg.gamma = 1.0;
        cfg.gae_lambda = 1.0;
        cfg.entropy_coef = 0.0;
        auto ep = make_episode(policy, prompt, gen, 13);
        Rng rng(31);
        for (auto& r : ep.token_rewards) r = rng.uniform(-0.5, 0.5);
        const auto stats = ppo_update(policy, {ep}, cfg, gen, 1e-6, 1);
        const std::size_t T = ep.response.size();
        double expect = 0.0;
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t u = t; u < T; ++u) expect += ep.token_rewards[u] / static_cast<double>(T);
        CHECK(stats.surrogate == doctest::Approx(expect).epsilon(1e-9));
    }

    SUBCASE("clipped surrogate never exceeds the unclipped one for positive advantages") {
        Rng rng(7);
        for (int trial = 0; trial < 200; ++trial) {
            const double adv = rng.uniform(0.0, 2.0);
            const double ratio = rng.uniform(1.2 + 1e-9, 4.0);
            const double clipped = std::min(ratio * adv, 1.2 * adv);
            CHECK(clipped <= ratio * adv);
        }
    }

    SUBCASE("updates actually move the policy") {
        PolicyModel policy = tiny_policy();
        const auto before = policy.net().params().checksum();
        PpoConfig cfg;
        cfg.update_epochs = 2;
        cfg.minibatch = 2;
        auto e1 = make_episode(policy, prompt, gen, 1);
        auto e2 = make_episode(policy, prompt, gen, 2);
        for (auto& r : e1.token_rewards) r = 0.3;
        for (auto& r : e2.token_rewards) r = -0.2;
        ppo_update(policy, {e1, e2}, cfg, gen, 1e-3, 4);
        CHECK(policy.net().params().checksum() != before);
    }
}

TEST_CASE("reference snapshot for the KL penalty") {
    PolicyModel policy = tiny_policy();
    CHECK_FALSE(policy.has_reference());
    CHECK_THROWS_AS(policy.reference(), InvalidStateError);
    policy.snapshot_reference();
    REQUIRE(policy.has_reference());
    CHECK(policy.reference().params().checksum() == policy.net().params().checksum());

    // after an update the reference stays fixed
    const auto gen = tiny_gen();
    auto ep = make_episode(policy, {3, 4}, gen, 5);
    for (auto& r : ep.token_rewards) r = 0.4;
    PpoConfig cfg;
    const auto ref_before = policy.reference().params().checksum();
    ppo_update(policy, {ep}, cfg, gen, 1e-3, 2);
    CHECK(policy.reference().params().checksum() == ref_before);
    CHECK(policy.net().params().checksum() != policy.reference().params().checksum());
}

TEST_CASE("value head lives on the policy and starts at zero") {
    PolicyModel policy = tiny_policy();
    CHECK(policy.net().params().has("vh.fc1.w"));
    std::vector<double> h(policy.net().config().d_model, 0.7);
    CHECK(policy.value(h.data()) == 0.0);
}
