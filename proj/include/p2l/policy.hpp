#pragma once

#include <cstdint>
#include <memory>
#include <utility>
#include <vector>

#include "p2l/reward.hpp"
#include "p2l/transformer.hpp"

namespace p2l {

struct GenerationConfig {
    double temperature = 0.7;
    std::size_t max_sentences = 5;
    std::size_t max_tokens_per_sentence = 8;

    void validate() const;
};

struct PpoConfig {
    double clip = 0.2;
    double gamma = 1.0;
    double gae_lambda = 0.95;
    double kl_beta = 0.02;
    double entropy_coef = 0.01;
    double value_coef = 0.5;
    double lr = 2e-4;                 // linearly decayed to zero within a round
    std::size_t epochs_per_round = 10; // rollout iterations per round
    std::size_t episodes_per_iter = 64;
    std::size_t update_epochs = 2;    // optimization passes per rollout batch
    std::size_t minibatch = 16;
    std::size_t rounds = 2;
    bool spread_rewards_uniform = false; // ablation: spread a sentence reward over its tokens
    bool normalize_advantages = true;

    void validate() const;
};

// Decoder policy backbone plus a scalar value head and a frozen reference
// snapshot for the KL penalty. The value head never exists on the guidance
// model.
class PolicyModel {
public:
    struct TokenIds {
        int pad = 0, delimiter = 0, eot = 0;
    };

    PolicyModel() = default;
    PolicyModel(TransformerConfig cfg, TokenIds ids, std::uint64_t init_seed);

    Transformer& net() { return net_; }
    const Transformer& net() const { return net_; }
    const TokenIds& ids() const { return ids_; }

    void snapshot_reference() { ref_ = std::make_shared<Transformer>(net_); }
    bool has_reference() const { return ref_ != nullptr; }
    const Transformer& reference() const;

    // Scalar value from a post-final-norm hidden row.
    double value(const double* h_row) const;

private:
    friend struct PolicyOps;
    Transformer net_;
    TokenIds ids_{};
    std::shared_ptr<Transformer> ref_;
};

struct GenerationResult {
    Explanation explanation;
    std::vector<int> response; // sampled tokens, sentence delimiters included, optional trailing eot
    std::vector<double> logp;  // log-prob of each response token under the sampling distribution
    std::vector<std::pair<std::size_t, std::size_t>> spans; // [begin, end) response ranges per sentence
    bool ended_with_eot = false;
};

// Autoregressive sampling at temperature tau with structural masking: no
// empty sentences, sentence caps force the delimiter, the sentence budget
// forces end-of-text. tau <= 1e-8 decodes greedily.
GenerationResult generate_explanation(const PolicyModel& policy, const std::vector<int>& prompt,
                                      const GenerationConfig& cfg, Rng& rng);

// Log-probs of an existing response under the given net (same masking rules);
// used for the KL reference and PPO recomputation.
std::vector<double> response_logp(const Transformer& net, const PolicyModel::TokenIds& ids,
                                  const std::vector<int>& prompt, const std::vector<int>& response,
                                  const GenerationConfig& cfg);

// Sentence reward lands on each sentence's final token (or is spread
// uniformly over the sentence); every token also pays -beta * kl.
std::vector<double> attribute_rewards(const RewardTrace& trace,
                                      const std::vector<std::pair<std::size_t, std::size_t>>& spans,
                                      std::size_t total_tokens, const std::vector<double>& kl_per_token, double beta,
                                      bool spread_uniform = false);

struct PpoEpisode {
    std::vector<int> prompt;
    std::vector<int> response;
    std::vector<double> old_logp;
    std::vector<double> token_rewards;
};

struct PpoStats {
    double surrogate = 0.0;
    double value_loss = 0.0;
    double entropy = 0.0;
    double approx_kl = 0.0;
    std::size_t tokens = 0;
};

// One PPO update on a rollout batch: GAE advantages from the value head,
// clipped surrogate with value and entropy terms, minibatched Adam steps.
PpoStats ppo_update(PolicyModel& policy, const std::vector<PpoEpisode>& batch, const PpoConfig& cfg,
                    const GenerationConfig& gen, double lr_now, std::uint64_t seed);

} // namespace p2l
