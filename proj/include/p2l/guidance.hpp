#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "p2l/transformer.hpp"
#include "p2l/vocab.hpp"

namespace p2l {

// Ordered set of decisions, each a non-empty token-id sequence. The order is
// fixed for the lifetime of an experiment; argmax ties break to the lowest
// index.
class DecisionSpace {
public:
    DecisionSpace() = default;
    explicit DecisionSpace(std::vector<std::vector<int>> decisions) : decisions_(std::move(decisions)) {
        if (decisions_.size() < 2) throw std::invalid_argument("DecisionSpace: need at least two decisions");
        for (const auto& d : decisions_)
            if (d.empty()) throw std::invalid_argument("DecisionSpace: empty decision token sequence");
    }

    std::size_t size() const { return decisions_.size(); }
    const std::vector<int>& tokens(std::size_t i) const { return decisions_[i]; }
    const std::vector<std::vector<int>>& all() const { return decisions_; }

private:
    std::vector<std::vector<int>> decisions_;
};

struct GuidanceConfig {
    TransformerConfig net;
    std::size_t train_epochs = 10;
    double lr = 1e-3;
    std::size_t batch_size = 16;
};

// Frozen miniature decoder transformer: maps a prompt to last-layer hidden
// states and decision logits/distributions. After freeze() no operation may
// mutate the parameters; the checksum pins that contract.
class GuidanceModel {
public:
    GuidanceModel() = default;
    GuidanceModel(TransformerConfig cfg, std::uint64_t init_seed) : net_(cfg, init_seed) {}

    Transformer& net() { return net_; }
    const Transformer& net() const { return net_; }
    const TransformerConfig& config() const { return net_.config(); }

    bool frozen() const { return frozen_; }
    void freeze() {
        frozen_ = true;
        for (std::size_t i = 0; i < net_.params().size(); ++i) net_.params().param(i).trainable = false;
        checksum_ = net_.params().checksum();
    }
    std::uint64_t checksum() const { return frozen_ ? checksum_ : net_.params().checksum(); }

    // Full forward; exposes every layer activation through the cache.
    Tensor forward_hidden(const std::vector<int>& tokens, TransformerCache& cache) const {
        return net_.forward(tokens, cache);
    }

    // Mean teacher-forced logit of the decision tokens after the prompt.
    double decision_logits(const std::vector<int>& prompt, const std::vector<int>& decision) const;

    // Softmax over the mean logits of every decision, in DecisionSpace order.
    SimplexVector decision_distribution(const std::vector<int>& prompt, const DecisionSpace& space) const;

private:
    Transformer net_;
    bool frozen_ = false;
    std::uint64_t checksum_ = 0;
};

// Pretrains a guidance model on a token-sequence corpus by next-token cross
// entropy, then freezes it.
GuidanceModel train_guidance(const std::vector<std::vector<int>>& corpus, const GuidanceConfig& cfg,
                             std::uint64_t seed, std::vector<double>* loss_curve = nullptr, bool verbose = false);

} // namespace p2l
