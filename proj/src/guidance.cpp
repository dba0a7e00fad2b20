#include "p2l/guidance.hpp"

#include <stdexcept>

namespace p2l {

double GuidanceModel::decision_logits(const std::vector<int>& prompt, const std::vector<int>& decision) const {
    if (decision.empty()) throw std::invalid_argument("decision_logits: empty decision");
    if (prompt.empty()) throw std::invalid_argument("decision_logits: empty prompt");
    std::vector<int> full = prompt;
    full.insert(full.end(), decision.begin(), decision.end());

    TransformerCache cache;
    Tensor logits = net_.forward(full, cache);
    // logit of decision token k sits at the position right before it
    double sum = 0.0;
    for (std::size_t k = 0; k < decision.size(); ++k) {
        const std::size_t pos = prompt.size() + k - 1;
        sum += logits(pos, static_cast<std::size_t>(decision[k]));
    }
    return sum / static_cast<double>(decision.size());
}

SimplexVector GuidanceModel::decision_distribution(const std::vector<int>& prompt, const DecisionSpace& space) const {
    bool all_single = true;
    for (const auto& d : space.all())
        if (d.size() != 1) all_single = false;

    std::vector<double> means(space.size());
    if (all_single) {
        // one forward scores every decision: the logit row at the last prompt
        // position is bitwise identical to the teacher-forced path (causality)
        TransformerCache cache;
        Tensor logits = net_.forward(prompt, cache);
        const std::size_t last = prompt.size() - 1;
        for (std::size_t i = 0; i < space.size(); ++i)
            means[i] = logits(last, static_cast<std::size_t>(space.tokens(i)[0]));
    } else {
        for (std::size_t i = 0; i < space.size(); ++i) means[i] = decision_logits(prompt, space.tokens(i));
    }
    return nn::softmax(means);
}

GuidanceModel train_guidance(const std::vector<std::vector<int>>& corpus, const GuidanceConfig& cfg,
                             std::uint64_t seed, std::vector<double>* loss_curve, bool verbose) {
    if (corpus.empty()) throw std::invalid_argument("train_guidance: empty corpus");
    GuidanceModel model(cfg.net, seed);
    auto log = model.net().train_lm(corpus, cfg.train_epochs, cfg.lr, cfg.batch_size, splitmix64(seed ^ 0x7261696ECULL),
                                    verbose);
    if (loss_curve != nullptr) *loss_curve = log.epoch_loss;
    model.freeze();
    return model;
}

} // namespace p2l
