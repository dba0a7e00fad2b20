#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "p2l/nn.hpp"
#include "p2l/param_store.hpp"
#include "p2l/rng.hpp"

namespace p2l {

struct TransformerConfig {
    std::size_t layers = 2;   // L, at least 2
    std::size_t d_model = 32; // d
    std::size_t d_k = 32;     // Q/K/V width; equals d_model (residual add)
    std::size_t heads = 1;
    std::size_t vocab = 0;    // V
    std::size_t n_max = 96;
    std::size_t d_ff = 0;     // 0 -> 4 * d_model

    std::size_t ff() const { return d_ff == 0 ? 4 * d_model : d_ff; }
    void validate() const;
};

// Forward activations kept for the backward pass.
struct TransformerCache {
    std::vector<int> ids;
    struct Block {
        Tensor x_in;          // block input (pre ln1), kept for re-running a block
        Tensor a_in, q, k, v; // attention input and projections
        Tensor m_in;          // MLP input (post ln2)
        Tensor h_pre;         // fc1 output pre-activation
        Tensor h_act;         // post-relu
        nn::AttentionCache att;
        std::vector<nn::LayerNormCache> ln1, ln2;
    };
    std::vector<Block> blocks;
    Tensor h_last;  // final block output, pre final layer norm (n x d)
    Tensor h_final; // post final layer norm (n x d); W maps this to logits
    std::vector<nn::LayerNormCache> lnf;

    std::size_t length() const { return ids.size(); }
};

// Pre-norm decoder-only transformer with learned token and absolute position
// embeddings, causal single/multi-head attention and ReLU MLP blocks.
class Transformer {
public:
    Transformer() = default;
    Transformer(TransformerConfig cfg, std::uint64_t init_seed);

    const TransformerConfig& config() const { return cfg_; }
    ParameterStore& params() { return params_; }
    const ParameterStore& params() const { return params_; }

    // Full forward; returns n x V logits (row i scores token i+1).
    Tensor forward(const std::vector<int>& ids, TransformerCache& cache) const;

    // Accumulates parameter gradients. dlogits may be empty (zero rows are
    // fine); d_h_final adds an extra gradient on the post-final-norm states
    // (used by the policy value head), pass nullptr when unused.
    void backward(const Tensor& dlogits, const Tensor* d_h_final, const TransformerCache& cache);

    // Mean next-token NLL over positions [0, n-1); fills dlogits when asked.
    double lm_loss(const std::vector<int>& ids, const TransformerCache& cache, const Tensor& logits,
                   Tensor* dlogits) const;

    struct TrainLog {
        std::vector<double> epoch_loss;
    };

    // Next-token cross-entropy training over a token-sequence corpus.
    TrainLog train_lm(const std::vector<std::vector<int>>& corpus, std::size_t epochs, double lr,
                      std::size_t batch_size, std::uint64_t seed, bool verbose = false);

    // Fraction of next-token argmax hits over a corpus.
    double next_token_accuracy(const std::vector<std::vector<int>>& corpus) const;

    // Mean per-token NLL over a corpus (perplexity = exp of this).
    double mean_nll(const std::vector<std::vector<int>>& corpus) const;

private:
    void check_ids(const std::vector<int>& ids) const;

    TransformerConfig cfg_;
    ParameterStore params_;
};

} // namespace p2l
