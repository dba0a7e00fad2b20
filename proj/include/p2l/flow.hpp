#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "p2l/guidance.hpp"
#include "p2l/nn.hpp"

namespace p2l {

// ODE state z_t at time t.
struct FlowState {
    std::vector<double> z;
    double t = 0.0;

    void validate() const;
};

struct FlowConfig {
    std::size_t n_decisions = 0; // |A|
    std::size_t d_model = 0;     // must equal the bound guidance d
    std::size_t pe_dim = 0;      // 0 -> d_model (must be even)
    std::size_t proj_hidden = 0; // 0 -> d_model
    double sigma_z = 1.0;
    std::size_t ode_steps = 10;
    std::size_t train_epochs = 100;
    double lr = 2e-4; // fixed, no schedule
    std::size_t batch_size = 128;
    bool sample_target = false;     // one-hot draws instead of the vector target
    bool reinit_per_round = false;  // retrain from scratch each round

    std::size_t pe() const { return pe_dim == 0 ? d_model : pe_dim; }
    std::size_t hidden() const { return proj_hidden == 0 ? d_model : proj_hidden; }
};

// Cached last-layer keys/values of the bound guidance model for one prompt.
// A pure function of (guidance checksum, prompt tokens).
struct PromptCache {
    std::vector<int> tokens;
    Tensor k, v; // n x d_k, absent when the prompt is empty
    std::uint64_t guidance_checksum = 0;

    std::size_t length() const { return tokens.size(); }
};

PromptCache build_prompt_cache(const GuidanceModel& guidance, const std::vector<int>& tokens);

namespace detail {

struct EmbMlpCache {
    std::vector<double> x, h_pre, h_act, h_ln;
    nn::LayerNormCache ln;
};

struct ProjLayerCache {
    std::vector<double> in, h_pre, h_act;
    nn::LayerNormCache ln;
};

} // namespace detail

// Forward activations of one vector-field evaluation.
struct FlowForwardCache {
    std::vector<double> pe;
    detail::EmbMlpCache emb_t, emb_z;
    Tensor h_emb;           // 2 x d flow tokens
    Tensor qf, kf, vf;      // 2 x d_k
    Tensor comb_k, comb_v;  // (n + 2) x d_k
    nn::AttentionCache att;
    std::vector<double> h_attn_z;
    std::vector<detail::ProjLayerCache> proj;
    std::vector<double> phi;
    FlowState state;
};

// The rectified flow vector field embedded in the frozen guidance model's
// last attention layer. Only the two embedding MLPs and the projector are
// trainable; the guidance parameters never change.
class FlowModel {
public:
    FlowModel(FlowConfig cfg, const GuidanceModel& guidance, std::uint64_t init_seed);

    const FlowConfig& config() const { return cfg_; }
    ParameterStore& params() { return params_; }
    const ParameterStore& params() const { return params_; }
    const GuidanceModel& guidance() const { return *guidance_; }
    std::uint64_t bound_checksum() const { return bound_checksum_; }

    // Flow tokens H_Emb in R^{2 x d}: row 0 the time token, row 1 the state token.
    Tensor embed_flow_tokens(const FlowState& state, FlowForwardCache* cache = nullptr) const;

    // Projects the flow tokens through the guidance last-layer Wq/Wk/Wv; flow
    // queries attend over [prompt keys || flow keys]; returns the state
    // token's post-attention row. Prompt tokens never attend to flow tokens.
    std::vector<double> cross_attend(const Tensor& h_emb, const PromptCache& prompt,
                                     FlowForwardCache* cache = nullptr) const;

    // phi(t, z_t): projector over h_Attn,z with z_t and t appended to every
    // layer input (skip connections).
    std::vector<double> vector_field(const FlowState& state, const PromptCache& prompt,
                                     FlowForwardCache* cache = nullptr) const;

    // Accumulates gradients of dphi into the trainable parameters.
    void backward(const std::vector<double>& dphi, const FlowForwardCache& cache);

    struct Batch {
        struct Item {
            std::vector<double> z0, z1;
            double t = 0.0;
            const PromptCache* prompt = nullptr;
        };
        std::vector<Item> items;
    };

    // Mean over the batch of ||(z1 - z0) - phi(t, z_t)||^2, z_t interpolated.
    double flow_loss(const Batch& batch, bool accumulate_grads = false);

    struct TrainSample {
        const PromptCache* prompt = nullptr;
        SimplexVector target;
    };

    struct TrainLog {
        std::vector<double> epoch_loss;
        double zero_field_baseline = 0.0; // mean ||z1 - z0||^2 over the run
    };

    // Rectified-flow training on positive samples: per step z0 ~ N(0, sigma_z^2 I),
    // t ~ U[0,1], z1 the sample target. Fixed learning rate.
    TrainLog train(const std::vector<TrainSample>& positives, std::size_t epochs, double lr, std::uint64_t seed,
                   bool verbose = false);

    // Euler-integrates dz = phi(t, z) dt from z0 ~ N(0, sigma_z^2 I) (or a
    // caller-fixed z0) and returns the raw endpoint plus its simplex
    // projection. Throws NumericError on non-finite states.
    struct Generated {
        std::vector<double> raw;
        SimplexVector projected;
    };
    Generated generate_distribution(const PromptCache& prompt, std::size_t steps, Rng& rng) const;
    Generated generate_from(const PromptCache& prompt, std::size_t steps, std::vector<double> z0) const;

private:
    void check_prompt(const PromptCache& prompt) const;
    std::vector<double> emb_mlp_forward(const std::string& prefix, const std::vector<double>& x,
                                        detail::EmbMlpCache* cache) const;
    void emb_mlp_backward(const std::string& prefix, const std::vector<double>& dy,
                          const detail::EmbMlpCache& cache);

    FlowConfig cfg_;
    ParameterStore params_;
    const GuidanceModel* guidance_ = nullptr;
    std::uint64_t bound_checksum_ = 0;
};

// Residual form of the flow loss for a single sample (test oracle helper).
double flow_residual_loss(const std::vector<double>& u, const std::vector<double>& phi);

// Clamp negatives to zero and renormalize by the positive mass; uniform when
// nothing is positive.
SimplexVector simplex_project(const std::vector<double>& raw);

// Test/acceptance path: guidance logits recomputed through a joint last-layer
// attention with the flow tokens present but masked away from prompt queries.
// Must be bitwise equal to the plain forward; also yields h_Attn,z.
struct JointForwardResult {
    Tensor logits;
    std::vector<double> h_attn_z;
};
JointForwardResult guidance_logits_with_flow_tokens(const FlowModel& flow, const std::vector<int>& tokens,
                                                    const FlowState& state);

} // namespace p2l
