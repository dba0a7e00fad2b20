#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "p2l/param_store.hpp"
#include "p2l/rng.hpp"
#include "p2l/tensor.hpp"

namespace p2l {

// Probability distribution over the decision set. Entries are non-negative
// and sum to one; argmax ties break to the lowest index everywhere.
struct SimplexVector {
    std::vector<double> p;

    std::size_t size() const { return p.size(); }
    double operator[](std::size_t i) const { return p[i]; }

    std::size_t argmax() const {
        std::size_t best = 0;
        for (std::size_t i = 1; i < p.size(); ++i)
            if (p[i] > p[best]) best = i;
        return best;
    }
};

namespace nn {

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

// Max-subtracted softmax; output entries positive and summing to 1.
SimplexVector softmax(const std::vector<double>& v);

// dv given the forward output p and upstream dp.
std::vector<double> softmax_backward(const std::vector<double>& p, const std::vector<double>& dp);

double log_sum_exp(const std::vector<double>& v);

// ---------------------------------------------------------------------------
// layer norm
// ---------------------------------------------------------------------------

constexpr double kLayerNormEps = 1e-5;

std::vector<double> layer_norm(const std::vector<double>& v, const std::vector<double>& gain,
                               const std::vector<double>& bias, double epsilon = kLayerNormEps);

struct LayerNormCache {
    std::vector<double> x_hat; // normalized input
    double inv_std = 0.0;
};

std::vector<double> layer_norm_forward(const std::vector<double>& v, const std::vector<double>& gain,
                                       const std::vector<double>& bias, double epsilon, LayerNormCache& cache);

// Returns dv; accumulates dgain/dbias.
std::vector<double> layer_norm_backward(const std::vector<double>& dy, const std::vector<double>& gain,
                                        const LayerNormCache& cache, std::vector<double>& dgain,
                                        std::vector<double>& dbias);

// ---------------------------------------------------------------------------
// affine / activation
// ---------------------------------------------------------------------------

// y = x W + b with W of shape [in][out].
std::vector<double> linear(const std::vector<double>& x, const Tensor& w, const std::vector<double>& b);

// dx returned; dW/db accumulated.
std::vector<double> linear_backward(const std::vector<double>& dy, const std::vector<double>& x, const Tensor& w,
                                    Tensor& dw, std::vector<double>& db);

// Row-wise Y = X W (+ b per row). X: n x in, W: in x out.
Tensor matmul(const Tensor& x, const Tensor& w);
Tensor matmul_add_rows(const Tensor& x, const Tensor& w, const std::vector<double>& b);

// dX returned; dW accumulated. (Row-wise linear backward without bias.)
Tensor matmul_backward(const Tensor& dy, const Tensor& x, const Tensor& w, Tensor& dw);

std::vector<double> relu(const std::vector<double>& x);
std::vector<double> relu_backward(const std::vector<double>& dy, const std::vector<double>& x);

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

// Mask convention: allowed(i, j) says whether query row i may read key row j.
// Disallowed pairs get -inf logits, i.e. they are skipped exactly.
using AttentionMask = std::function<bool(std::size_t, std::size_t)>;

// Every production mask is a key prefix: row i attends keys [0, extent(i)).
// Causal attention is extent(i) = i + 1; the flow's joint attention extends
// prompt rows causally and flow rows over everything. One shared kernel keeps
// the arithmetic (and therefore the bits) identical across those paths.
using RowExtent = std::function<std::size_t(std::size_t)>;

struct AttentionCache {
    Tensor probs; // (heads * nq) x nk softmax rows
    std::size_t heads = 1;
};

// Prefix-masked scaled-dot-product attention. Q: nq x dk, K/V: nk x dk.
// heads must divide dk; scaling is sqrt(dk / heads) per head.
// Throws std::invalid_argument if any query row has an empty extent.
Tensor masked_attention_forward(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                                const RowExtent& extent, AttentionCache& cache);

void masked_attention_backward(const Tensor& dout, const Tensor& q, const Tensor& k, const Tensor& v,
                               const AttentionCache& cache, Tensor& dq, Tensor& dk, Tensor& dv);

// Single-head attention over a shared input: softmax(H Wq (H Wk)^T / sqrt(dk)) H Wv.
// mask, when present, is an n x n row-major boolean matrix (true = allowed).
Tensor attention(const Tensor& h, const Tensor& wq, const Tensor& wk, const Tensor& wv,
                 const std::vector<std::vector<bool>>* mask = nullptr);

// ---------------------------------------------------------------------------
// positional encoding for ODE time
// ---------------------------------------------------------------------------

// PE(t)[2i] = sin(t * w_i), PE(t)[2i+1] = cos(t * w_i), w_i = 1000^{2i/d}.
std::vector<double> positional_encoding(double t, std::size_t d);

// ---------------------------------------------------------------------------
// mlp
// ---------------------------------------------------------------------------

enum class Activation { Linear, Relu };

struct MlpLayerSpec {
    const Tensor* w = nullptr;
    const std::vector<double>* b = nullptr;
    Activation act = Activation::Linear;
    const std::vector<double>* ln_gain = nullptr; // layer norm applied when set
    const std::vector<double>* ln_bias = nullptr;
};

// Sequential affine -> activation -> (layer norm) per layer.
std::vector<double> mlp_forward(const std::vector<double>& x, const std::vector<MlpLayerSpec>& layers);

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

// Central-difference check of every trainable parameter: returns
// max |analytic - numeric| / max(1, |numeric|). f must populate gradients
// via store when asked (compute_grads=true) and return the scalar loss.
double grad_check(const std::function<double(ParameterStore&, bool)>& f, ParameterStore& store, double h);

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

// Adam with bias correction; moments keyed by parameter index.
class Adam {
public:
    struct Settings {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
    };

    explicit Adam(Settings s) : s_(s) {}

    void step(ParameterStore& store, double lr_override = -1.0);
    void reset() { m_.clear(); v_.clear(); t_ = 0; }

private:
    Settings s_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

// Gaussian init helper: fills a tensor with N(0, stddev^2) draws.
Tensor gaussian_tensor(std::vector<std::size_t> shape, Rng& rng, double stddev);

} // namespace nn
} // namespace p2l
