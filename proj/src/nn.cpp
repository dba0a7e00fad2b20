#include "p2l/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace p2l {
namespace nn {

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

SimplexVector softmax(const std::vector<double>& v) {
    if (v.empty()) throw std::invalid_argument("softmax: empty input");
    double mx = -std::numeric_limits<double>::infinity();
    for (double x : v) {
        if (!std::isfinite(x)) throw std::invalid_argument("softmax: non-finite input");
        mx = std::max(mx, x);
    }
    SimplexVector out;
    out.p.resize(v.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out.p[i] = std::exp(v[i] - mx);
        sum += out.p[i];
    }
    for (double& x : out.p) x /= sum;
    return out;
}

std::vector<double> softmax_backward(const std::vector<double>& p, const std::vector<double>& dp) {
    double dot = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) dot += p[i] * dp[i];
    std::vector<double> dv(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) dv[i] = p[i] * (dp[i] - dot);
    return dv;
}

double log_sum_exp(const std::vector<double>& v) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double x : v) mx = std::max(mx, x);
    double sum = 0.0;
    for (double x : v) sum += std::exp(x - mx);
    return mx + std::log(sum);
}

// ---------------------------------------------------------------------------
// layer norm
// ---------------------------------------------------------------------------

std::vector<double> layer_norm(const std::vector<double>& v, const std::vector<double>& gain,
                               const std::vector<double>& bias, double epsilon) {
    LayerNormCache cache;
    return layer_norm_forward(v, gain, bias, epsilon, cache);
}

std::vector<double> layer_norm_forward(const std::vector<double>& v, const std::vector<double>& gain,
                                       const std::vector<double>& bias, double epsilon, LayerNormCache& cache) {
    const std::size_t n = v.size();
    if (gain.size() != n || bias.size() != n)
        throw std::invalid_argument("layer_norm: length mismatch");
    if (!(epsilon > 0.0)) throw std::invalid_argument("layer_norm: epsilon must be positive");
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= static_cast<double>(n);
    cache.inv_std = 1.0 / std::sqrt(var + epsilon);
    cache.x_hat.resize(n);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        cache.x_hat[i] = (v[i] - mean) * cache.inv_std;
        out[i] = gain[i] * cache.x_hat[i] + bias[i];
    }
    return out;
}

std::vector<double> layer_norm_backward(const std::vector<double>& dy, const std::vector<double>& gain,
                                        const LayerNormCache& cache, std::vector<double>& dgain,
                                        std::vector<double>& dbias) {
    const std::size_t n = dy.size();
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double g = dy[i] * gain[i];
        sum_g += g;
        sum_gx += g * cache.x_hat[i];
        dgain[i] += dy[i] * cache.x_hat[i];
        dbias[i] += dy[i];
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    std::vector<double> dx(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double g = dy[i] * gain[i];
        dx[i] = (g - sum_g * inv_n - cache.x_hat[i] * sum_gx * inv_n) * cache.inv_std;
    }
    return dx;
}

// ---------------------------------------------------------------------------
// affine
// ---------------------------------------------------------------------------

std::vector<double> linear(const std::vector<double>& x, const Tensor& w, const std::vector<double>& b) {
    if (w.rows() != x.size()) throw std::invalid_argument("linear: input size mismatch");
    if (b.size() != w.cols()) throw std::invalid_argument("linear: bias size mismatch");
    std::vector<double> y(b);
    const std::size_t out = w.cols();
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double xi = x[i];
        const double* wr = w.row(i);
        for (std::size_t j = 0; j < out; ++j) y[j] += xi * wr[j];
    }
    return y;
}

std::vector<double> linear_backward(const std::vector<double>& dy, const std::vector<double>& x, const Tensor& w,
                                    Tensor& dw, std::vector<double>& db) {
    const std::size_t out = w.cols();
    for (std::size_t j = 0; j < out; ++j) db[j] += dy[j];
    std::vector<double> dx(x.size(), 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double xi = x[i];
        const double* wr = w.row(i);
        double* dwr = dw.row(i);
        double acc = 0.0;
        for (std::size_t j = 0; j < out; ++j) {
            dwr[j] += xi * dy[j];
            acc += wr[j] * dy[j];
        }
        dx[i] = acc;
    }
    return dx;
}

Tensor matmul(const Tensor& x, const Tensor& w) {
    if (x.cols() != w.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
    Tensor y = Tensor::zeros(x.rows(), w.cols());
    const std::size_t n = x.rows(), in = x.cols(), out = w.cols();
    for (std::size_t r = 0; r < n; ++r) {
        const double* xr = x.row(r);
        double* yr = y.row(r);
        for (std::size_t i = 0; i < in; ++i) {
            const double xi = xr[i];
            const double* wr = w.row(i);
            for (std::size_t j = 0; j < out; ++j) yr[j] += xi * wr[j];
        }
    }
    return y;
}

Tensor matmul_add_rows(const Tensor& x, const Tensor& w, const std::vector<double>& b) {
    Tensor y = matmul(x, w);
    for (std::size_t r = 0; r < y.rows(); ++r) {
        double* yr = y.row(r);
        for (std::size_t j = 0; j < y.cols(); ++j) yr[j] += b[j];
    }
    return y;
}

Tensor matmul_backward(const Tensor& dy, const Tensor& x, const Tensor& w, Tensor& dw) {
    const std::size_t n = x.rows(), in = x.cols(), out = w.cols();
    Tensor dx = Tensor::zeros(n, in);
    for (std::size_t r = 0; r < n; ++r) {
        const double* dyr = dy.row(r);
        const double* xr = x.row(r);
        double* dxr = dx.row(r);
        for (std::size_t i = 0; i < in; ++i) {
            const double* wr = w.row(i);
            double* dwr = dw.row(i);
            const double xi = xr[i];
            double acc = 0.0;
            for (std::size_t j = 0; j < out; ++j) {
                dwr[j] += xi * dyr[j];
                acc += wr[j] * dyr[j];
            }
            dxr[i] = acc;
        }
    }
    return dx;
}

std::vector<double> relu(const std::vector<double>& x) {
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
    return y;
}

std::vector<double> relu_backward(const std::vector<double>& dy, const std::vector<double>& x) {
    std::vector<double> dx(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
    return dx;
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

Tensor masked_attention_forward(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                                const RowExtent& extent, AttentionCache& cache) {
    const std::size_t nq = q.rows(), nk = k.rows(), dk = q.cols();
    if (k.cols() != dk || v.cols() != dk || v.rows() != nk)
        throw std::invalid_argument("attention: shape mismatch");
    if (heads == 0 || dk % heads != 0) throw std::invalid_argument("attention: heads must divide dk");
    if (nq == 0 || nk == 0) throw std::invalid_argument("attention: empty query or key set");
    const std::size_t dh = dk / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    cache.heads = heads;
    cache.probs = Tensor::zeros(heads * nq, nk);
    Tensor out = Tensor::zeros(nq, dk);

    std::vector<double> logits(nk);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        for (std::size_t i = 0; i < nq; ++i) {
            const std::size_t jn = std::min(extent(i), nk);
            if (jn == 0) throw std::invalid_argument("attention: fully masked query row");
            // keys beyond the extent get -inf logits, i.e. exact zero weight
            double mx = -std::numeric_limits<double>::infinity();
            const double* qi = q.row(i) + off;
            for (std::size_t j = 0; j < jn; ++j) {
                const double* kj = k.row(j) + off;
                double dot = 0.0;
                for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
                logits[j] = dot * scale;
                mx = std::max(mx, logits[j]);
            }
            double sum = 0.0;
            double* pr = cache.probs.row(h * nq + i);
            for (std::size_t j = 0; j < jn; ++j) {
                pr[j] = std::exp(logits[j] - mx);
                sum += pr[j];
            }
            const double inv_sum = 1.0 / sum;
            double* oi = out.row(i) + off;
            for (std::size_t j = 0; j < jn; ++j) {
                pr[j] *= inv_sum;
                const double pj = pr[j];
                const double* vj = v.row(j) + off;
                for (std::size_t c = 0; c < dh; ++c) oi[c] += pj * vj[c];
            }
        }
    }
    return out;
}

void masked_attention_backward(const Tensor& dout, const Tensor& q, const Tensor& k, const Tensor& v,
                               const AttentionCache& cache, Tensor& dq, Tensor& dk, Tensor& dv) {
    const std::size_t nq = q.rows(), nk = k.rows(), dktot = q.cols();
    const std::size_t heads = cache.heads;
    const std::size_t dh = dktot / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    std::vector<double> dprob(nk);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        for (std::size_t i = 0; i < nq; ++i) {
            const double* pr = cache.probs.row(h * nq + i);
            const double* doi = dout.row(i) + off;
            // dP = dO V^T, restricted to in-extent (p > 0) entries
            double dot_pp = 0.0;
            for (std::size_t j = 0; j < nk; ++j) {
                if (pr[j] == 0.0) { dprob[j] = 0.0; continue; }
                const double* vj = v.row(j) + off;
                double acc = 0.0;
                for (std::size_t c = 0; c < dh; ++c) acc += doi[c] * vj[c];
                dprob[j] = acc;
                dot_pp += pr[j] * acc;
            }
            // softmax backward per row, then split into dQ, dK, dV
            const double* qi = q.row(i) + off;
            double* dqi = dq.row(i) + off;
            for (std::size_t j = 0; j < nk; ++j) {
                if (pr[j] == 0.0) continue;
                const double g = pr[j] * (dprob[j] - dot_pp) * scale;
                const double* kj = k.row(j) + off;
                double* dkj = dk.row(j) + off;
                double* dvj = dv.row(j) + off;
                for (std::size_t c = 0; c < dh; ++c) {
                    dqi[c] += g * kj[c];
                    dkj[c] += g * qi[c];
                    dvj[c] += pr[j] * doi[c];
                }
            }
        }
    }
}

Tensor attention(const Tensor& h, const Tensor& wq, const Tensor& wk, const Tensor& wv,
                 const std::vector<std::vector<bool>>* mask) {
    if (wq.rows() != h.cols() || wk.rows() != h.cols() || wv.rows() != h.cols())
        throw std::invalid_argument("attention: projection rows must equal input width");
    if (wq.cols() != wk.cols() || wq.cols() != wv.cols())
        throw std::invalid_argument("attention: projection widths must agree");
    const Tensor q = matmul(h, wq);
    const Tensor k = matmul(h, wk);
    const Tensor v = matmul(h, wv);
    if (mask == nullptr) {
        AttentionCache cache;
        const std::size_t n = h.rows();
        return masked_attention_forward(q, k, v, 1, [n](std::size_t) { return n; }, cache);
    }
    // arbitrary boolean masks take the general path: -inf logits before softmax
    const std::size_t n = h.rows(), dk = q.cols();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    Tensor out = Tensor::zeros(n, dk);
    std::vector<double> logits(n);
    for (std::size_t i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        std::size_t allowed = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (!(*mask)[i][j]) continue;
            double dot = 0.0;
            for (std::size_t c = 0; c < dk; ++c) dot += q(i, c) * k(j, c);
            logits[j] = dot * scale;
            mx = std::max(mx, logits[j]);
            ++allowed;
        }
        if (allowed == 0) throw std::invalid_argument("attention: fully masked query row");
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            if ((*mask)[i][j]) sum += std::exp(logits[j] - mx);
        for (std::size_t j = 0; j < n; ++j) {
            if (!(*mask)[i][j]) continue;
            const double pj = std::exp(logits[j] - mx) / sum;
            for (std::size_t c = 0; c < dk; ++c) out(i, c) += pj * v(j, c);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// positional encoding
// ---------------------------------------------------------------------------

std::vector<double> positional_encoding(double t, std::size_t d) {
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("positional_encoding: t out of [0,1]");
    if (d == 0 || d % 2 != 0) throw std::invalid_argument("positional_encoding: d must be even and positive");
    std::vector<double> pe(d);
    for (std::size_t i = 0; i < d / 2; ++i) {
        // frequencies span 1 .. 1000 across the pairs, so t in [0,1] covers
        // under-one-period through many-period oscillations
        const double omega =
            i == 0 ? 1.0 : std::pow(1000.0, 2.0 * static_cast<double>(i) / static_cast<double>(d - 2));
        pe[2 * i] = std::sin(t * omega);
        pe[2 * i + 1] = std::cos(t * omega);
    }
    return pe;
}

// ---------------------------------------------------------------------------
// mlp
// ---------------------------------------------------------------------------

std::vector<double> mlp_forward(const std::vector<double>& x, const std::vector<MlpLayerSpec>& layers) {
    std::vector<double> h = x;
    for (const auto& l : layers) {
        h = linear(h, *l.w, *l.b);
        if (l.act == Activation::Relu) h = relu(h);
        if (l.ln_gain != nullptr) h = layer_norm(h, *l.ln_gain, *l.ln_bias);
    }
    return h;
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

double grad_check(const std::function<double(ParameterStore&, bool)>& f, ParameterStore& store, double h) {
    if (!(h >= 1e-7 && h <= 1e-3)) throw std::invalid_argument("grad_check: h out of [1e-7, 1e-3]");
    store.zero_grads();
    const double f0 = f(store, true);
    if (!std::isfinite(f0)) throw std::runtime_error("grad_check: non-finite loss");

    double max_rel = 0.0;
    for (std::size_t pi = 0; pi < store.size(); ++pi) {
        auto& p = store.param(pi);
        if (!p.trainable) continue;
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double saved = p.value[i];
            p.value[i] = saved + h;
            const double fp = f(store, false);
            p.value[i] = saved - h;
            const double fm = f(store, false);
            p.value[i] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw std::runtime_error("grad_check: non-finite perturbed loss");
            const double numeric = (fp - fm) / (2.0 * h);
            const double analytic = p.grad[i];
            const double rel = std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

void Adam::step(ParameterStore& store, double lr_override) {
    if (m_.empty()) {
        m_.resize(store.size());
        v_.resize(store.size());
        for (std::size_t i = 0; i < store.size(); ++i) {
            m_[i].assign(store.param(i).value.size(), 0.0);
            v_[i].assign(store.param(i).value.size(), 0.0);
        }
    }
    ++t_;
    const double lr = lr_override >= 0.0 ? lr_override : s_.lr;
    const double bc1 = 1.0 - std::pow(s_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(s_.beta2, static_cast<double>(t_));
    for (std::size_t pi = 0; pi < store.size(); ++pi) {
        auto& p = store.param(pi);
        if (!p.trainable) continue;
        auto& m = m_[pi];
        auto& v = v_[pi];
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad[i];
            m[i] = s_.beta1 * m[i] + (1.0 - s_.beta1) * g;
            v[i] = s_.beta2 * v[i] + (1.0 - s_.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p.value[i] -= lr * mhat / (std::sqrt(vhat) + s_.eps);
        }
    }
}

Tensor gaussian_tensor(std::vector<std::size_t> shape, Rng& rng, double stddev) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = stddev * rng.normal();
    return t;
}

} // namespace nn
} // namespace p2l
