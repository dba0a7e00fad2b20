#include "p2l/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace p2l {

void TransformerConfig::validate() const {
    if (layers < 2) throw std::invalid_argument("TransformerConfig: layers must be >= 2");
    if (d_model == 0 || d_k == 0 || vocab == 0 || n_max == 0)
        throw std::invalid_argument("TransformerConfig: dimensions must be positive");
    if (d_k != d_model)
        throw std::invalid_argument("TransformerConfig: d_k must equal d_model (residual attention)");
    if (heads == 0 || d_k % heads != 0)
        throw std::invalid_argument("TransformerConfig: heads must divide d_k");
}

namespace {

std::string blk(std::size_t l, const char* name) {
    return "blk" + std::to_string(l) + "." + name;
}

} // namespace

Transformer::Transformer(TransformerConfig cfg, std::uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(init_seed);
    const double std_w = 0.06;
    const double std_res = std_w / std::sqrt(2.0 * static_cast<double>(cfg_.layers));
    const std::size_t d = cfg_.d_model, dk = cfg_.d_k, ff = cfg_.ff();

    params_.add("tok_emb", nn::gaussian_tensor({cfg_.vocab, d}, rng, std_w));
    params_.add("pos_emb", nn::gaussian_tensor({cfg_.n_max, d}, rng, std_w));
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
        Tensor ones({d});
        ones.fill(1.0);
        params_.add(blk(l, "ln1.g"), ones);
        params_.add(blk(l, "ln1.b"), Tensor({d}));
        params_.add(blk(l, "wq"), nn::gaussian_tensor({d, dk}, rng, std_w));
        params_.add(blk(l, "wk"), nn::gaussian_tensor({d, dk}, rng, std_w));
        params_.add(blk(l, "wv"), nn::gaussian_tensor({d, dk}, rng, std_res));
        Tensor ones2({d});
        ones2.fill(1.0);
        params_.add(blk(l, "ln2.g"), ones2);
        params_.add(blk(l, "ln2.b"), Tensor({d}));
        params_.add(blk(l, "fc1.w"), nn::gaussian_tensor({d, ff}, rng, std_w));
        params_.add(blk(l, "fc1.b"), Tensor({ff}));
        params_.add(blk(l, "fc2.w"), nn::gaussian_tensor({ff, d}, rng, std_res));
        params_.add(blk(l, "fc2.b"), Tensor({d}));
    }
    Tensor onesf({d});
    onesf.fill(1.0);
    params_.add("ln_f.g", onesf);
    params_.add("ln_f.b", Tensor({d}));
    params_.add("w_out", nn::gaussian_tensor({d, cfg_.vocab}, rng, std_w));
}

void Transformer::check_ids(const std::vector<int>& ids) const {
    if (ids.empty()) throw std::invalid_argument("Transformer: empty token sequence");
    if (ids.size() > cfg_.n_max)
        throw std::invalid_argument("Transformer: sequence length " + std::to_string(ids.size()) +
                                    " exceeds n_max " + std::to_string(cfg_.n_max));
    for (int id : ids)
        if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab)
            throw std::invalid_argument("Transformer: token id out of vocabulary");
}

Tensor Transformer::forward(const std::vector<int>& ids, TransformerCache& cache) const {
    check_ids(ids);
    const std::size_t n = ids.size(), d = cfg_.d_model;
    cache.ids = ids;
    cache.blocks.assign(cfg_.layers, {});

    const Tensor& tok = params_.value("tok_emb");
    const Tensor& pos = params_.value("pos_emb");
    Tensor x = Tensor::zeros(n, d);
    for (std::size_t r = 0; r < n; ++r) {
        const double* te = tok.row(static_cast<std::size_t>(ids[r]));
        const double* pe = pos.row(r);
        double* xr = x.row(r);
        for (std::size_t c = 0; c < d; ++c) xr[c] = te[c] + pe[c];
    }

    nn::RowExtent causal = [](std::size_t i) { return i + 1; };
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
        auto& bc = cache.blocks[l];
        bc.x_in = x;
        const auto& g1 = params_.value(blk(l, "ln1.g")).vec();
        const auto& b1 = params_.value(blk(l, "ln1.b")).vec();
        bc.ln1.resize(n);
        bc.a_in = Tensor::zeros(n, d);
        for (std::size_t r = 0; r < n; ++r) {
            std::vector<double> row(x.row(r), x.row(r) + d);
            auto normed = nn::layer_norm_forward(row, g1, b1, nn::kLayerNormEps, bc.ln1[r]);
            std::copy(normed.begin(), normed.end(), bc.a_in.row(r));
        }
        bc.q = nn::matmul(bc.a_in, params_.value(blk(l, "wq")));
        bc.k = nn::matmul(bc.a_in, params_.value(blk(l, "wk")));
        bc.v = nn::matmul(bc.a_in, params_.value(blk(l, "wv")));
        Tensor attn = nn::masked_attention_forward(bc.q, bc.k, bc.v, cfg_.heads, causal, bc.att);
        for (std::size_t i = 0; i < n * d; ++i) x[i] += attn[i];

        const auto& g2 = params_.value(blk(l, "ln2.g")).vec();
        const auto& b2 = params_.value(blk(l, "ln2.b")).vec();
        bc.ln2.resize(n);
        bc.m_in = Tensor::zeros(n, d);
        for (std::size_t r = 0; r < n; ++r) {
            std::vector<double> row(x.row(r), x.row(r) + d);
            auto normed = nn::layer_norm_forward(row, g2, b2, nn::kLayerNormEps, bc.ln2[r]);
            std::copy(normed.begin(), normed.end(), bc.m_in.row(r));
        }
        bc.h_pre = nn::matmul_add_rows(bc.m_in, params_.value(blk(l, "fc1.w")), params_.value(blk(l, "fc1.b")).vec());
        bc.h_act = bc.h_pre;
        for (std::size_t i = 0; i < bc.h_act.size(); ++i)
            if (bc.h_act[i] < 0.0) bc.h_act[i] = 0.0;
        Tensor mlp_out =
            nn::matmul_add_rows(bc.h_act, params_.value(blk(l, "fc2.w")), params_.value(blk(l, "fc2.b")).vec());
        for (std::size_t i = 0; i < n * d; ++i) x[i] += mlp_out[i];
    }

    cache.h_last = x;
    const auto& gf = params_.value("ln_f.g").vec();
    const auto& bf = params_.value("ln_f.b").vec();
    cache.lnf.resize(n);
    cache.h_final = Tensor::zeros(n, d);
    for (std::size_t r = 0; r < n; ++r) {
        std::vector<double> row(x.row(r), x.row(r) + d);
        auto normed = nn::layer_norm_forward(row, gf, bf, nn::kLayerNormEps, cache.lnf[r]);
        std::copy(normed.begin(), normed.end(), cache.h_final.row(r));
    }
    return nn::matmul(cache.h_final, params_.value("w_out"));
}

void Transformer::backward(const Tensor& dlogits, const Tensor* d_h_final, const TransformerCache& cache) {
    const std::size_t n = cache.length(), d = cfg_.d_model;

    // logits = h_final W  =>  d h_final = dlogits W^T, dW += h_final^T dlogits
    Tensor dhf = Tensor::zeros(n, d);
    if (dlogits.size() > 0) {
        Tensor& dw_out = params_.grad("w_out");
        const Tensor& w_out = params_.value("w_out");
        dhf = nn::matmul_backward(dlogits, cache.h_final, w_out, dw_out);
    }
    if (d_h_final != nullptr)
        for (std::size_t i = 0; i < n * d; ++i) dhf[i] += (*d_h_final)[i];

    // final layer norm
    Tensor dx = Tensor::zeros(n, d);
    {
        auto& dg = params_.grad("ln_f.g").vec();
        auto& db = params_.grad("ln_f.b").vec();
        const auto& g = params_.value("ln_f.g").vec();
        for (std::size_t r = 0; r < n; ++r) {
            std::vector<double> dyr(dhf.row(r), dhf.row(r) + d);
            auto dxr = nn::layer_norm_backward(dyr, g, cache.lnf[r], dg, db);
            std::copy(dxr.begin(), dxr.end(), dx.row(r));
        }
    }

    nn::RowExtent causal = [](std::size_t i) { return i + 1; };
    for (std::size_t l = cfg_.layers; l-- > 0;) {
        const auto& bc = cache.blocks[l];

        // MLP half: x_out = x_mid + fc2(relu(fc1(ln2(x_mid))))
        Tensor dh_act = Tensor::zeros(n, cfg_.ff());
        {
            Tensor& dw2 = params_.grad(blk(l, "fc2.w"));
            auto& db2 = params_.grad(blk(l, "fc2.b")).vec();
            const Tensor& w2 = params_.value(blk(l, "fc2.w"));
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t j = 0; j < d; ++j) db2[j] += dx(r, j);
            dh_act = nn::matmul_backward(dx, bc.h_act, w2, dw2);
        }
        for (std::size_t i = 0; i < dh_act.size(); ++i)
            if (bc.h_pre[i] <= 0.0) dh_act[i] = 0.0;
        Tensor dm_in = Tensor::zeros(n, d);
        {
            Tensor& dw1 = params_.grad(blk(l, "fc1.w"));
            auto& db1 = params_.grad(blk(l, "fc1.b")).vec();
            const Tensor& w1 = params_.value(blk(l, "fc1.w"));
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t j = 0; j < cfg_.ff(); ++j) db1[j] += dh_act(r, j);
            dm_in = nn::matmul_backward(dh_act, bc.m_in, w1, dw1);
        }
        {
            auto& dg = params_.grad(blk(l, "ln2.g")).vec();
            auto& db = params_.grad(blk(l, "ln2.b")).vec();
            const auto& g = params_.value(blk(l, "ln2.g")).vec();
            for (std::size_t r = 0; r < n; ++r) {
                std::vector<double> dyr(dm_in.row(r), dm_in.row(r) + d);
                auto dxr = nn::layer_norm_backward(dyr, g, bc.ln2[r], dg, db);
                for (std::size_t c = 0; c < d; ++c) dx(r, c) += dxr[c]; // residual
            }
        }

        // attention half: x_mid = x_in + Attn(ln1(x_in))
        Tensor dq = Tensor::zeros(n, cfg_.d_k), dk = Tensor::zeros(n, cfg_.d_k), dv = Tensor::zeros(n, cfg_.d_k);
        nn::masked_attention_backward(dx, bc.q, bc.k, bc.v, bc.att, dq, dk, dv);
        Tensor da_in = Tensor::zeros(n, d);
        {
            Tensor& dwq = params_.grad(blk(l, "wq"));
            Tensor& dwk = params_.grad(blk(l, "wk"));
            Tensor& dwv = params_.grad(blk(l, "wv"));
            Tensor t1 = nn::matmul_backward(dq, bc.a_in, params_.value(blk(l, "wq")), dwq);
            Tensor t2 = nn::matmul_backward(dk, bc.a_in, params_.value(blk(l, "wk")), dwk);
            Tensor t3 = nn::matmul_backward(dv, bc.a_in, params_.value(blk(l, "wv")), dwv);
            for (std::size_t i = 0; i < n * d; ++i) da_in[i] = t1[i] + t2[i] + t3[i];
        }
        {
            auto& dg = params_.grad(blk(l, "ln1.g")).vec();
            auto& db = params_.grad(blk(l, "ln1.b")).vec();
            const auto& g = params_.value(blk(l, "ln1.g")).vec();
            for (std::size_t r = 0; r < n; ++r) {
                std::vector<double> dyr(da_in.row(r), da_in.row(r) + d);
                auto dxr = nn::layer_norm_backward(dyr, g, bc.ln1[r], dg, db);
                for (std::size_t c = 0; c < d; ++c) dx(r, c) += dxr[c]; // residual
            }
        }
    }

    // embeddings
    Tensor& dtok = params_.grad("tok_emb");
    Tensor& dpos = params_.grad("pos_emb");
    for (std::size_t r = 0; r < n; ++r) {
        double* dt = dtok.row(static_cast<std::size_t>(cache.ids[r]));
        double* dp = dpos.row(r);
        const double* dxr = dx.row(r);
        for (std::size_t c = 0; c < d; ++c) {
            dt[c] += dxr[c];
            dp[c] += dxr[c];
        }
    }
}

double Transformer::lm_loss(const std::vector<int>& ids, const TransformerCache& cache, const Tensor& logits,
                            Tensor* dlogits) const {
    (void)cache;
    const std::size_t n = ids.size();
    if (n < 2) throw std::invalid_argument("lm_loss: need at least two tokens");
    const std::size_t count = n - 1;
    double loss = 0.0;
    if (dlogits != nullptr) *dlogits = Tensor::zeros(n, cfg_.vocab);
    for (std::size_t r = 0; r + 1 < n; ++r) {
        std::vector<double> row(logits.row(r), logits.row(r) + cfg_.vocab);
        const double lse = nn::log_sum_exp(row);
        const int target = ids[r + 1];
        loss += lse - row[static_cast<std::size_t>(target)];
        if (dlogits != nullptr) {
            double mx = row[0];
            for (double x : row) mx = std::max(mx, x);
            double sum = 0.0;
            for (double x : row) sum += std::exp(x - mx);
            double* dr = dlogits->row(r);
            for (std::size_t j = 0; j < cfg_.vocab; ++j)
                dr[j] = std::exp(row[j] - mx) / sum / static_cast<double>(count);
            dr[static_cast<std::size_t>(target)] -= 1.0 / static_cast<double>(count);
        }
    }
    return loss / static_cast<double>(count);
}

Transformer::TrainLog Transformer::train_lm(const std::vector<std::vector<int>>& corpus, std::size_t epochs,
                                            double lr, std::size_t batch_size, std::uint64_t seed, bool verbose) {
    if (corpus.empty()) throw std::invalid_argument("train_lm: empty corpus");
    for (const auto& seq : corpus) check_ids(seq);
    Rng rng(seed);
    nn::Adam opt({lr});
    TrainLog log;
    std::vector<std::size_t> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t e = 0; e < epochs; ++e) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t done = 0;
        while (done < order.size()) {
            const std::size_t bend = std::min(done + batch_size, order.size());
            params_.zero_grads();
            double batch_loss = 0.0;
            for (std::size_t bi = done; bi < bend; ++bi) {
                const auto& seq = corpus[order[bi]];
                TransformerCache cache;
                Tensor logits = forward(seq, cache);
                Tensor dlogits;
                batch_loss += lm_loss(seq, cache, logits, &dlogits);
                // scale by 1/batch at accumulation time
                const double inv_b = 1.0 / static_cast<double>(bend - done);
                for (std::size_t i = 0; i < dlogits.size(); ++i) dlogits[i] *= inv_b;
                backward(dlogits, nullptr, cache);
            }
            opt.step(params_);
            epoch_loss += batch_loss;
            done = bend;
        }
        log.epoch_loss.push_back(epoch_loss / static_cast<double>(order.size()));
        if (verbose)
            std::fprintf(stderr, "[train_lm] epoch %zu/%zu loss %.6f\n", e + 1, epochs, log.epoch_loss.back());
    }
    return log;
}

double Transformer::next_token_accuracy(const std::vector<std::vector<int>>& corpus) const {
    std::size_t hits = 0, total = 0;
    for (const auto& seq : corpus) {
        TransformerCache cache;
        Tensor logits = forward(seq, cache);
        for (std::size_t r = 0; r + 1 < seq.size(); ++r) {
            std::size_t best = 0;
            for (std::size_t j = 1; j < cfg_.vocab; ++j)
                if (logits(r, j) > logits(r, best)) best = j;
            hits += (static_cast<int>(best) == seq[r + 1]) ? 1 : 0;
            ++total;
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

double Transformer::mean_nll(const std::vector<std::vector<int>>& corpus) const {
    double loss = 0.0;
    std::size_t total = 0;
    for (const auto& seq : corpus) {
        TransformerCache cache;
        Tensor logits = forward(seq, cache);
        for (std::size_t r = 0; r + 1 < seq.size(); ++r) {
            std::vector<double> row(logits.row(r), logits.row(r) + cfg_.vocab);
            loss += nn::log_sum_exp(row) - row[static_cast<std::size_t>(seq[r + 1])];
            ++total;
        }
    }
    return total == 0 ? 0.0 : loss / static_cast<double>(total);
}

} // namespace p2l
