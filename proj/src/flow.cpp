#include "p2l/flow.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>

#include "p2l/errors.hpp"

namespace p2l {

void FlowState::validate() const {
    if (z.empty()) throw std::invalid_argument("FlowState: empty state");
    for (double x : z)
        if (!std::isfinite(x)) throw NumericError("FlowState: non-finite z");
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("FlowState: t out of [0,1]");
}

PromptCache build_prompt_cache(const GuidanceModel& guidance, const std::vector<int>& tokens) {
    PromptCache cache;
    cache.tokens = tokens;
    cache.guidance_checksum = guidance.checksum();
    if (!tokens.empty()) {
        TransformerCache tc;
        guidance.forward_hidden(tokens, tc);
        cache.k = tc.blocks.back().k;
        cache.v = tc.blocks.back().v;
    }
    return cache;
}

namespace {

std::string last_blk(const TransformerConfig& cfg, const char* name) {
    return "blk" + std::to_string(cfg.layers - 1) + "." + name;
}

// dH_row += dM_row W^T for a frozen projection W (in x out).
void add_wt_product(const double* dm, const Tensor& w, double* dh) {
    const std::size_t in = w.rows(), out = w.cols();
    for (std::size_t i = 0; i < in; ++i) {
        const double* wr = w.row(i);
        double acc = 0.0;
        for (std::size_t j = 0; j < out; ++j) acc += dm[j] * wr[j];
        dh[i] += acc;
    }
}

std::vector<double> concat_skip(const std::vector<double>& h, const std::vector<double>& z, double t) {
    std::vector<double> in;
    in.reserve(h.size() + z.size() + 1);
    in.insert(in.end(), h.begin(), h.end());
    in.insert(in.end(), z.begin(), z.end());
    in.push_back(t);
    return in;
}

} // namespace

FlowModel::FlowModel(FlowConfig cfg, const GuidanceModel& guidance, std::uint64_t init_seed)
    : cfg_(cfg), guidance_(&guidance) {
    if (cfg_.n_decisions < 2) throw ConfigError("FlowModel: n_decisions must be >= 2");
    if (cfg_.d_model != guidance.config().d_model)
        throw ConfigError("FlowModel: flow d_model does not match the bound guidance d_model");
    if (cfg_.pe() % 2 != 0) throw ConfigError("FlowModel: pe_dim must be even");
    if (!guidance.frozen()) throw InvalidStateError("FlowModel: guidance model must be frozen before binding");
    bound_checksum_ = guidance.checksum();

    Rng rng(init_seed);
    const std::size_t d = cfg_.d_model, a = cfg_.n_decisions, h = cfg_.hidden();
    const double std_w = 0.1;
    auto add_emb = [&](const std::string& prefix, std::size_t in_dim) {
        params_.add(prefix + ".fc1.w", nn::gaussian_tensor({in_dim, d}, rng, std_w));
        params_.add(prefix + ".fc1.b", Tensor({d}));
        Tensor ones({d});
        ones.fill(1.0);
        params_.add(prefix + ".ln.g", ones);
        params_.add(prefix + ".ln.b", Tensor({d}));
        params_.add(prefix + ".fc2.w", nn::gaussian_tensor({d, d}, rng, std_w));
        params_.add(prefix + ".fc2.b", Tensor({d}));
    };
    add_emb("emb_t", cfg_.pe());
    add_emb("emb_z", a);

    const std::size_t skip = a + 1;
    auto add_proj = [&](int idx, std::size_t in_dim, std::size_t out_dim, bool norm) {
        const std::string p = "proj.fc" + std::to_string(idx);
        params_.add(p + ".w", nn::gaussian_tensor({in_dim, out_dim}, rng, std_w));
        params_.add(p + ".b", Tensor({out_dim}));
        if (norm) {
            Tensor ones({out_dim});
            ones.fill(1.0);
            params_.add("proj.ln" + std::to_string(idx) + ".g", ones);
            params_.add("proj.ln" + std::to_string(idx) + ".b", Tensor({out_dim}));
        }
    };
    add_proj(1, d + skip, h, true);
    add_proj(2, h + skip, h, true);
    add_proj(3, h + skip, h, true);
    add_proj(4, h + skip, a, false);
}

void FlowModel::check_prompt(const PromptCache& prompt) const {
    if (prompt.guidance_checksum != bound_checksum_)
        throw InvalidStateError("FlowModel: prompt cache was built against a different guidance model");
}

std::vector<double> FlowModel::emb_mlp_forward(const std::string& prefix, const std::vector<double>& x,
                                               detail::EmbMlpCache* cache) const {
    detail::EmbMlpCache local;
    detail::EmbMlpCache& c = cache != nullptr ? *cache : local;
    c.x = x;
    c.h_pre = nn::linear(x, params_.value(prefix + ".fc1.w"), params_.value(prefix + ".fc1.b").vec());
    c.h_act = nn::relu(c.h_pre);
    c.h_ln = nn::layer_norm_forward(c.h_act, params_.value(prefix + ".ln.g").vec(),
                                    params_.value(prefix + ".ln.b").vec(), nn::kLayerNormEps, c.ln);
    return nn::linear(c.h_ln, params_.value(prefix + ".fc2.w"), params_.value(prefix + ".fc2.b").vec());
}

void FlowModel::emb_mlp_backward(const std::string& prefix, const std::vector<double>& dy,
                                 const detail::EmbMlpCache& cache) {
    auto dh_ln = nn::linear_backward(dy, cache.h_ln, params_.value(prefix + ".fc2.w"),
                                     params_.grad(prefix + ".fc2.w"), params_.grad(prefix + ".fc2.b").vec());
    auto dh_act = nn::layer_norm_backward(dh_ln, params_.value(prefix + ".ln.g").vec(), cache.ln,
                                          params_.grad(prefix + ".ln.g").vec(), params_.grad(prefix + ".ln.b").vec());
    auto dh_pre = nn::relu_backward(dh_act, cache.h_pre);
    nn::linear_backward(dh_pre, cache.x, params_.value(prefix + ".fc1.w"), params_.grad(prefix + ".fc1.w"),
                        params_.grad(prefix + ".fc1.b").vec()); // input gradient discarded (PE / z_t are data)
}

Tensor FlowModel::embed_flow_tokens(const FlowState& state, FlowForwardCache* cache) const {
    state.validate();
    if (state.z.size() != cfg_.n_decisions)
        throw ConfigError("embed_flow_tokens: state length does not match |A|");
    std::vector<double> pe = nn::positional_encoding(state.t, cfg_.pe());
    const std::vector<double> row_t =
        emb_mlp_forward("emb_t", pe, cache != nullptr ? &cache->emb_t : nullptr);
    const std::vector<double> row_z =
        emb_mlp_forward("emb_z", state.z, cache != nullptr ? &cache->emb_z : nullptr);
    Tensor h_emb = Tensor::zeros(2, cfg_.d_model);
    std::copy(row_t.begin(), row_t.end(), h_emb.row(0));
    std::copy(row_z.begin(), row_z.end(), h_emb.row(1));
    if (cache != nullptr) {
        cache->pe = std::move(pe);
        cache->h_emb = h_emb;
        cache->state = state;
    }
    return h_emb;
}

std::vector<double> FlowModel::cross_attend(const Tensor& h_emb, const PromptCache& prompt,
                                            FlowForwardCache* cache) const {
    check_prompt(prompt);
    const auto& gp = guidance_->net().params();
    const auto& gcfg = guidance_->config();
    const Tensor& wq = gp.value(last_blk(gcfg, "wq"));
    const Tensor& wk = gp.value(last_blk(gcfg, "wk"));
    const Tensor& wv = gp.value(last_blk(gcfg, "wv"));

    Tensor qf = nn::matmul(h_emb, wq);
    Tensor kf = nn::matmul(h_emb, wk);
    Tensor vf = nn::matmul(h_emb, wv);

    const std::size_t n = prompt.length(), dk = gcfg.d_k;
    Tensor comb_k = Tensor::zeros(n + 2, dk), comb_v = Tensor::zeros(n + 2, dk);
    for (std::size_t r = 0; r < n; ++r) {
        std::copy(prompt.k.row(r), prompt.k.row(r) + dk, comb_k.row(r));
        std::copy(prompt.v.row(r), prompt.v.row(r) + dk, comb_v.row(r));
    }
    for (std::size_t r = 0; r < 2; ++r) {
        std::copy(kf.row(r), kf.row(r) + dk, comb_k.row(n + r));
        std::copy(vf.row(r), vf.row(r) + dk, comb_v.row(n + r));
    }

    nn::AttentionCache att;
    nn::RowExtent all = [n](std::size_t) { return n + 2; };
    Tensor out = nn::masked_attention_forward(qf, comb_k, comb_v, gcfg.heads, all, att);
    std::vector<double> h_attn_z(out.row(1), out.row(1) + dk);
    if (cache != nullptr) {
        cache->qf = std::move(qf);
        cache->kf = std::move(kf);
        cache->vf = std::move(vf);
        cache->comb_k = std::move(comb_k);
        cache->comb_v = std::move(comb_v);
        cache->att = std::move(att);
        cache->h_attn_z = h_attn_z;
    }
    return h_attn_z;
}

std::vector<double> FlowModel::vector_field(const FlowState& state, const PromptCache& prompt,
                                            FlowForwardCache* cache) const {
    FlowForwardCache local;
    FlowForwardCache& c = cache != nullptr ? *cache : local;
    Tensor h_emb = embed_flow_tokens(state, &c);
    std::vector<double> h = cross_attend(h_emb, prompt, &c);

    c.proj.assign(4, {});
    const std::size_t hdim = cfg_.hidden();
    for (int layer = 1; layer <= 4; ++layer) {
        auto& pc = c.proj[static_cast<std::size_t>(layer - 1)];
        pc.in = concat_skip(h, state.z, state.t);
        const std::string p = "proj.fc" + std::to_string(layer);
        pc.h_pre = nn::linear(pc.in, params_.value(p + ".w"), params_.value(p + ".b").vec());
        if (layer < 4) {
            pc.h_act = nn::relu(pc.h_pre);
            h = nn::layer_norm_forward(pc.h_act, params_.value("proj.ln" + std::to_string(layer) + ".g").vec(),
                                       params_.value("proj.ln" + std::to_string(layer) + ".b").vec(),
                                       nn::kLayerNormEps, pc.ln);
        } else {
            h = pc.h_pre;
        }
        if (layer < 4 && h.size() != hdim) throw ConfigError("vector_field: hidden width mismatch");
    }
    c.phi = h;
    return h;
}

void FlowModel::backward(const std::vector<double>& dphi, const FlowForwardCache& cache) {
    // projector, last layer first
    std::vector<double> d = dphi;
    for (int layer = 4; layer >= 1; --layer) {
        const auto& pc = cache.proj[static_cast<std::size_t>(layer - 1)];
        if (layer < 4) {
            d = nn::layer_norm_backward(d, params_.value("proj.ln" + std::to_string(layer) + ".g").vec(), pc.ln,
                                        params_.grad("proj.ln" + std::to_string(layer) + ".g").vec(),
                                        params_.grad("proj.ln" + std::to_string(layer) + ".b").vec());
            d = nn::relu_backward(d, pc.h_pre);
        }
        const std::string p = "proj.fc" + std::to_string(layer);
        auto din = nn::linear_backward(d, pc.in, params_.value(p + ".w"), params_.grad(p + ".w"),
                                       params_.grad(p + ".b").vec());
        // strip the skip slots (z_t and t are data, not parameters)
        din.resize(din.size() - cfg_.n_decisions - 1);
        d = std::move(din);
    }

    // attention: only the state token's output row carries upstream gradient
    const std::size_t n = cache.comb_k.rows() - 2, dk = cache.comb_k.cols();
    Tensor dout = Tensor::zeros(2, dk);
    std::copy(d.begin(), d.end(), dout.row(1));
    Tensor dq = Tensor::zeros(2, dk);
    Tensor dck = Tensor::zeros(n + 2, dk), dcv = Tensor::zeros(n + 2, dk);
    nn::masked_attention_backward(dout, cache.qf, cache.comb_k, cache.comb_v, cache.att, dq, dck, dcv);

    const auto& gp = guidance_->net().params();
    const auto& gcfg = guidance_->config();
    const Tensor& wq = gp.value(last_blk(gcfg, "wq"));
    const Tensor& wk = gp.value(last_blk(gcfg, "wk"));
    const Tensor& wv = gp.value(last_blk(gcfg, "wv"));

    Tensor dh_emb = Tensor::zeros(2, cfg_.d_model);
    for (std::size_t r = 0; r < 2; ++r) {
        add_wt_product(dq.row(r), wq, dh_emb.row(r));
        add_wt_product(dck.row(n + r), wk, dh_emb.row(r));
        add_wt_product(dcv.row(n + r), wv, dh_emb.row(r));
    }

    emb_mlp_backward("emb_t", std::vector<double>(dh_emb.row(0), dh_emb.row(0) + cfg_.d_model), cache.emb_t);
    emb_mlp_backward("emb_z", std::vector<double>(dh_emb.row(1), dh_emb.row(1) + cfg_.d_model), cache.emb_z);
}

double FlowModel::flow_loss(const Batch& batch, bool accumulate_grads) {
    if (batch.items.empty()) throw std::invalid_argument("flow_loss: empty batch");
    const double inv_b = 1.0 / static_cast<double>(batch.items.size());
    double loss = 0.0;
    for (const auto& item : batch.items) {
        if (item.z0.size() != cfg_.n_decisions || item.z1.size() != cfg_.n_decisions)
            throw std::invalid_argument("flow_loss: z length mismatch");
        FlowState state;
        state.t = item.t;
        state.z.resize(cfg_.n_decisions);
        for (std::size_t i = 0; i < cfg_.n_decisions; ++i)
            state.z[i] = item.t * item.z1[i] + (1.0 - item.t) * item.z0[i];
        FlowForwardCache cache;
        const auto phi = vector_field(state, *item.prompt, &cache);
        std::vector<double> dphi(cfg_.n_decisions);
        for (std::size_t i = 0; i < cfg_.n_decisions; ++i) {
            const double r = phi[i] - (item.z1[i] - item.z0[i]);
            loss += r * r;
            dphi[i] = 2.0 * r * inv_b;
        }
        if (accumulate_grads) backward(dphi, cache);
    }
    return loss * inv_b;
}

FlowModel::TrainLog FlowModel::train(const std::vector<TrainSample>& positives, std::size_t epochs, double lr,
                                     std::uint64_t seed, bool verbose) {
    if (positives.empty()) throw std::invalid_argument("train_flow: empty positive set");
    for (const auto& s : positives) check_prompt(*s.prompt);
    const std::uint64_t guard = guidance_->checksum();

    Rng rng(seed);
    nn::Adam opt({lr});
    TrainLog log;
    std::vector<std::size_t> order(positives.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    double baseline_acc = 0.0;
    std::size_t baseline_n = 0;
    for (std::size_t e = 0; e < epochs; ++e) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t batches = 0, done = 0;
        while (done < order.size()) {
            const std::size_t bend = std::min(done + cfg_.batch_size, order.size());
            Batch batch;
            for (std::size_t bi = done; bi < bend; ++bi) {
                const auto& s = positives[order[bi]];
                Batch::Item item;
                item.prompt = s.prompt;
                item.z0 = rng.normal_vector(cfg_.n_decisions, cfg_.sigma_z);
                item.t = rng.uniform();
                if (cfg_.sample_target) {
                    // one-hot draw from the target distribution
                    const double u = rng.uniform();
                    double acc = 0.0;
                    std::size_t pick = s.target.size() - 1;
                    for (std::size_t i = 0; i < s.target.size(); ++i) {
                        acc += s.target[i];
                        if (u < acc) { pick = i; break; }
                    }
                    item.z1.assign(cfg_.n_decisions, 0.0);
                    item.z1[pick] = 1.0;
                } else {
                    item.z1 = s.target.p;
                }
                double base = 0.0;
                for (std::size_t i = 0; i < cfg_.n_decisions; ++i) {
                    const double u2 = item.z1[i] - item.z0[i];
                    base += u2 * u2;
                }
                baseline_acc += base;
                ++baseline_n;
                batch.items.push_back(std::move(item));
            }
            params_.zero_grads();
            epoch_loss += flow_loss(batch, true);
            opt.step(params_);
            ++batches;
            done = bend;
        }
        log.epoch_loss.push_back(epoch_loss / static_cast<double>(batches));
        if (verbose)
            std::fprintf(stderr, "[train_flow] epoch %zu/%zu loss %.6f\n", e + 1, epochs, log.epoch_loss.back());
    }
    log.zero_field_baseline = baseline_n == 0 ? 0.0 : baseline_acc / static_cast<double>(baseline_n);

    if (guidance_->checksum() != guard)
        throw InvalidStateError("train_flow: bound guidance parameters changed during training");
    return log;
}

FlowModel::Generated FlowModel::generate_distribution(const PromptCache& prompt, std::size_t steps, Rng& rng) const {
    return generate_from(prompt, steps, rng.normal_vector(cfg_.n_decisions, cfg_.sigma_z));
}

FlowModel::Generated FlowModel::generate_from(const PromptCache& prompt, std::size_t steps,
                                              std::vector<double> z0) const {
    if (steps < 1) throw std::invalid_argument("generate_distribution: steps must be >= 1");
    check_prompt(prompt);
    std::vector<double> z = std::move(z0);
    const double h = 1.0 / static_cast<double>(steps);
    for (std::size_t i = 0; i < steps; ++i) {
        FlowState state{z, static_cast<double>(i) * h};
        const auto phi = vector_field(state, prompt);
        for (std::size_t c = 0; c < z.size(); ++c) z[c] += h * phi[c];
        for (double x : z)
            if (!std::isfinite(x))
                throw NumericError("generate_distribution: non-finite state at step " + std::to_string(i));
    }
    Generated out;
    out.projected = simplex_project(z);
    out.raw = std::move(z);
    return out;
}

double flow_residual_loss(const std::vector<double>& u, const std::vector<double>& phi) {
    double loss = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        const double r = u[i] - phi[i];
        loss += r * r;
    }
    return loss;
}

SimplexVector simplex_project(const std::vector<double>& raw) {
    for (double x : raw)
        if (!std::isfinite(x)) throw NumericError("simplex_project: non-finite input");
    SimplexVector out;
    out.p.assign(raw.size(), 0.0);
    double mass = 0.0;
    for (std::size_t i = 0; i < raw.size(); ++i) {
        if (raw[i] > 0.0) {
            out.p[i] = raw[i];
            mass += raw[i];
        }
    }
    if (mass <= 0.0) {
        const double u = 1.0 / static_cast<double>(raw.size());
        for (auto& x : out.p) x = u;
        return out;
    }
    for (auto& x : out.p) x /= mass;
    return out;
}

JointForwardResult guidance_logits_with_flow_tokens(const FlowModel& flow, const std::vector<int>& tokens,
                                                    const FlowState& state) {
    const GuidanceModel& g = flow.guidance();
    const auto& cfg = g.config();
    const auto& P = g.net().params();

    TransformerCache tc;
    g.forward_hidden(tokens, tc);
    const auto& bc = tc.blocks.back();
    const std::size_t n = tokens.size(), d = cfg.d_model, dk = cfg.d_k;

    Tensor h_emb = flow.embed_flow_tokens(state);
    const Tensor& wq = P.value(last_blk(cfg, "wq"));
    const Tensor& wk = P.value(last_blk(cfg, "wk"));
    const Tensor& wv = P.value(last_blk(cfg, "wv"));
    Tensor qf = nn::matmul(h_emb, wq), kf = nn::matmul(h_emb, wk), vf = nn::matmul(h_emb, wv);

    Tensor jq = Tensor::zeros(n + 2, dk), jk = Tensor::zeros(n + 2, dk), jv = Tensor::zeros(n + 2, dk);
    for (std::size_t r = 0; r < n; ++r) {
        std::copy(bc.q.row(r), bc.q.row(r) + dk, jq.row(r));
        std::copy(bc.k.row(r), bc.k.row(r) + dk, jk.row(r));
        std::copy(bc.v.row(r), bc.v.row(r) + dk, jv.row(r));
    }
    for (std::size_t r = 0; r < 2; ++r) {
        std::copy(qf.row(r), qf.row(r) + dk, jq.row(n + r));
        std::copy(kf.row(r), kf.row(r) + dk, jk.row(n + r));
        std::copy(vf.row(r), vf.row(r) + dk, jv.row(n + r));
    }

    // prompt rows stay causal over prompt keys only; flow rows read everything
    nn::RowExtent extent = [n](std::size_t i) { return i < n ? i + 1 : n + 2; };
    nn::AttentionCache att;
    Tensor joint = nn::masked_attention_forward(jq, jk, jv, cfg.heads, extent, att);

    JointForwardResult result;
    result.h_attn_z.assign(joint.row(n + 1), joint.row(n + 1) + dk);

    // re-run the rest of the last block on the prompt rows
    Tensor x = bc.x_in;
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) x(r, c) += joint(r, c);

    const std::size_t l = cfg.layers - 1;
    const auto& g2 = P.value("blk" + std::to_string(l) + ".ln2.g").vec();
    const auto& b2 = P.value("blk" + std::to_string(l) + ".ln2.b").vec();
    Tensor m_in = Tensor::zeros(n, d);
    for (std::size_t r = 0; r < n; ++r) {
        nn::LayerNormCache lc;
        std::vector<double> row(x.row(r), x.row(r) + d);
        auto normed = nn::layer_norm_forward(row, g2, b2, nn::kLayerNormEps, lc);
        std::copy(normed.begin(), normed.end(), m_in.row(r));
    }
    Tensor h_pre = nn::matmul_add_rows(m_in, P.value("blk" + std::to_string(l) + ".fc1.w"),
                                       P.value("blk" + std::to_string(l) + ".fc1.b").vec());
    for (std::size_t i = 0; i < h_pre.size(); ++i)
        if (h_pre[i] < 0.0) h_pre[i] = 0.0;
    Tensor mlp_out = nn::matmul_add_rows(h_pre, P.value("blk" + std::to_string(l) + ".fc2.w"),
                                         P.value("blk" + std::to_string(l) + ".fc2.b").vec());
    for (std::size_t i = 0; i < n * d; ++i) x[i] += mlp_out[i];

    const auto& gf = P.value("ln_f.g").vec();
    const auto& bf = P.value("ln_f.b").vec();
    Tensor h_final = Tensor::zeros(n, d);
    for (std::size_t r = 0; r < n; ++r) {
        nn::LayerNormCache lc;
        std::vector<double> row(x.row(r), x.row(r) + d);
        auto normed = nn::layer_norm_forward(row, gf, bf, nn::kLayerNormEps, lc);
        std::copy(normed.begin(), normed.end(), h_final.row(r));
    }
    result.logits = nn::matmul(h_final, P.value("w_out"));
    return result;
}

} // namespace p2l
