#include "p2l/policy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "p2l/errors.hpp"

namespace p2l {

void GenerationConfig::validate() const {
    if (!(temperature > 0.0)) throw std::invalid_argument("GenerationConfig: temperature must be positive");
    if (max_sentences == 0 || max_tokens_per_sentence == 0)
        throw std::invalid_argument("GenerationConfig: limits must be positive");
}

void PpoConfig::validate() const {
    if (!(clip > 0.0 && clip < 1.0)) throw std::invalid_argument("PpoConfig: clip out of (0,1)");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("PpoConfig: gamma out of [0,1]");
    if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) throw std::invalid_argument("PpoConfig: lambda out of [0,1]");
    if (rounds < 1) throw std::invalid_argument("PpoConfig: rounds must be >= 1");
}

PolicyModel::PolicyModel(TransformerConfig cfg, TokenIds ids, std::uint64_t init_seed)
    : net_(cfg, init_seed), ids_(ids) {
    // value head: random hidden layer, zero output layer so V = 0 at init
    Rng rng(splitmix64(init_seed ^ 0x7A10E5ULL));
    const std::size_t d = cfg.d_model;
    net_.params().add("vh.fc1.w", nn::gaussian_tensor({d, d}, rng, 0.1));
    net_.params().add("vh.fc1.b", Tensor({d}));
    net_.params().add("vh.fc2.w", Tensor({d, 1}));
    net_.params().add("vh.fc2.b", Tensor({1}));
}

const Transformer& PolicyModel::reference() const {
    if (!ref_) throw InvalidStateError("PolicyModel: no reference snapshot");
    return *ref_;
}

double PolicyModel::value(const double* h_row) const {
    const auto& p = net_.params();
    const Tensor& w1 = p.value("vh.fc1.w");
    const std::size_t d = w1.rows();
    std::vector<double> x(h_row, h_row + d);
    auto h = nn::relu(nn::linear(x, w1, p.value("vh.fc1.b").vec()));
    auto out = nn::linear(h, p.value("vh.fc2.w"), p.value("vh.fc2.b").vec());
    return out[0];
}

namespace {

struct GenState {
    std::size_t sent_len = 0;
    std::size_t sentences = 0;
};

void advance(GenState& s, int token, const PolicyModel::TokenIds& ids) {
    if (token == ids.delimiter) {
        ++s.sentences;
        s.sent_len = 0;
    } else if (token != ids.eot) {
        ++s.sent_len;
    }
}

// Structural mask: empty sentences are impossible, caps force the delimiter,
// the sentence budget forces end-of-text. Shared by sampling and every
// log-prob recomputation so the two always agree.
std::vector<bool> allowed_tokens(const GenState& s, const PolicyModel::TokenIds& ids, const GenerationConfig& cfg,
                                 std::size_t vocab) {
    std::vector<bool> ok(vocab, false);
    if (s.sentences >= cfg.max_sentences) {
        ok[static_cast<std::size_t>(ids.eot)] = true;
        return ok;
    }
    if (s.sent_len >= cfg.max_tokens_per_sentence) {
        ok[static_cast<std::size_t>(ids.delimiter)] = true;
        return ok;
    }
    for (std::size_t j = 0; j < vocab; ++j) ok[j] = true;
    ok[static_cast<std::size_t>(ids.pad)] = false;
    if (s.sent_len == 0) ok[static_cast<std::size_t>(ids.delimiter)] = false;
    if (!(s.sent_len == 0 && s.sentences >= 1)) ok[static_cast<std::size_t>(ids.eot)] = false;
    return ok;
}

struct MaskedDist {
    std::vector<double> logp; // -inf where masked
    double entropy = 0.0;
};

MaskedDist masked_logp(const double* logits, std::size_t vocab, const std::vector<bool>& allowed, double tau) {
    MaskedDist out;
    out.logp.assign(vocab, -std::numeric_limits<double>::infinity());
    if (tau <= 1e-8) {
        // greedy limit: all mass on the allowed argmax
        std::size_t best = vocab;
        for (std::size_t j = 0; j < vocab; ++j)
            if (allowed[j] && (best == vocab || logits[j] > logits[best])) best = j;
        out.logp[best] = 0.0;
        return out;
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < vocab; ++j)
        if (allowed[j]) mx = std::max(mx, logits[j] / tau);
    double sum = 0.0;
    for (std::size_t j = 0; j < vocab; ++j)
        if (allowed[j]) sum += std::exp(logits[j] / tau - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t j = 0; j < vocab; ++j) {
        if (!allowed[j]) continue;
        out.logp[j] = logits[j] / tau - lse;
        const double p = std::exp(out.logp[j]);
        if (p > 0.0) out.entropy -= p * out.logp[j];
    }
    return out;
}

std::size_t sample_from(const MaskedDist& dist, Rng& rng) {
    // greedy limit stores exactly one zero logp
    const double u = rng.uniform();
    double acc = 0.0;
    std::size_t last = 0;
    bool any = false;
    for (std::size_t j = 0; j < dist.logp.size(); ++j) {
        if (std::isinf(dist.logp[j])) continue;
        const double p = std::exp(dist.logp[j]);
        acc += p;
        last = j;
        any = true;
        if (u < acc) return j;
    }
    if (!any) throw NumericError("sample_from: empty support");
    return last;
}

} // namespace

GenerationResult generate_explanation(const PolicyModel& policy, const std::vector<int>& prompt,
                                      const GenerationConfig& cfg, Rng& rng) {
    cfg.validate();
    const auto& net = policy.net();
    const std::size_t vocab = net.config().vocab;
    const std::size_t budget = cfg.max_sentences * (cfg.max_tokens_per_sentence + 1) + 1;
    if (prompt.empty()) throw std::invalid_argument("generate_explanation: empty prompt");
    if (prompt.size() + budget > net.config().n_max)
        throw std::invalid_argument("generate_explanation: context plus generation budget exceeds n_max");

    GenerationResult out;
    std::vector<int> seq = prompt;
    GenState state;
    std::vector<int> sentence;
    std::size_t span_begin = 0;
    while (true) {
        TransformerCache cache;
        Tensor logits = net.forward(seq, cache);
        const auto allowed = allowed_tokens(state, policy.ids(), cfg, vocab);
        const auto dist = masked_logp(logits.row(seq.size() - 1), vocab, allowed, cfg.temperature);
        const std::size_t tok = sample_from(dist, rng);
        out.response.push_back(static_cast<int>(tok));
        out.logp.push_back(dist.logp[tok]);
        seq.push_back(static_cast<int>(tok));

        if (static_cast<int>(tok) == policy.ids().eot) {
            out.ended_with_eot = true;
            break;
        }
        if (static_cast<int>(tok) == policy.ids().delimiter) {
            out.explanation.sentences.push_back(sentence);
            out.spans.emplace_back(span_begin, out.response.size());
            span_begin = out.response.size();
            sentence.clear();
        } else {
            sentence.push_back(static_cast<int>(tok));
        }
        advance(state, static_cast<int>(tok), policy.ids());
    }
    if (out.explanation.sentences.empty())
        throw DegenerateOutputError("generate_explanation: no complete sentence produced");
    return out;
}

std::vector<double> response_logp(const Transformer& net, const PolicyModel::TokenIds& ids,
                                  const std::vector<int>& prompt, const std::vector<int>& response,
                                  const GenerationConfig& cfg) {
    std::vector<int> seq = prompt;
    seq.insert(seq.end(), response.begin(), response.end());
    TransformerCache cache;
    Tensor logits = net.forward(seq, cache);
    std::vector<double> out(response.size());
    GenState state;
    for (std::size_t t = 0; t < response.size(); ++t) {
        const auto allowed = allowed_tokens(state, ids, cfg, net.config().vocab);
        const auto dist = masked_logp(logits.row(prompt.size() + t - 1), net.config().vocab, allowed, cfg.temperature);
        out[t] = dist.logp[static_cast<std::size_t>(response[t])];
        advance(state, response[t], ids);
    }
    return out;
}

std::vector<double> attribute_rewards(const RewardTrace& trace,
                                      const std::vector<std::pair<std::size_t, std::size_t>>& spans,
                                      std::size_t total_tokens, const std::vector<double>& kl_per_token, double beta,
                                      bool spread_uniform) {
    if (spans.size() != trace.rewards.size())
        throw std::invalid_argument("attribute_rewards: span/trace length mismatch");
    if (kl_per_token.size() != total_tokens)
        throw std::invalid_argument("attribute_rewards: kl length mismatch");
    std::size_t expect = 0;
    for (std::size_t i = 0; i < spans.size(); ++i) {
        if (spans[i].first != expect || spans[i].second <= spans[i].first)
            throw std::invalid_argument("attribute_rewards: spans must partition the sentence tokens");
        expect = spans[i].second;
    }
    if (expect > total_tokens) throw std::invalid_argument("attribute_rewards: spans exceed token count");

    std::vector<double> rewards(total_tokens, 0.0);
    for (std::size_t i = 0; i < spans.size(); ++i) {
        if (spread_uniform) {
            const double share = trace.rewards[i] / static_cast<double>(spans[i].second - spans[i].first);
            for (std::size_t t = spans[i].first; t < spans[i].second; ++t) rewards[t] += share;
        } else {
            rewards[spans[i].second - 1] += trace.rewards[i];
        }
    }
    for (std::size_t t = 0; t < total_tokens; ++t) rewards[t] -= beta * kl_per_token[t];
    return rewards;
}

namespace {

struct EpisodeView {
    const PpoEpisode* ep = nullptr;
    std::vector<double> advantages;
    std::vector<double> returns;
};

// value-head backward: accumulates parameter grads, returns d h_row
void value_backward(ParameterStore& p, const double* h_row, double dv, std::vector<double>& dh_row) {
    const Tensor& w1 = p.value("vh.fc1.w");
    const std::size_t d = w1.rows();
    std::vector<double> x(h_row, h_row + d);
    auto h_pre = nn::linear(x, w1, p.value("vh.fc1.b").vec());
    auto h = nn::relu(h_pre);
    std::vector<double> dout = {dv};
    auto dh = nn::linear_backward(dout, h, p.value("vh.fc2.w"), p.grad("vh.fc2.w"), p.grad("vh.fc2.b").vec());
    dh = nn::relu_backward(dh, h_pre);
    auto dx = nn::linear_backward(dh, x, w1, p.grad("vh.fc1.w"), p.grad("vh.fc1.b").vec());
    for (std::size_t i = 0; i < d; ++i) dh_row[i] += dx[i];
}

} // namespace

PpoStats ppo_update(PolicyModel& policy, const std::vector<PpoEpisode>& batch, const PpoConfig& cfg,
                    const GenerationConfig& gen, double lr_now, std::uint64_t seed) {
    if (batch.empty()) throw std::invalid_argument("ppo_update: empty batch");
    cfg.validate();
    auto& net = policy.net();
    const std::size_t vocab = net.config().vocab;

    // GAE from the entry-time value head; advantages stay fixed across the
    // update epochs
    std::vector<EpisodeView> views(batch.size());
    double adv_mean = 0.0, adv_sq = 0.0;
    std::size_t total_tokens = 0;
    for (std::size_t e = 0; e < batch.size(); ++e) {
        const auto& ep = batch[e];
        if (ep.response.empty() || ep.response.size() != ep.old_logp.size() ||
            ep.response.size() != ep.token_rewards.size())
            throw std::invalid_argument("ppo_update: inconsistent episode");
        TransformerCache cache;
        net.forward([&] {
            std::vector<int> seq = ep.prompt;
            seq.insert(seq.end(), ep.response.begin(), ep.response.end());
            return seq;
        }(), cache);
        const std::size_t T = ep.response.size();
        std::vector<double> values(T);
        for (std::size_t t = 0; t < T; ++t) values[t] = policy.value(cache.h_final.row(ep.prompt.size() + t - 1));
        auto& view = views[e];
        view.ep = &ep;
        view.advantages.assign(T, 0.0);
        view.returns.assign(T, 0.0);
        double next_adv = 0.0, next_value = 0.0;
        for (std::size_t t = T; t-- > 0;) {
            const double delta = ep.token_rewards[t] + cfg.gamma * next_value - values[t];
            next_adv = delta + cfg.gamma * cfg.gae_lambda * next_adv;
            next_value = values[t];
            view.advantages[t] = next_adv;
            view.returns[t] = next_adv + values[t];
            if (!std::isfinite(next_adv)) throw NumericError("ppo_update: non-finite advantage");
            adv_mean += next_adv;
            adv_sq += next_adv * next_adv;
            ++total_tokens;
        }
    }
    adv_mean /= static_cast<double>(total_tokens);
    const double adv_std = std::sqrt(std::max(adv_sq / static_cast<double>(total_tokens) - adv_mean * adv_mean, 0.0));
    if (cfg.normalize_advantages) {
        for (auto& v : views)
            for (auto& a : v.advantages) a = (a - adv_mean) / (adv_std + 1e-8);
    }

    nn::Adam opt({lr_now});
    Rng rng(seed);
    std::vector<std::size_t> order(batch.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    PpoStats stats;
    for (std::size_t pass = 0; pass < cfg.update_epochs; ++pass) {
        rng.shuffle(order);
        stats = PpoStats{};
        std::size_t done = 0;
        while (done < order.size()) {
            const std::size_t bend = std::min(done + cfg.minibatch, order.size());
            net.params().zero_grads();
            std::size_t mb_tokens = 0;
            for (std::size_t bi = done; bi < bend; ++bi) mb_tokens += views[order[bi]].ep->response.size();
            const double inv_tok = 1.0 / static_cast<double>(mb_tokens);

            for (std::size_t bi = done; bi < bend; ++bi) {
                const auto& view = views[order[bi]];
                const auto& ep = *view.ep;
                std::vector<int> seq = ep.prompt;
                seq.insert(seq.end(), ep.response.begin(), ep.response.end());
                TransformerCache cache;
                Tensor logits = net.forward(seq, cache);
                const std::size_t T = ep.response.size(), P = ep.prompt.size(), d = net.config().d_model;

                Tensor dlogits = Tensor::zeros(seq.size(), vocab);
                Tensor dh_final = Tensor::zeros(seq.size(), d);
                GenState gstate;
                for (std::size_t t = 0; t < T; ++t) {
                    const std::size_t row = P + t - 1;
                    const auto allowed = allowed_tokens(gstate, policy.ids(), gen, vocab);
                    const auto dist = masked_logp(logits.row(row), vocab, allowed, gen.temperature);
                    const auto a = static_cast<std::size_t>(ep.response[t]);
                    const double logp_new = dist.logp[a];
                    const double ratio = std::exp(logp_new - ep.old_logp[t]);
                    const double adv = view.advantages[t];
                    const double unclipped = ratio * adv;
                    const double clipped = std::clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv;
                    stats.surrogate += std::min(unclipped, clipped);
                    stats.approx_kl += ep.old_logp[t] - logp_new;
                    stats.entropy += dist.entropy;

                    // d/dlogp of -min(...): active only when the unclipped
                    // branch is the minimum
                    double dlogp = 0.0;
                    if (unclipped <= clipped) dlogp = -ratio * adv;
                    // entropy bonus: dH/dlogit_j = -p_j (logp_j + H)
                    const double vcur = policy.value(cache.h_final.row(row));
                    const double verr = vcur - view.returns[t];
                    stats.value_loss += verr * verr;

                    double* dl = dlogits.row(row);
                    const double inv_tau = gen.temperature <= 1e-8 ? 0.0 : 1.0 / gen.temperature;
                    for (std::size_t j = 0; j < vocab; ++j) {
                        if (std::isinf(dist.logp[j])) continue;
                        const double pj = std::exp(dist.logp[j]);
                        double g = dlogp * ((j == a ? 1.0 : 0.0) - pj); // policy term
                        g += cfg.entropy_coef * pj * (dist.logp[j] + dist.entropy);
                        dl[j] += g * inv_tau * inv_tok;
                    }
                    std::vector<double> dh(d, 0.0);
                    value_backward(net.params(), cache.h_final.row(row), 2.0 * cfg.value_coef * verr * inv_tok, dh);
                    double* dhf = dh_final.row(row);
                    for (std::size_t c = 0; c < d; ++c) dhf[c] += dh[c];
                    advance(gstate, ep.response[t], policy.ids());
                }
                net.backward(dlogits, &dh_final, cache);
                stats.tokens += T;
            }
            opt.step(net.params());
            done = bend;
        }
    }
    const double inv = stats.tokens == 0 ? 0.0 : 1.0 / static_cast<double>(stats.tokens);
    stats.surrogate *= inv;
    stats.value_loss *= inv;
    stats.entropy *= inv;
    stats.approx_kl *= inv;
    return stats;
}

} // namespace p2l
