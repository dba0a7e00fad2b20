#include "doctest.h"

#include <cmath>
#include <cstring>

#include "p2l/nn.hpp"
#include "p2l/rng.hpp"
#include "p2l/transformer.hpp"

using namespace p2l;

TEST_CASE("softmax basics") {
    auto s = nn::softmax({0.0, 0.0});
    CHECK(s[0] == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(s[1] == doctest::Approx(0.5).epsilon(1e-14));

    auto s2 = nn::softmax({std::log(2.0), 0.0});
    CHECK(s2[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
    CHECK(s2[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));

    auto s3 = nn::softmax({1000.0, 0.0});
    CHECK(std::isfinite(s3[0]));
    CHECK(s3[0] == doctest::Approx(1.0));
    CHECK(s3[1] == doctest::Approx(0.0));

    CHECK_THROWS_AS(nn::softmax({}), std::invalid_argument);
}

TEST_CASE("softmax sums to one and stays in (0,1)") {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> v(1 + rng.index(8));
        for (auto& x : v) x = rng.uniform(-30.0, 30.0);
        auto s = nn::softmax(v);
        double sum = 0.0;
        for (std::size_t i = 0; i < s.size(); ++i) {
            CHECK(s[i] > 0.0);
            CHECK(s[i] < 1.0 + 1e-12);
            sum += s[i];
        }
        CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
}

TEST_CASE("layer_norm") {
    SUBCASE("constant input returns bias") {
        std::vector<double> bias = {0.3, -0.7, 2.0};
        auto y = nn::layer_norm({5.0, 5.0, 5.0}, {1.0, 1.0, 1.0}, bias);
        for (int i = 0; i < 3; ++i) CHECK(y[i] == doctest::Approx(bias[i]).epsilon(1e-12));
    }
    SUBCASE("already normalized input passes through as epsilon -> 0") {
        auto y = nn::layer_norm({1.0, -1.0}, {1.0, 1.0}, {0.0, 0.0}, 1e-14);
        CHECK(y[0] == doctest::Approx(1.0).epsilon(1e-6));
        CHECK(y[1] == doctest::Approx(-1.0).epsilon(1e-6));
    }
    SUBCASE("random input matches direct recomputation") {
        Rng rng(11);
        std::vector<double> v(8), g(8), b(8);
        for (int i = 0; i < 8; ++i) {
            v[i] = rng.uniform(-2.0, 2.0);
            g[i] = rng.uniform(0.5, 1.5);
            b[i] = rng.uniform(-1.0, 1.0);
        }
        const double eps = 1e-5;
        auto y = nn::layer_norm(v, g, b, eps);
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= 8.0;
        double var = 0.0;
        for (double x : v) var += (x - mean) * (x - mean);
        var /= 8.0;
        for (int i = 0; i < 8; ++i) {
            const double expect = g[i] * (v[i] - mean) / std::sqrt(var + eps) + b[i];
            CHECK(y[i] == doctest::Approx(expect).epsilon(1e-13));
        }
    }
    SUBCASE("length mismatch throws") {
        CHECK_THROWS_AS(nn::layer_norm({1.0, 2.0}, {1.0}, {0.0, 0.0}), std::invalid_argument);
    }
}

TEST_CASE("attention") {
    SUBCASE("single query returns its value row") {
        Tensor h = Tensor::zeros(1, 3);
        h(0, 0) = 0.4; h(0, 1) = -1.0; h(0, 2) = 2.0;
        Rng rng(3);
        Tensor wq = nn::gaussian_tensor({3, 2}, rng, 1.0);
        Tensor wk = nn::gaussian_tensor({3, 2}, rng, 1.0);
        Tensor wv = nn::gaussian_tensor({3, 2}, rng, 1.0);
        Tensor out = nn::attention(h, wq, wk, wv);
        Tensor v = nn::matmul(h, wv);
        CHECK(out(0, 0) == doctest::Approx(v(0, 0)).epsilon(1e-14));
        CHECK(out(0, 1) == doctest::Approx(v(0, 1)).epsilon(1e-14));
    }
    SUBCASE("identical keys and values collapse to that value") {
        // two positions carrying the same content: any convex mix is the content
        Tensor h = Tensor::zeros(2, 3);
        for (int c = 0; c < 3; ++c) { h(0, c) = 0.5 * c - 0.3; h(1, c) = h(0, c); }
        Rng rng(5);
        Tensor wq = nn::gaussian_tensor({3, 3}, rng, 0.7);
        Tensor wk = nn::gaussian_tensor({3, 3}, rng, 0.7);
        Tensor wv = nn::gaussian_tensor({3, 3}, rng, 0.7);
        Tensor out = nn::attention(h, wq, wk, wv);
        Tensor v = nn::matmul(h, wv);
        for (int r = 0; r < 2; ++r)
            for (int c = 0; c < 3; ++c) CHECK(out(r, c) == doctest::Approx(v(0, c)).epsilon(1e-12));
    }
    SUBCASE("random 3x4 instance matches step-by-step matrix oracle") {
        Rng rng(17);
        Tensor h = nn::gaussian_tensor({3, 4}, rng, 1.0);
        Tensor wq = nn::gaussian_tensor({4, 4}, rng, 0.6);
        Tensor wk = nn::gaussian_tensor({4, 4}, rng, 0.6);
        Tensor wv = nn::gaussian_tensor({4, 4}, rng, 0.6);
        Tensor out = nn::attention(h, wq, wk, wv);

        // independent recomputation with plain loops
        Tensor q = nn::matmul(h, wq), k = nn::matmul(h, wk), v = nn::matmul(h, wv);
        for (int i = 0; i < 3; ++i) {
            std::vector<double> logit(3, 0.0);
            for (int j = 0; j < 3; ++j) {
                for (int c = 0; c < 4; ++c) logit[j] += q(i, c) * k(j, c);
                logit[j] /= std::sqrt(4.0);
            }
            auto p = nn::softmax(logit);
            for (int c = 0; c < 4; ++c) {
                double acc = 0.0;
                for (int j = 0; j < 3; ++j) acc += p[j] * v(j, c);
                CHECK(std::abs(acc - out(i, c)) <= 1e-12);
            }
        }
    }
    SUBCASE("fully masked row throws") {
        Tensor h = Tensor::zeros(2, 2);
        h(0, 0) = 1.0; h(1, 1) = 1.0;
        Tensor wq = Tensor::zeros(2, 2), wk = Tensor::zeros(2, 2), wv = Tensor::zeros(2, 2);
        std::vector<std::vector<bool>> mask = {{true, false}, {false, false}};
        CHECK_THROWS_AS(nn::attention(h, wq, wk, wv, &mask), std::invalid_argument);
    }
    SUBCASE("causal mask ignores future positions exactly") {
        Rng rng(23);
        Tensor h = nn::gaussian_tensor({4, 3}, rng, 1.0);
        Tensor wq = nn::gaussian_tensor({3, 3}, rng, 0.8);
        Tensor wk = nn::gaussian_tensor({3, 3}, rng, 0.8);
        Tensor wv = nn::gaussian_tensor({3, 3}, rng, 0.8);
        std::vector<std::vector<bool>> causal(4, std::vector<bool>(4, false));
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j <= i; ++j) causal[i][j] = true;
        Tensor out1 = nn::attention(h, wq, wk, wv, &causal);
        Tensor h2 = h;
        h2(3, 0) += 10.0; // perturb the last position
        Tensor out2 = nn::attention(h2, wq, wk, wv, &causal);
        for (int i = 0; i < 3; ++i)
            for (int c = 0; c < 3; ++c) CHECK(out1(i, c) == out2(i, c));
    }
}

TEST_CASE("positional encoding") {
    SUBCASE("t = 0 alternates 0, 1") {
        auto pe = nn::positional_encoding(0.0, 6);
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(pe[2 * i] == doctest::Approx(0.0));
            CHECK(pe[2 * i + 1] == doctest::Approx(1.0));
        }
    }
    SUBCASE("pairs lie on the unit circle") {
        for (double t : {0.1, 0.37, 0.99}) {
            auto pe = nn::positional_encoding(t, 8);
            for (std::size_t i = 0; i < 4; ++i)
                CHECK(pe[2 * i] * pe[2 * i] + pe[2 * i + 1] * pe[2 * i + 1] == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
    SUBCASE("t = 0.5, d = 4 matches scalar trig") {
        auto pe = nn::positional_encoding(0.5, 4);
        CHECK(pe[0] == doctest::Approx(std::sin(0.5)).epsilon(1e-14));
        CHECK(pe[1] == doctest::Approx(std::cos(0.5)).epsilon(1e-14));
        CHECK(pe[2] == doctest::Approx(std::sin(0.5 * 1000.0)).epsilon(1e-12));
        CHECK(pe[3] == doctest::Approx(std::cos(0.5 * 1000.0)).epsilon(1e-12));
    }
    SUBCASE("t out of range throws") {
        CHECK_THROWS_AS(nn::positional_encoding(-0.1, 4), std::invalid_argument);
        CHECK_THROWS_AS(nn::positional_encoding(1.1, 4), std::invalid_argument);
    }
}

TEST_CASE("mlp_forward") {
    SUBCASE("identity weights, zero bias, linear activation") {
        Tensor w = Tensor::zeros(3, 3);
        for (int i = 0; i < 3; ++i) w(i, i) = 1.0;
        std::vector<double> b(3, 0.0);
        std::vector<nn::MlpLayerSpec> layers{{&w, &b, nn::Activation::Linear, nullptr, nullptr}};
        auto y = nn::mlp_forward({0.3, -0.9, 1.4}, layers);
        CHECK(y[0] == doctest::Approx(0.3));
        CHECK(y[1] == doctest::Approx(-0.9));
        CHECK(y[2] == doctest::Approx(1.4));
    }
    SUBCASE("single relu layer clamps negatives") {
        Tensor w = Tensor::zeros(2, 2);
        w(0, 0) = 1.0; w(1, 1) = 1.0;
        std::vector<double> b(2, 0.0);
        std::vector<nn::MlpLayerSpec> layers{{&w, &b, nn::Activation::Relu, nullptr, nullptr}};
        auto y = nn::mlp_forward({-1.0, 2.0}, layers);
        CHECK(y[0] == 0.0);
        CHECK(y[1] == 2.0);
    }
    SUBCASE("two random layers match the hand-chained oracle") {
        Rng rng(31);
        Tensor w1 = nn::gaussian_tensor({4, 5}, rng, 0.8);
        Tensor w2 = nn::gaussian_tensor({5, 3}, rng, 0.8);
        std::vector<double> b1(5), b2(3), g(5, 1.0), lb(5, 0.0);
        for (auto& x : b1) x = rng.uniform(-1.0, 1.0);
        for (auto& x : b2) x = rng.uniform(-1.0, 1.0);
        std::vector<double> x = {0.2, -0.5, 1.1, 0.7};
        std::vector<nn::MlpLayerSpec> layers{
            {&w1, &b1, nn::Activation::Relu, &g, &lb},
            {&w2, &b2, nn::Activation::Linear, nullptr, nullptr},
        };
        auto y = nn::mlp_forward(x, layers);
        auto h = nn::layer_norm(nn::relu(nn::linear(x, w1, b1)), g, lb);
        auto expect = nn::linear(h, w2, b2);
        for (int i = 0; i < 3; ++i) CHECK(std::abs(y[i] - expect[i]) <= 1e-12);
    }
}

namespace {

// sum-of-squares readout used to turn layer outputs into a scalar loss
double readout(const std::vector<double>& y) {
    double s = 0.0;
    for (double v : y) s += v * v;
    return s;
}

} // namespace

TEST_CASE("grad_check on simple objectives") {
    SUBCASE("sum of squares") {
        ParameterStore store;
        Rng rng(41);
        store.add("w", nn::gaussian_tensor({6}, rng, 1.0));
        auto f = [](ParameterStore& s, bool grads) {
            const Tensor& w = s.value("w");
            double loss = 0.0;
            for (std::size_t i = 0; i < w.size(); ++i) loss += w[i] * w[i];
            if (grads)
                for (std::size_t i = 0; i < w.size(); ++i) s.grad("w")[i] += 2.0 * w[i];
            return loss;
        };
        CHECK(nn::grad_check(f, store, 1e-5) < 1e-8);
    }
    SUBCASE("softmax cross entropy of three logits") {
        ParameterStore store;
        store.add("logits", Tensor({3}, {0.4, -1.2, 0.9}));
        auto f = [](ParameterStore& s, bool grads) {
            const auto& l = s.value("logits").vec();
            const double loss = nn::log_sum_exp(l) - l[1];
            if (grads) {
                auto p = nn::softmax(l);
                for (int i = 0; i < 3; ++i) s.grad("logits")[i] += p[i] - (i == 1 ? 1.0 : 0.0);
            }
            return loss;
        };
        CHECK(nn::grad_check(f, store, 1e-5) < 1e-5);
    }
    SUBCASE("constant function has zero gradient") {
        ParameterStore store;
        store.add("w", Tensor({4}, {1.0, 2.0, 3.0, 4.0}));
        auto f = [](ParameterStore&, bool) { return 3.25; };
        CHECK(nn::grad_check(f, store, 1e-5) == 0.0);
    }
}

TEST_CASE("grad_check per layer type") {
    Rng rng(53);
    std::vector<double> x = {0.2, -0.7, 1.3};

    SUBCASE("dense") {
        ParameterStore store;
        store.add("w", nn::gaussian_tensor({3, 4}, rng, 0.8));
        store.add("b", nn::gaussian_tensor({4}, rng, 0.5));
        auto f = [&x](ParameterStore& s, bool grads) {
            auto y = nn::linear(x, s.value("w"), s.value("b").vec());
            if (grads) {
                std::vector<double> dy(y.size());
                for (std::size_t i = 0; i < y.size(); ++i) dy[i] = 2.0 * y[i];
                nn::linear_backward(dy, x, s.value("w"), s.grad("w"), s.grad("b").vec());
            }
            return readout(y);
        };
        CHECK(nn::grad_check(f, store, 1e-5) <= 1e-5);
    }

    SUBCASE("layer norm") {
        ParameterStore store;
        store.add("g", nn::gaussian_tensor({3}, rng, 0.4));
        store.add("b", nn::gaussian_tensor({3}, rng, 0.4));
        auto f = [&x](ParameterStore& s, bool grads) {
            nn::LayerNormCache cache;
            auto y = nn::layer_norm_forward(x, s.value("g").vec(), s.value("b").vec(), 1e-5, cache);
            if (grads) {
                std::vector<double> dy(y.size());
                for (std::size_t i = 0; i < y.size(); ++i) dy[i] = 2.0 * y[i];
                nn::layer_norm_backward(dy, s.value("g").vec(), cache, s.grad("g").vec(), s.grad("b").vec());
            }
            return readout(y);
        };
        CHECK(nn::grad_check(f, store, 1e-5) <= 1e-5);
    }

    SUBCASE("attention including input path") {
        ParameterStore store;
        store.add("h", nn::gaussian_tensor({4, 3}, rng, 0.9));
        store.add("wq", nn::gaussian_tensor({3, 3}, rng, 0.6));
        store.add("wk", nn::gaussian_tensor({3, 3}, rng, 0.6));
        store.add("wv", nn::gaussian_tensor({3, 3}, rng, 0.6));
        auto causal = [](std::size_t i) { return i + 1; };
        auto f = [&](ParameterStore& s, bool grads) {
            const Tensor& h = s.value("h");
            Tensor q = nn::matmul(h, s.value("wq"));
            Tensor k = nn::matmul(h, s.value("wk"));
            Tensor v = nn::matmul(h, s.value("wv"));
            nn::AttentionCache cache;
            Tensor out = nn::masked_attention_forward(q, k, v, 1, causal, cache);
            double loss = 0.0;
            for (std::size_t i = 0; i < out.size(); ++i) loss += out[i] * out[i];
            if (grads) {
                Tensor dout = out;
                for (std::size_t i = 0; i < dout.size(); ++i) dout[i] *= 2.0;
                Tensor dq = Tensor::zeros(4, 3), dk = Tensor::zeros(4, 3), dv = Tensor::zeros(4, 3);
                nn::masked_attention_backward(dout, q, k, v, cache, dq, dk, dv);
                Tensor dh1 = nn::matmul_backward(dq, h, s.value("wq"), s.grad("wq"));
                Tensor dh2 = nn::matmul_backward(dk, h, s.value("wk"), s.grad("wk"));
                Tensor dh3 = nn::matmul_backward(dv, h, s.value("wv"), s.grad("wv"));
                for (std::size_t i = 0; i < dh1.size(); ++i) s.grad("h")[i] += dh1[i] + dh2[i] + dh3[i];
            }
            return loss;
        };
        CHECK(nn::grad_check(f, store, 1e-5) <= 1e-5);
    }
}

TEST_CASE("full transformer gradients pass the finite-difference check") {
    TransformerConfig cfg;
    cfg.layers = 2;
    cfg.d_model = 4;
    cfg.d_k = 4;
    cfg.heads = 2;
    cfg.vocab = 7;
    cfg.n_max = 6;
    cfg.d_ff = 8;
    Transformer net(cfg, 99);
    std::vector<int> ids = {1, 4, 2, 6};

    auto f = [&](ParameterStore&, bool grads) {
        TransformerCache cache;
        Tensor logits = net.forward(ids, cache);
        Tensor dlogits;
        const double loss = net.lm_loss(ids, cache, logits, grads ? &dlogits : nullptr);
        if (grads) net.backward(dlogits, nullptr, cache);
        return loss;
    };
    CHECK(nn::grad_check(f, net.params(), 1e-5) <= 1e-5);
}

TEST_CASE("forward and backward are bitwise deterministic") {
    TransformerConfig cfg;
    cfg.layers = 2;
    cfg.d_model = 8;
    cfg.d_k = 8;
    cfg.vocab = 11;
    cfg.n_max = 10;
    Transformer a(cfg, 1234), b(cfg, 1234);
    CHECK(a.params().checksum() == b.params().checksum());

    std::vector<int> ids = {3, 1, 4, 1, 5};
    TransformerCache ca, cb;
    Tensor la = a.forward(ids, ca);
    Tensor lb = b.forward(ids, cb);
    CHECK(std::memcmp(la.data(), lb.data(), la.size() * sizeof(double)) == 0);

    Tensor dla, dlb;
    a.lm_loss(ids, ca, la, &dla);
    b.lm_loss(ids, cb, lb, &dlb);
    a.backward(dla, nullptr, ca);
    b.backward(dlb, nullptr, cb);
    for (std::size_t i = 0; i < a.params().size(); ++i) {
        const auto& ga = a.params().param(i).grad;
        const auto& gb = b.params().param(i).grad;
        CHECK(std::memcmp(ga.data(), gb.data(), ga.size() * sizeof(double)) == 0);
    }
}

TEST_CASE("causality: appending a token leaves earlier logits unchanged") {
    TransformerConfig cfg;
    cfg.layers = 2;
    cfg.d_model = 8;
    cfg.d_k = 8;
    cfg.vocab = 9;
    cfg.n_max = 12;
    Transformer net(cfg, 7);
    std::vector<int> ids = {2, 5, 7};
    std::vector<int> longer = {2, 5, 7, 1};
    TransformerCache c1, c2;
    Tensor l1 = net.forward(ids, c1);
    Tensor l2 = net.forward(longer, c2);
    for (std::size_t r = 0; r < ids.size(); ++r)
        for (std::size_t j = 0; j < cfg.vocab; ++j) CHECK(l1(r, j) == l2(r, j));
}
