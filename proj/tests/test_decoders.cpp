#include "doctest.h"
#include "test_util.hpp"

#include "qasa/decoders.hpp"

namespace ad = qasa::ad;
using qasa::GateConfig;
using testutil::gradcheck;
using testutil::random_matrix;

namespace {

using Mask = std::vector<std::uint8_t>;

qasa::TransformerDecoderConfig tcfg(int n, int du, int dy) {
    qasa::TransformerDecoderConfig c;
    c.num_tokens = n;
    c.slot_dim = du;
    c.model_dim = 8;
    c.output_dim = dy;
    c.layers = 2;
    c.heads = 2;
    c.mlp_hidden = 12;
    return c;
}

qasa::MlpDecoderConfig mcfg(int n, int du, int dy) {
    qasa::MlpDecoderConfig c;
    c.num_tokens = n;
    c.slot_dim = du;
    c.hidden = 10;
    c.output_dim = dy;
    return c;
}

Mask random_mask(int k, std::mt19937_64& rng) {
    std::bernoulli_distribution b(0.5);
    Mask m(k);
    for (auto& v : m) v = b(rng);
    m[std::uniform_int_distribution<int>(0, k - 1)(rng)] = 1;
    return m;
}

double max_abs(const Matrix& a, const Matrix& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("gate construction") {
    auto all = qasa::build_gates({1, 1, 1}, GateConfig{});
    CHECK(all.g1 == Eigen::VectorXd::Ones(3));
    CHECK(all.g2 == Eigen::VectorXd::Ones(3));
    auto g = qasa::build_gates({1, 0}, GateConfig{});
    CHECK(g.g1(0) == 1.0);
    CHECK(g.g1(1) == 1e-3);
    CHECK(g.g2(0) == 1.0);
    CHECK(g.g2(1) == 1e-6);
    std::mt19937_64 rng(1);
    for (int rep = 0; rep < 50; ++rep) {
        auto m = random_mask(6, rng);
        auto gg = qasa::build_gates(m, GateConfig{});
        CHECK(gg.g1.minCoeff() >= 1e-3);
        CHECK(gg.g2.minCoeff() >= 1e-6);
    }
    GateConfig only_g1;
    only_g1.use_g2 = false;
    CHECK(qasa::build_gates({0, 1}, only_g1).g2 == Eigen::VectorXd::Ones(2));
    GateConfig only_g2;
    only_g2.use_g1 = false;
    CHECK(qasa::build_gates({0, 1}, only_g2).g1 == Eigen::VectorXd::Ones(2));
    GateConfig bad;
    bad.epsilon1 = 1.5;
    CHECK_THROWS(bad.validate());
}

TEST_CASE("cross attention with unit gates equals ungated attention") {
    std::mt19937_64 rng(2);
    for (int rep = 0; rep < 100; ++rep) {
        Var q = ad::constant(random_matrix(7, 4, rng, -2, 2));
        Var k = ad::constant(random_matrix(5, 4, rng, -2, 2));
        Var v = ad::constant(random_matrix(5, 3, rng, -2, 2));
        auto gates = qasa::build_gates(Mask(5, 1), GateConfig{});
        auto a = qasa::gated_cross_attention(q, k, v, &gates, 0.5);
        auto b = qasa::gated_cross_attention(q, k, v, nullptr, 0.5);
        CHECK(max_abs(a.output.value(), b.output.value()) < 1e-6);
    }
}

TEST_CASE("cross attention against a manual softmax") {
    std::mt19937_64 rng(3);
    Var q = ad::constant(random_matrix(3, 4, rng));
    Var k = ad::constant(random_matrix(4, 4, rng));
    Var v = ad::constant(random_matrix(4, 2, rng));
    Mask m{1, 0, 1, 0};
    auto gates = qasa::build_gates(m, GateConfig{});
    auto out = qasa::gated_cross_attention(q, k, v, &gates, 0.5);
    for (int t = 0; t < 3; ++t) {
        std::vector<double> logit(4);
        double z = 0.0;
        for (int i = 0; i < 4; ++i) {
            double dot = 0.0;
            for (int d = 0; d < 4; ++d) dot += q.value()(t, d) * k.value()(i, d) * gates.g1(i);
            logit[i] = std::exp(0.5 * dot + std::log(gates.g2(i)));
            z += logit[i];
        }
        for (int d = 0; d < 2; ++d) {
            double y = 0.0;
            for (int i = 0; i < 4; ++i) y += logit[i] / z * v.value()(i, d) * gates.g1(i);
            CHECK(out.output.value()(t, d) == doctest::Approx(y).epsilon(1e-12));
        }
    }
}

TEST_CASE("a single active slot takes nearly all attention") {
    std::mt19937_64 rng(4);
    GateConfig cfg;
    cfg.epsilon2 = 1e-8;
    for (int rep = 0; rep < 100; ++rep) {
        Var q = ad::constant(random_matrix(6, 4, rng));
        Var k = ad::constant(random_matrix(5, 4, rng));
        Var v = ad::constant(random_matrix(5, 3, rng));
        Mask m(5, 0);
        const int on = rep % 5;
        m[on] = 1;
        auto gates = qasa::build_gates(m, cfg);
        auto out = qasa::gated_cross_attention(q, k, v, &gates, 0.5);
        CHECK(out.weights.value().col(on).minCoeff() > 0.999);
    }
}

TEST_CASE("an unselected slot's value contributes less than eps1 times its norm") {
    std::mt19937_64 rng(5);
    GateConfig cfg;
    cfg.use_g2 = false;  // isolate the K/V gate
    for (int rep = 0; rep < 100; ++rep) {
        Var q = ad::constant(random_matrix(6, 4, rng, -3, 3));
        Var k = ad::constant(random_matrix(4, 4, rng, -3, 3));
        Matrix vm = random_matrix(4, 3, rng, -3, 3);
        Mask m{1, 1, 1, 1};
        m[rep % 4] = 0;
        auto gates = qasa::build_gates(m, cfg);
        auto full = qasa::gated_cross_attention(q, k, ad::constant(vm), &gates, 0.5);
        Matrix dropped = vm;
        dropped.row(rep % 4).setZero();
        auto without = qasa::gated_cross_attention(q, k, ad::constant(dropped), &gates, 0.5);
        for (int t = 0; t < 6; ++t) {
            const double contribution = (full.output.value().row(t) - without.output.value().row(t)).norm();
            CHECK(contribution < cfg.epsilon1 * vm.row(rep % 4).norm());
        }
    }
}

TEST_CASE("transformer decoder with identity gates equals the ungated decoder") {
    std::mt19937_64 rng(6);
    for (int rep = 0; rep < 100; ++rep) {
        qasa::nn::Rng prng(100 + rep);
        qasa::GatedTransformerDecoder dec(tcfg(6, 5, 3), prng);
        Var slots = ad::constant(random_matrix(4, 5, rng, -2, 2));
        auto gates = qasa::build_gates(Mask(4, 1), GateConfig{});
        auto a = dec.decode(slots, &gates);
        auto b = dec.decode(slots, nullptr);
        CHECK(max_abs(a.y_hat.value(), b.y_hat.value()) < 1e-6);
        CHECK(max_abs(a.decoder_attention, b.decoder_attention) < 1e-6);
    }
}

TEST_CASE("transformer decoder output is continuous in the gate floors") {
    std::mt19937_64 rng(7);
    qasa::nn::Rng prng(8);
    qasa::GatedTransformerDecoder dec(tcfg(6, 5, 3), prng);
    Var slots = ad::constant(random_matrix(4, 5, rng));
    Mask m{1, 0, 1, 1};
    GateConfig one;
    one.epsilon1 = 1.0 - 1e-15;
    one.epsilon2 = 1.0 - 1e-15;
    auto g1 = qasa::build_gates(m, one);
    CHECK(max_abs(dec.decode(slots, &g1).y_hat.value(), dec.decode(slots, nullptr).y_hat.value()) < 1e-9);

    GateConfig a, b;
    a.epsilon1 = 0.3;
    a.epsilon2 = 0.2;
    b.epsilon1 = 0.3 + 1e-7;
    b.epsilon2 = 0.2 + 1e-7;
    auto ga = qasa::build_gates(m, a), gb = qasa::build_gates(m, b);
    CHECK(max_abs(dec.decode(slots, &ga).y_hat.value(), dec.decode(slots, &gb).y_hat.value()) < 1e-5);
}

TEST_CASE("permuting slots together with the mask leaves the reconstruction unchanged") {
    std::mt19937_64 rng(9);
    qasa::nn::Rng prng(10);
    qasa::GatedTransformerDecoder tdec(tcfg(6, 5, 3), prng);
    qasa::GatedMlpDecoder mdec(mcfg(6, 5, 3), prng);
    for (int rep = 0; rep < 20; ++rep) {
        Matrix s = random_matrix(4, 5, rng);
        Mask m = random_mask(4, rng);
        std::vector<int> perm{2, 0, 3, 1};
        Matrix ps(4, 5);
        Mask pm(4);
        for (int i = 0; i < 4; ++i) {
            ps.row(i) = s.row(perm[i]);
            pm[i] = m[perm[i]];
        }
        auto ga = qasa::build_gates(m, GateConfig{}), gb = qasa::build_gates(pm, GateConfig{});
        CHECK(max_abs(tdec.decode(ad::constant(s), &ga).y_hat.value(),
                      tdec.decode(ad::constant(ps), &gb).y_hat.value()) < 1e-10);
        CHECK(max_abs(mdec.decode(ad::constant(s), &m, 1e4).first.y_hat.value(),
                      mdec.decode(ad::constant(ps), &pm, 1e4).first.y_hat.value()) < 1e-10);
    }
}

TEST_CASE("masked softmax cases") {
    Matrix l = Matrix::Ones(4, 1);
    Mask m{1, 1, 0, 0};
    Matrix a = qasa::masked_softmax(l, &m, 1e4);
    CHECK(a(0, 0) == doctest::Approx(0.5));
    CHECK(a(1, 0) == doctest::Approx(0.5));
    CHECK(a(2, 0) == 0.0);
    CHECK(a(3, 0) == 0.0);

    std::mt19937_64 rng(11);
    Matrix r = random_matrix(5, 7, rng, -10, 10);
    Mask ones(5, 1);
    Matrix plain = qasa::masked_softmax(r, nullptr, 1e4);
    CHECK(max_abs(qasa::masked_softmax(r, &ones, 1e4), plain) == 0.0);
    for (int t = 0; t < 7; ++t) {
        double z = 0.0;
        for (int i = 0; i < 5; ++i) z += std::exp(r(i, t));
        for (int i = 0; i < 5; ++i) CHECK(plain(i, t) == doctest::Approx(std::exp(r(i, t)) / z).epsilon(1e-12));
    }
}

TEST_CASE("-C fill matches explicit renormalization over the active set") {
    std::mt19937_64 rng(12);
    double worst = 0.0;
    for (int rep = 0; rep < 1000; ++rep) {
        const int k = 2 + rep % 7;
        Matrix l = random_matrix(k, 9, rng, -10, 10);
        Mask m = random_mask(k, rng);
        Matrix a = qasa::masked_softmax(l, &m, 1e4);
        for (int t = 0; t < 9; ++t) {
            double z = 0.0;
            for (int i = 0; i < k; ++i) z += m[i] ? std::exp(l(i, t)) : 0.0;
            for (int i = 0; i < k; ++i) worst = std::max(worst, std::abs(a(i, t) - (m[i] ? std::exp(l(i, t)) / z : 0.0)));
        }
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("MLP decoder mixture weights normalize with exact zeros") {
    std::mt19937_64 rng(13);
    qasa::nn::Rng prng(14);
    qasa::GatedMlpDecoder dec(mcfg(6, 5, 3), prng);
    for (int rep = 0; rep < 100; ++rep) {
        Mask m = random_mask(4, rng);
        auto [rec, w] = dec.decode(ad::constant(random_matrix(4, 5, rng, -2, 2)), &m, 1e4);
        for (int t = 0; t < 6; ++t) CHECK(std::abs(w.alpha.col(t).sum() - 1.0) < 1e-6);
        for (int i = 0; i < 4; ++i) {
            if (!m[i]) CHECK(w.alpha.row(i).cwiseAbs().maxCoeff() == 0.0);
        }
        CHECK(rec.y_hat.rows() == 6);
        CHECK(rec.y_hat.cols() == 3);
    }
    Mask none(4, 0);
    CHECK_THROWS_AS(dec.decode(ad::constant(random_matrix(4, 5, rng)), &none, 1e4), std::invalid_argument);
}

TEST_CASE("MLP decoder with identity mask equals the ungated decoder") {
    std::mt19937_64 rng(15);
    for (int rep = 0; rep < 100; ++rep) {
        qasa::nn::Rng prng(200 + rep);
        qasa::GatedMlpDecoder dec(mcfg(6, 5, 3), prng);
        Var s = ad::constant(random_matrix(4, 5, rng, -2, 2));
        Mask ones(4, 1);
        CHECK(max_abs(dec.decode(s, &ones, 1e4).first.y_hat.value(), dec.decode(s, nullptr, 1e4).first.y_hat.value()) <
              1e-6);
    }
}

TEST_CASE("gradients reach active slots and vanish for inactive ones in the mixture") {
    std::mt19937_64 rng(16);
    qasa::nn::Rng prng(17);
    qasa::GatedMlpDecoder dec(mcfg(6, 5, 3), prng);
    Var s = ad::parameter(random_matrix(4, 5, rng));
    Mask m{1, 0, 1, 0};
    ad::backward(ad::sum(ad::mul(dec.decode(s, &m, 1e4).first.y_hat, ad::constant(random_matrix(6, 3, rng)))));
    for (int i = 0; i < 4; ++i) {
        const double g = s.grad().row(i).cwiseAbs().maxCoeff();
        if (m[i]) CHECK(g > 1e-8);
        else CHECK(g == 0.0);
    }
}

TEST_CASE("decoder gradient checks on 4 tokens") {
    std::mt19937_64 rng(18);
    qasa::nn::Rng prng(19);
    Var s = ad::parameter(random_matrix(3, 5, rng));
    Var w = ad::constant(random_matrix(4, 3, rng));
    Mask m{1, 0, 1};

    qasa::GatedTransformerDecoder tdec(tcfg(4, 5, 3), prng);
    auto tg = qasa::build_gates(m, GateConfig{});
    auto tloss = [&] { return ad::sum(ad::mul(w, tdec.decode(s, &tg).y_hat)); };
    qasa::nn::ParamList tp;
    tdec.collect(tp, "t");
    std::vector<Var> leaves{s};
    for (auto& p : tp) leaves.push_back(p.var);
    CHECK(gradcheck(tloss, leaves) < 1e-4);

    qasa::GatedMlpDecoder mdec(mcfg(4, 5, 3), prng);
    auto mloss = [&] { return ad::sum(ad::mul(w, mdec.decode(s, &m, 1e4).first.y_hat)); };
    qasa::nn::ParamList mp;
    mdec.collect(mp, "m");
    std::vector<Var> mleaves{s};
    for (auto& p : mp) mleaves.push_back(p.var);
    CHECK(gradcheck(mloss, mleaves) < 1e-4);
}
