#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "indexnet/dense.hpp"
#include "indexnet/gradcheck.hpp"
#include "indexnet/rnn_network.hpp"
#include "oracles.hpp"

using namespace indexnet;

namespace {

RecurrentArch small_arch(std::size_t in, std::vector<std::size_t> hidden, std::size_t out,
                         std::size_t T, bool bn) {
    RecurrentArch a;
    a.input_width = in;
    a.hidden = std::move(hidden);
    a.output_width = out;
    a.time_steps = T;
    a.batchnorm = bn;
    return a;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Relative error with a 1e-4 magnitude floor: central differences on O(1)
// losses resolve gradients only to ~1e-9 absolute, so near-zero entries are
// compared absolutely at that scale instead of relatively.
double rel_err_floored(double a, double n) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-4});
}

}  // namespace

TEST_CASE("rnn forward basics") {
    Rng rng(3);
    SECTION("zero weights give zero hidden activations") {
        RnnParams p(small_arch(2, {3, 3}, 2, 3, false), 7);
        for (auto& t : p.theta_spatial) t.fill(0.0);
        for (auto& t : p.theta_temporal) t.fill(0.0);
        Tensor x = oracle::random_tensor({2, 2, 3}, rng);
        RnnCache c = rnn_forward(p, x, true, LossKind::MSE);
        for (std::size_t l = 0; l < 2; ++l)
            for (std::size_t tau = 0; tau < 3; ++tau)
                REQUIRE(sum(c.h[l][tau]) == 0.0);
    }
    SECTION("single-unit scalar recursion matches a hand-iterated oracle") {
        RnnParams p(small_arch(1, {1}, 1, 4, false), 11);
        const double ws = 0.7, wt = -0.4, wo = 1.3;
        p.theta_spatial[0](0, 0) = ws;
        p.theta_temporal[0](0, 0) = wt;
        p.theta_out(0, 0) = wo;
        Tensor x({1, 1, 4}, {0.5, -0.2, 0.9, 0.1});
        RnnCache c = rnn_forward(p, x, true, LossKind::MSE);
        double h = 0.0;
        for (std::size_t tau = 0; tau < 4; ++tau) {
            h = std::tanh(ws * x(0, 0, tau) + (tau > 0 ? wt * h : 0.0));
            REQUIRE(c.h[0][tau](0, 0) == Catch::Approx(h).margin(1e-15));
            REQUIRE(c.outputs[tau](0, 0) == Catch::Approx(wo * h).margin(1e-15));
        }
    }
}

TEST_CASE("rnn with T=1 equals the feedforward network on identical weights") {
    Rng rng(5);
    const std::size_t T_mb = 4;
    RnnNetwork rnn(small_arch(3, {4, 4}, 2, 1, false), LossKind::MSE, 13);
    FnnNetwork fnn(3,
                   {{4, Activation::tanh(), false, 0.0}, {4, Activation::tanh(), false, 0.0}},
                   2, LossKind::MSE, 17);
    // copy the recurrent spatial weights into the feedforward stack
    for (std::size_t l = 0; l < 2; ++l) fnn.layer(l).theta = rnn.rnn_params().theta_spatial[l];
    fnn.layer(2).theta = rnn.rnn_params().theta_out;

    Tensor x2 = oracle::random_tensor({T_mb, 3}, rng);
    Tensor x3({T_mb, 3, 1});
    for (std::size_t t = 0; t < T_mb; ++t)
        for (std::size_t f = 0; f < 3; ++f) x3(t, f, 0) = x2(t, f);
    Tensor y2 = oracle::random_tensor({T_mb, 2}, rng);
    Tensor y3({T_mb, 2, 1});
    for (std::size_t t = 0; t < T_mb; ++t)
        for (std::size_t f = 0; f < 2; ++f) y3(t, f, 0) = y2(t, f);

    const double j_rnn = rnn.loss_on(x3, y3, true);
    const double j_fnn = fnn.loss_on(x2, y2, true);
    REQUIRE(j_rnn == Catch::Approx(j_fnn).margin(1e-14));

    rnn.backward();
    fnn.backward();
    auto pr = rnn.params();
    auto pf = fnn.params();
    // rnn: l0.theta_s, l0.theta_t, l1.theta_s, l1.theta_t, out.theta
    // fnn: theta0, theta1, theta2
    REQUIRE(oracle::max_abs_diff(*pr[0].grad, *pf[0].grad) <= 1e-12);
    REQUIRE(oracle::max_abs_diff(*pr[2].grad, *pf[1].grad) <= 1e-12);
    REQUIRE(oracle::max_abs_diff(*pr[4].grad, *pf[2].grad) <= 1e-12);
    REQUIRE(sum(*pr[1].grad) == 0.0);  // temporal sums are empty at T=1
    REQUIRE(sum(*pr[3].grad) == 0.0);
}

TEST_CASE("rnn deltas match finite differences of per-cell pre-activations") {
    Rng rng(7);
    for (bool bn : {false, true}) {
        RecurrentArch arch = small_arch(2, {3, 2}, 2, 3, bn);
        RnnParams params(arch, 19);
        const std::size_t T_mb = 3, L = 2, T = 3;
        Tensor x = oracle::random_tensor({T_mb, 2, T}, rng);
        Tensor targets = oracle::random_tensor({T_mb, 2, T}, rng);

        RnnCache cache = rnn_forward(params, x, true, LossKind::MSE);
        RnnBackward bwd = rnn_backward(params, cache, targets, LossKind::MSE);

        SECTION(bn ? "with batchnorm" : "without batchnorm") {
            CellGrid offsets = make_grid(L, T);
            for (std::size_t l = 0; l < L; ++l)
                for (std::size_t tau = 0; tau < T; ++tau)
                    offsets[l][tau] = Tensor({T_mb, arch.width(l)});
            auto loss_at = [&]() {
                RnnCache c = rnn_forward(params, x, true, LossKind::MSE, &offsets);
                return recurrent_loss(LossKind::MSE, c.outputs, targets, T_mb);
            };
            const double eps = 1e-5;
            for (std::size_t l = 0; l < L; ++l)
                for (std::size_t tau = 0; tau < T; ++tau) {
                    // pre-activation delta = tanh'(pre) * D = (1 - h^2) * D
                    Tensor expected = bwd.delta[l][tau];
                    const Tensor& h = cache.h[l][tau];
                    for (std::size_t i = 0; i < expected.size(); ++i)
                        expected[i] *= 1.0 - h[i] * h[i];
                    for (std::size_t i = 0; i < expected.size(); ++i) {
                        offsets[l][tau][i] = eps;
                        const double jp = loss_at();
                        offsets[l][tau][i] = -eps;
                        const double jm = loss_at();
                        offsets[l][tau][i] = 0.0;
                        const double fd = (jp - jm) / (2.0 * eps);
                        REQUIRE(rel_err_floored(expected[i], fd) < 1e-5);
                    }
                }
        }
    }
}

TEST_CASE("rnn zero-residual batch gives zero deltas and gradients") {
    Rng rng(23);
    RnnParams params(small_arch(2, {3}, 2, 2, false), 29);
    Tensor x = oracle::random_tensor({2, 2, 2}, rng);
    RnnCache cache = rnn_forward(params, x, true, LossKind::MSE);
    // build targets equal to the outputs
    Tensor targets({2, 2, 2});
    for (std::size_t tau = 0; tau < 2; ++tau)
        for (std::size_t t = 0; t < 2; ++t)
            for (std::size_t f = 0; f < 2; ++f) targets(t, f, tau) = cache.outputs[tau](t, f);
    RnnBackward bwd = rnn_backward(params, cache, targets, LossKind::MSE);
    for (std::size_t tau = 0; tau < 2; ++tau) REQUIRE(sum(bwd.delta[0][tau]) == 0.0);
    RnnGrads g = rnn_grads(params, cache, bwd);
    REQUIRE(sum(g.theta_spatial[0]) == 0.0);
    REQUIRE(sum(g.theta_out) == 0.0);
}

TEST_CASE("rnn full gradient check through the model interface") {
    Rng rng(31);
    for (bool bn : {false, true}) {
        RnnNetwork net(small_arch(2, {4, 3}, 2, 4, bn), LossKind::MSE, 37);
        Tensor x = oracle::random_tensor({3, 2, 4}, rng);
        Tensor y = oracle::random_tensor({3, 2, 4}, rng);
        auto report = check(net, x, y);
        INFO((bn ? "bn " : "plain ") << report.summary());
        REQUIRE(report.pass);
    }
}

TEST_CASE("lstm forward basics") {
    Rng rng(41);
    SECTION("zero weights: gates 0.5, candidate 0, cell chain 0") {
        LstmParams p(small_arch(2, {3}, 2, 3, false), 43);
        for (auto* v : {&p.wi_s, &p.wi_t, &p.wf_s, &p.wf_t, &p.wo_s, &p.wo_t, &p.wg_s, &p.wg_t})
            for (auto& t : *v) t.fill(0.0);
        Tensor x = oracle::random_tensor({2, 2, 3}, rng);
        LstmCache c = lstm_forward(p, x, true, LossKind::MSE);
        for (std::size_t tau = 0; tau < 3; ++tau)
            for (std::size_t i = 0; i < c.gi[0][tau].size(); ++i) {
                REQUIRE(c.gi[0][tau][i] == 0.5);
                REQUIRE(c.gf[0][tau][i] == 0.5);
                REQUIRE(c.go[0][tau][i] == 0.5);
                REQUIRE(c.gg[0][tau][i] == 0.0);
                REQUIRE(c.c[0][tau][i] == 0.0);
                REQUIRE(c.h[0][tau][i] == 0.0);
            }
    }
    SECTION("forcing the forget gate shut makes the cell memoryless") {
        LstmParams p(small_arch(2, {3}, 2, 3, false), 47);
        p.wf_s[0].fill(-50.0);  // sigmoid of a large negative sum
        p.wf_t[0].fill(0.0);
        Tensor x = oracle::random_tensor({2, 2, 3}, rng, 0.5, 1.0);  // positive inputs
        LstmCache c = lstm_forward(p, x, true, LossKind::MSE);
        for (std::size_t tau = 0; tau < 3; ++tau)
            for (std::size_t i = 0; i < c.c[0][tau].size(); ++i)
                REQUIRE(c.c[0][tau][i] ==
                        Catch::Approx(c.gi[0][tau][i] * c.gg[0][tau][i]).margin(1e-9));
    }
    SECTION("single-unit scalar recursion over three steps") {
        LstmParams p(small_arch(1, {1}, 1, 3, false), 53);
        const double wi = 0.5, wif = -0.3, wf = 0.8, wft = 0.2, wo = 1.1, wot = -0.6,
                     wg = 0.9, wgt = 0.4, whead = 1.5;
        p.wi_s[0](0, 0) = wi;
        p.wi_t[0](0, 0) = wif;
        p.wf_s[0](0, 0) = wf;
        p.wf_t[0](0, 0) = wft;
        p.wo_s[0](0, 0) = wo;
        p.wo_t[0](0, 0) = wot;
        p.wg_s[0](0, 0) = wg;
        p.wg_t[0](0, 0) = wgt;
        p.theta_out(0, 0) = whead;
        Tensor x({1, 1, 3}, {0.7, -0.5, 0.3});
        LstmCache cache = lstm_forward(p, x, true, LossKind::MSE);
        double h = 0.0, c = 0.0;
        for (std::size_t tau = 0; tau < 3; ++tau) {
            const double xv = x(0, 0, tau);
            const double i_g = sigmoid(wi * xv + (tau ? wif * h : 0.0));
            const double f_g = sigmoid(wf * xv + (tau ? wft * h : 0.0));
            const double o_g = sigmoid(wo * xv + (tau ? wot * h : 0.0));
            const double g_g = std::tanh(wg * xv + (tau ? wgt * h : 0.0));
            c = f_g * (tau ? c : 0.0) + i_g * g_g;
            h = o_g * std::tanh(c);
            REQUIRE(cache.h[0][tau](0, 0) == Catch::Approx(h).margin(1e-15));
            REQUIRE(cache.outputs[tau](0, 0) == Catch::Approx(whead * h).margin(1e-15));
        }
    }
    SECTION("gate ranges hold on random nets") {
        LstmParams p(small_arch(3, {4, 4}, 2, 4, false), 59);
        Tensor x = oracle::random_tensor({3, 3, 4}, rng);
        LstmCache c = lstm_forward(p, x, true, LossKind::MSE);
        for (std::size_t l = 0; l < 2; ++l)
            for (std::size_t tau = 0; tau < 4; ++tau)
                for (std::size_t i = 0; i < c.gi[l][tau].size(); ++i) {
                    REQUIRE((c.gi[l][tau][i] > 0.0 && c.gi[l][tau][i] < 1.0));
                    REQUIRE((c.gf[l][tau][i] > 0.0 && c.gf[l][tau][i] < 1.0));
                    REQUIRE((c.go[l][tau][i] > 0.0 && c.go[l][tau][i] < 1.0));
                    REQUIRE((c.gg[l][tau][i] > -1.0 && c.gg[l][tau][i] < 1.0));
                }
    }
}

TEST_CASE("lstm backward modes") {
    Rng rng(61);

    SECTION("zero residual gives zero deltas in both modes") {
        LstmParams p(small_arch(2, {3}, 2, 2, false), 67);
        Tensor x = oracle::random_tensor({2, 2, 2}, rng);
        LstmCache cache = lstm_forward(p, x, true, LossKind::MSE);
        Tensor targets({2, 2, 2});
        for (std::size_t tau = 0; tau < 2; ++tau)
            for (std::size_t t = 0; t < 2; ++t)
                for (std::size_t f = 0; f < 2; ++f)
                    targets(t, f, tau) = cache.outputs[tau](t, f);
        for (auto mode : {LstmBackwardMode::PaperFaithful, LstmBackwardMode::FullGradient}) {
            auto bwd = lstm_backward(p, cache, targets, LossKind::MSE, mode);
            for (std::size_t tau = 0; tau < 2; ++tau) REQUIRE(sum(bwd.delta[0][tau]) == 0.0);
        }
    }

    SECTION("modes agree exactly at T=1") {
        LstmParams p(small_arch(2, {4}, 2, 1, false), 71);
        Tensor x = oracle::random_tensor({3, 2, 1}, rng);
        Tensor y = oracle::random_tensor({3, 2, 1}, rng);
        LstmCache cache = lstm_forward(p, x, true, LossKind::MSE);
        auto b1 = lstm_backward(p, cache, y, LossKind::MSE, LstmBackwardMode::PaperFaithful);
        auto b2 = lstm_backward(p, cache, y, LossKind::MSE, LstmBackwardMode::FullGradient);
        REQUIRE(oracle::max_abs_diff(b1.delta[0][0], b2.delta[0][0]) == 0.0);
        auto g1 = lstm_grads(p, cache, b1);
        auto g2 = lstm_grads(p, cache, b2);
        REQUIRE(oracle::max_abs_diff(g1.wi_s[0], g2.wi_s[0]) == 0.0);
        REQUIRE(oracle::max_abs_diff(g1.wf_s[0], g2.wf_s[0]) == 0.0);
    }

    SECTION("FullGradient deltas equal finite differences of dJ/dh at T=3") {
        for (bool bn : {false, true}) {
            RecurrentArch arch = small_arch(2, {3}, 2, 3, bn);
            LstmParams params(arch, 73);
            const std::size_t T_mb = 3, L = 1, T = 3;
            Tensor x = oracle::random_tensor({T_mb, 2, T}, rng);
            Tensor targets = oracle::random_tensor({T_mb, 2, T}, rng);
            LstmCache cache = lstm_forward(params, x, true, LossKind::MSE);
            auto full = lstm_backward(params, cache, targets, LossKind::MSE,
                                      LstmBackwardMode::FullGradient);
            auto paper = lstm_backward(params, cache, targets, LossKind::MSE,
                                       LstmBackwardMode::PaperFaithful);

            CellGrid offsets = make_grid(L, T);
            for (std::size_t tau = 0; tau < T; ++tau)
                offsets[0][tau] = Tensor({T_mb, arch.width(0)});
            auto loss_at = [&]() {
                LstmCache c = lstm_forward(params, x, true, LossKind::MSE, &offsets);
                return recurrent_loss(LossKind::MSE, c.outputs, targets, T_mb);
            };
            const double eps = 1e-5;
            double paper_dev = 0.0;
            for (std::size_t tau = 0; tau < T; ++tau)
                for (std::size_t i = 0; i < full.delta[0][tau].size(); ++i) {
                    offsets[0][tau][i] = eps;
                    const double jp = loss_at();
                    offsets[0][tau][i] = -eps;
                    const double jm = loss_at();
                    offsets[0][tau][i] = 0.0;
                    const double fd = (jp - jm) / (2.0 * eps);
                    REQUIRE(rel_err_floored(full.delta[0][tau][i], fd) < 1e-5);
                    paper_dev = std::max(paper_dev,
                                         oracle::rel_err(paper.delta[0][tau][i], fd));
                }
            INFO("paper-faithful max deviation from finite differences: " << paper_dev);
            REQUIRE(paper_dev > 1e-6);  // documents the truncated cell-state chain
        }
    }
}

TEST_CASE("lstm full gradient check through the model interface") {
    Rng rng(79);
    for (bool bn : {false, true}) {
        LstmNetwork net(small_arch(2, {4}, 2, 3, bn), LossKind::MSE, 83,
                        LstmBackwardMode::FullGradient);
        Tensor x = oracle::random_tensor({3, 2, 3}, rng);
        Tensor y = oracle::random_tensor({3, 2, 3}, rng);
        auto report = check(net, x, y);
        INFO((bn ? "bn " : "plain ") << report.summary());
        REQUIRE(report.pass);
    }
    SECTION("classification head") {
        LstmNetwork net(small_arch(2, {4}, 3, 2, false), LossKind::CrossEntropy, 89);
        Tensor x = oracle::random_tensor({3, 2, 2}, rng);
        Tensor y({3, 2}, {0.0, 2.0, 1.0, 1.0, 0.0, 2.0});
        auto report = check(net, x, y);
        INFO(report.summary());
        REQUIRE(report.pass);
    }
}

TEST_CASE("generation mode feeds outputs back as inputs") {
    Rng rng(97);
    RnnNetwork net(small_arch(1, {4}, 1, 5, false), LossKind::MSE, 101);
    Tensor seed({2, 1, 5});
    seed(0, 0, 0) = 0.3;
    seed(1, 0, 0) = -0.2;
    Tensor out = net.generate(seed);
    REQUIRE(out.shape() == std::vector<std::size_t>{2, 1, 5});
    for (std::size_t i = 0; i < out.size(); ++i) REQUIRE(std::isfinite(out[i]));
}
