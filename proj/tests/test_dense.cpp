#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "indexnet/dense.hpp"
#include "indexnet/gradcheck.hpp"
#include "oracles.hpp"

using namespace indexnet;

TEST_CASE("fc_forward basics") {
    SECTION("identity weights with ReLU pass positive input through") {
        DenseLayer l;
        l.theta = Tensor::identity(3);
        l.activation = Activation::relu();
        Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
        Tensor y = fc_forward(l, x, true);
        REQUIRE(oracle::max_abs_diff(y, x) == 0.0);
    }
    SECTION("zero input through tanh gives zero output") {
        DenseLayer l(4, 3, Activation::tanh(), false, 1);
        Tensor x({2, 4});
        Tensor y = fc_forward(l, x, true);
        for (std::size_t i = 0; i < y.size(); ++i) REQUIRE(y[i] == 0.0);
    }
    SECTION("2x2 hand case") {
        DenseLayer l;
        l.theta = Tensor({2, 2}, {1, 1, 0, 1});
        l.activation = Activation::relu();
        Tensor x({1, 2}, {1, 2});
        Tensor y = fc_forward(l, x, true);
        REQUIRE(l.a(0, 0) == 3.0);
        REQUIRE(l.a(0, 1) == 2.0);
        REQUIRE(y(0, 0) == 3.0);
        REQUIRE(y(0, 1) == 2.0);
    }
    SECTION("width mismatch raises a dimension error") {
        DenseLayer l(4, 3, Activation::tanh(), false, 1);
        Tensor x({2, 5});
        REQUIRE_THROWS_AS(fc_forward(l, x, true), DimensionError);
    }
}

TEST_CASE("output_delta") {
    SECTION("MSE of a perfect prediction is zero") {
        Tensor h({2, 2}, {1, 2, 3, 4});
        Tensor d = output_delta(LossKind::MSE, h, h, 2);
        for (std::size_t i = 0; i < d.size(); ++i) REQUIRE(d[i] == 0.0);
    }
    SECTION("softmax output [0.5,0.5], true class 0") {
        Tensor h({1, 2}, {0.5, 0.5});
        Tensor y({1}, {0.0});
        Tensor d = output_delta(LossKind::CrossEntropy, h, y, 1);
        REQUIRE(d(0, 0) == Catch::Approx(-0.5));
        REQUIRE(d(0, 1) == Catch::Approx(0.5));
    }
    SECTION("xent delta equals finite differences through softmax") {
        Rng rng(7);
        const std::size_t T_mb = 3, F = 4;
        Tensor a = oracle::random_tensor({T_mb, F}, rng);
        Tensor cls({T_mb}, {0.0, 2.0, 3.0});
        Tensor d = output_delta(LossKind::CrossEntropy, softmax_lastaxis(a), cls, T_mb);
        const double eps = 1e-6;
        for (std::size_t i = 0; i < a.size(); ++i) {
            Tensor ap = a, am = a;
            ap[i] += eps;
            am[i] -= eps;
            const double jp = loss(LossKind::CrossEntropy, softmax_lastaxis(ap), cls, T_mb);
            const double jm = loss(LossKind::CrossEntropy, softmax_lastaxis(am), cls, T_mb);
            REQUIRE(oracle::rel_err(d[i], (jp - jm) / (2.0 * eps)) < 1e-6);
        }
    }
}

TEST_CASE("hidden_delta") {
    SECTION("zero upstream gives zero") {
        DenseLayer above(3, 2, Activation::tanh(), false, 3);
        Tensor zero({4, 2});
        Tensor a({4, 3});
        Tensor d = hidden_delta(above, zero, nullptr, a, Activation::tanh());
        for (std::size_t i = 0; i < d.size(); ++i) REQUIRE(d[i] == 0.0);
    }
    SECTION("no-BN case reduces to g'(a) * Theta^T delta, hand 2x2") {
        DenseLayer above;
        above.theta = Tensor({2, 2}, {1, 2, 3, 4});
        Tensor delta({1, 2}, {0.5, -1.0});
        Tensor a({1, 2}, {10.0, -10.0});  // tanh'(10) ~ 0, keep exact form
        Tensor d = hidden_delta(above, delta, nullptr, a, Activation::relu());
        // relu'(10)=1, relu'(-10)=0; Theta^T delta = [0.5*1 + (-1)*3, 0.5*2 + (-1)*4]
        REQUIRE(d(0, 0) == Catch::Approx(0.5 - 3.0));
        REQUIRE(d(0, 1) == 0.0);
    }
    SECTION("deltas match dJ/da by central differences through a BN stack") {
        Rng rng(17);
        const std::size_t T_mb = 3;
        Tensor x = oracle::random_tensor({T_mb, 2}, rng);
        Tensor targets = oracle::random_tensor({T_mb, 2}, rng);
        Tensor theta0 = init_weights(2, 3, 5);
        Tensor theta1 = init_weights(3, 2, 6);
        BatchNormState bn(3);
        bn.gamma()(0) = 1.3;
        bn.beta()(1) = -0.4;

        auto forward_loss = [&](const Tensor& offset) {
            Tensor a0 = weight_average(theta0, x) + offset;
            Tensor h0 = activate(Activation::tanh(), a0);
            Tensor y0 = bn.forward_train(h0);
            Tensor out = weight_average(theta1, y0);
            return loss(LossKind::MSE, out, targets, T_mb);
        };

        // analytic deltas at offset = 0
        Tensor zero({T_mb, 3});
        Tensor a0 = weight_average(theta0, x);
        Tensor h0 = activate(Activation::tanh(), a0);
        Tensor y0 = bn.forward_train(h0);
        Tensor out = weight_average(theta1, y0);
        Tensor d1 = output_delta(LossKind::MSE, out, targets, T_mb);
        DenseLayer above;
        above.theta = theta1;
        Tensor d0 = hidden_delta(above, d1, &bn, a0, Activation::tanh());

        const double eps = 1e-5;
        for (std::size_t i = 0; i < zero.size(); ++i) {
            Tensor op = zero, om = zero;
            op[i] += eps;
            om[i] -= eps;
            const double fd = (forward_loss(op) - forward_loss(om)) / (2.0 * eps);
            REQUIRE(oracle::rel_err(d0[i], fd) < 1e-5);
        }
    }
    SECTION("with BN off and batch 1 the recursion matches a scalar textbook oracle") {
        // independent scalar implementation of the classic two-layer backprop
        const std::vector<std::vector<double>> w0 = {{0.3, -0.2}, {0.5, 0.1}, {-0.4, 0.7}};
        const std::vector<std::vector<double>> w1 = {{0.2, -0.6, 0.4}};
        const std::vector<double> xin = {0.9, -1.1};
        const std::vector<double> tgt = {0.25};

        std::vector<double> a0(3), h0(3);
        for (int f = 0; f < 3; ++f) {
            a0[f] = w0[f][0] * xin[0] + w0[f][1] * xin[1];
            h0[f] = std::tanh(a0[f]);
        }
        double a1 = 0.0;
        for (int f = 0; f < 3; ++f) a1 += w1[0][f] * h0[f];
        const double d_out = a1 - tgt[0];  // T_mb = 1
        std::vector<double> d_hidden(3);
        for (int f = 0; f < 3; ++f)
            d_hidden[f] = (1.0 - std::tanh(a0[f]) * std::tanh(a0[f])) * w1[0][f] * d_out;

        Tensor theta0({3, 2}, {0.3, -0.2, 0.5, 0.1, -0.4, 0.7});
        Tensor theta1({1, 3}, {0.2, -0.6, 0.4});
        Tensor x({1, 2}, {0.9, -1.1});
        Tensor y({1, 1}, {0.25});
        Tensor a0t = weight_average(theta0, x);
        Tensor out = weight_average(theta1, activate(Activation::tanh(), a0t));
        Tensor d1 = output_delta(LossKind::MSE, out, y, 1);
        DenseLayer above;
        above.theta = theta1;
        Tensor d0 = hidden_delta(above, d1, nullptr, a0t, Activation::tanh());
        REQUIRE(d1(0, 0) == Catch::Approx(d_out).margin(1e-14));
        for (int f = 0; f < 3; ++f) REQUIRE(d0(0, f) == Catch::Approx(d_hidden[f]).margin(1e-14));
    }
}

TEST_CASE("weight_grad") {
    SECTION("zero deltas give zero gradient") {
        Tensor d({3, 2}), y({3, 4});
        Tensor g = weight_grad(d, y);
        for (std::size_t i = 0; i < g.size(); ++i) REQUIRE(g[i] == 0.0);
    }
    SECTION("single sample outer product") {
        Tensor d({1, 2}, {1, 2});
        Tensor y({1, 2}, {3, 4});
        Tensor g = weight_grad(d, y);
        REQUIRE(g(0, 0) == 3.0);
        REQUIRE(g(0, 1) == 4.0);
        REQUIRE(g(1, 0) == 6.0);
        REQUIRE(g(1, 1) == 8.0);
    }
}

TEST_CASE("coeff_grads") {
    SECTION("zero deltas give zero coefficients") {
        Tensor theta({2, 3}), d({4, 2}), ht({4, 3});
        auto [dg, db] = coeff_grads(theta, d, ht);
        for (std::size_t i = 0; i < dg.size(); ++i) {
            REQUIRE(dg[i] == 0.0);
            REQUIRE(db[i] == 0.0);
        }
    }
    SECTION("zero normalized cache kills the gamma gradient only") {
        Rng rng(3);
        Tensor theta = oracle::random_tensor({2, 3}, rng);
        Tensor d = oracle::random_tensor({4, 2}, rng);
        Tensor ht({4, 3});
        auto [dg, db] = coeff_grads(theta, d, ht);
        double db_norm = 0.0;
        for (std::size_t i = 0; i < dg.size(); ++i) {
            REQUIRE(dg[i] == 0.0);
            db_norm += std::abs(db[i]);
        }
        REQUIRE(db_norm > 0.0);
    }
}

TEST_CASE("dropout") {
    Rng rng(11);
    SECTION("p=0 is the identity with an all-ones mask") {
        Tensor h = oracle::random_tensor({3, 4}, rng);
        auto [out, mask] = dropout_apply(h, 0.0, true, rng);
        REQUIRE(oracle::max_abs_diff(out, h) == 0.0);
        for (std::size_t i = 0; i < mask.mask.size(); ++i) REQUIRE(mask.mask[i] == 1.0);
    }
    SECTION("eval mode is the identity bitwise regardless of p") {
        Tensor h = oracle::random_tensor({3, 4}, rng);
        auto [out, mask] = dropout_apply(h, 0.7, false, rng);
        for (std::size_t i = 0; i < h.size(); ++i) REQUIRE(out[i] == h[i]);
    }
    SECTION("empirical drop rate at p=0.5 over 1e5 units") {
        Tensor h = Tensor::full({100, 1000}, 1.0);
        auto [out, mask] = dropout_apply(h, 0.5, true, rng);
        double dropped = 0.0;
        for (std::size_t i = 0; i < mask.mask.size(); ++i) dropped += 1.0 - mask.mask[i];
        REQUIRE(dropped / 100000.0 == Catch::Approx(0.5).margin(0.01));
        // surviving units are scaled by 1/(1-p)
        for (std::size_t i = 0; i < out.size(); ++i)
            REQUIRE((out[i] == 0.0 || out[i] == 2.0));
    }
    SECTION("masks are 0/1") {
        Tensor h = oracle::random_tensor({10, 10}, rng);
        auto [out, mask] = dropout_apply(h, 0.3, true, rng);
        for (std::size_t i = 0; i < mask.mask.size(); ++i)
            REQUIRE((mask.mask[i] == 0.0 || mask.mask[i] == 1.0));
    }
}

TEST_CASE("resnet blocks") {
    Rng rng(13);
    const std::size_t W = 3, T_mb = 4, Fb = 2;  // block bottleneck width Fb

    auto make_block = [&](ResnetForm form, bool zero_weights) {
        ResnetBlockFnn b = make_resnet_block_fnn(form, W, Fb, Activation::tanh(), true, 20);
        if (zero_weights) {
            b.first.theta.fill(0.0);
            b.second.theta.fill(0.0);
        }
        return b;
    };

    SECTION("non-standard zero-weight block: output equals input + BN(g(0))") {
        ResnetBlockFnn b = make_block(ResnetForm::NonStandard, true);
        Tensor x = oracle::random_tensor({T_mb, W}, rng);
        Tensor out = resnet_skip_forward(b, x, true);
        // forward oracle built from the primitive ops
        Tensor y1 = b.first.bn->forward_train(activate(Activation::tanh(),
                                                       Tensor({T_mb, Fb})));
        Tensor y2 = b.second.bn->forward_train(activate(Activation::tanh(),
                                                        Tensor({T_mb, W})));
        Tensor expect = y2 + x;
        REQUIRE(oracle::max_abs_diff(out, expect) < 1e-12);
    }

    SECTION("standard zero-weight block is the additive identity") {
        ResnetBlockFnn b = make_block(ResnetForm::Standard, true);
        Tensor x = oracle::random_tensor({T_mb, W}, rng);
        Tensor out = resnet_skip_forward(b, x, true);
        REQUIRE(oracle::max_abs_diff(out, x) == 0.0);
    }

    SECTION("zero upstream deltas give zero everywhere") {
        ResnetBlockFnn b = make_block(ResnetForm::NonStandard, false);
        Tensor x = oracle::random_tensor({T_mb, W}, rng);
        resnet_skip_forward(b, x, true);
        auto g = resnet_skip_delta(b, Tensor({T_mb, W}));
        REQUIRE(sum(g.dtheta_first) == 0.0);
        REQUIRE(sum(g.dtheta_second) == 0.0);
        REQUIRE(sum(g.dinput) == 0.0);
    }

    SECTION("standard mode with zero in-block weights passes deltas straight through") {
        ResnetBlockFnn b = make_block(ResnetForm::Standard, true);
        Tensor x = oracle::random_tensor({T_mb, W}, rng);
        resnet_skip_forward(b, x, true);
        Tensor dout = oracle::random_tensor({T_mb, W}, rng);
        auto g = resnet_skip_delta(b, dout);
        REQUIRE(oracle::max_abs_diff(g.dinput, dout) == 0.0);
    }

    SECTION("block gradients match finite differences") {
        for (ResnetForm form : {ResnetForm::NonStandard, ResnetForm::Standard}) {
            ResnetBlockFnn b = make_block(form, false);
            Tensor x = oracle::random_tensor({T_mb, W}, rng);
            Tensor target = oracle::random_tensor({T_mb, W}, rng);

            auto loss_of = [&](ResnetBlockFnn& blk) {
                Tensor out = resnet_skip_forward(blk, x, true);
                return loss(LossKind::MSE, out, target, T_mb);
            };

            loss_of(b);
            Tensor out = resnet_skip_forward(b, x, true);
            Tensor dout = output_delta(LossKind::MSE, out, target, T_mb);
            auto g = resnet_skip_delta(b, dout);

            const double eps = 1e-5;
            auto fd_param = [&](Tensor& param, const Tensor& analytic) {
                for (std::size_t i = 0; i < param.size(); ++i) {
                    const double saved = param[i];
                    param[i] = saved + eps;
                    const double jp = loss_of(b);
                    param[i] = saved - eps;
                    const double jm = loss_of(b);
                    param[i] = saved;
                    REQUIRE(oracle::rel_err(analytic[i], (jp - jm) / (2.0 * eps)) < 1e-5);
                }
            };
            fd_param(b.first.theta, g.dtheta_first);
            fd_param(b.second.theta, g.dtheta_second);
            fd_param(b.first.bn->gamma(), g.dgamma_first);
            fd_param(b.first.bn->beta(), g.dbeta_first);
            fd_param(b.second.bn->gamma(), g.dgamma_second);
            fd_param(b.second.bn->beta(), g.dbeta_second);
        }
    }
}

TEST_CASE("FnnNetwork end-to-end gradient checks") {
    Rng rng(19);
    const std::size_t T_mb = 4;

    auto run_check = [&](Activation act, bool bn, LossKind lk) {
        std::vector<FnnLayerConfig> hidden = {{5, act, bn, 0.0},
                                              {4, act, bn, 0.0}};
        FnnNetwork net(3, hidden, 2, lk, 91);
        Tensor x = oracle::random_tensor({T_mb, 3}, rng);
        Tensor targets;
        if (lk == LossKind::MSE)
            targets = oracle::random_tensor({T_mb, 2}, rng);
        else {
            targets = Tensor({T_mb});
            for (std::size_t t = 0; t < T_mb; ++t)
                targets(t) = static_cast<double>(rng.below(2));
        }
        auto report = check(net, x, targets);
        INFO(report.summary());
        REQUIRE(report.pass);
    };

    run_check(Activation::tanh(), false, LossKind::MSE);
    run_check(Activation::tanh(), true, LossKind::CrossEntropy);
    run_check(Activation::sigmoid(), true, LossKind::MSE);
    run_check(Activation::elu(), true, LossKind::CrossEntropy);
    run_check(Activation::relu(), true, LossKind::MSE);
}

TEST_CASE("FnnNetwork with dropout has a deterministic frozen closure") {
    Rng rng(23);
    std::vector<FnnLayerConfig> hidden = {{4, Activation::tanh(), false, 0.5}};
    FnnNetwork net(3, hidden, 2, LossKind::MSE, 7, 0.2);
    Tensor x = oracle::random_tensor({3, 3}, rng);
    Tensor y = oracle::random_tensor({3, 2}, rng);
    auto report = check(net, x, y);
    INFO(report.summary());
    REQUIRE(report.pass);
}

TEST_CASE("FnnNetwork skip markers") {
    Rng rng(29);
    const std::size_t T_mb = 3;
    Tensor x = oracle::random_tensor({T_mb, 3}, rng);
    Tensor y = oracle::random_tensor({T_mb, 2}, rng);

    SECTION("non-standard skip network passes the gradient check") {
        std::vector<FnnLayerConfig> hidden = {{3, Activation::tanh(), true, 0.0},
                                              {3, Activation::tanh(), true, 0.0, true}};
        FnnNetwork net(3, hidden, 2, LossKind::MSE, 31);
        auto report = check(net, x, y);
        INFO(report.summary());
        REQUIRE(report.pass);
    }
    SECTION("standard skip network passes the gradient check") {
        std::vector<FnnLayerConfig> hidden = {{3, Activation::tanh(), true, 0.0},
                                              {3, Activation::tanh(), true, 0.0},
                                              {3, Activation::tanh(), true, 0.0, false, true}};
        FnnNetwork net(3, hidden, 2, LossKind::MSE, 37);
        auto report = check(net, x, y);
        INFO(report.summary());
        REQUIRE(report.pass);
    }
}

TEST_CASE("dropout eval path is the identity bitwise") {
    Rng rng(41);
    std::vector<FnnLayerConfig> hidden = {{4, Activation::tanh(), false, 0.5}};
    FnnNetwork net(3, hidden, 2, LossKind::MSE, 7, 0.2);
    FnnNetwork net_nodrop(3, {{4, Activation::tanh(), false, 0.0}}, 2, LossKind::MSE, 7, 0.0);
    // same seeds produce identical weights, so eval outputs must agree bitwise
    Tensor x = oracle::random_tensor({3, 3}, rng);
    Tensor a = net.predict(x);
    Tensor b = net_nodrop.predict(x);
    REQUIRE(oracle::max_abs_diff(a, b) == 0.0);
}
