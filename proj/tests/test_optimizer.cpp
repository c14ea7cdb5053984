#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "indexnet/optimizer.hpp"
#include "oracles.hpp"

using namespace indexnet;

namespace {

// Runs `steps` optimizer steps on J(theta) = theta^2/2 from theta0 = 1 and
// returns the loss trajectory.
std::vector<double> quadratic_descent(OptimizerKind kind, int steps) {
    OptimizerState st = OptimizerState::with_defaults(kind);
    Tensor theta({1}, {1.0});
    std::vector<double> losses;
    auto grad_at = [&](const std::vector<Tensor*>& ps) {
        std::vector<Tensor> gs;
        gs.push_back(Tensor({1}, {(*ps[0])(0)}));
        return gs;
    };
    for (int i = 0; i < steps; ++i) {
        Tensor g({1}, {theta(0)});
        st.step({&theta}, {&g}, grad_at);
        losses.push_back(0.5 * theta(0) * theta(0));
    }
    return losses;
}

}  // namespace

TEST_CASE("all seven kinds monotonically decrease the quadratic") {
    for (OptimizerKind kind :
         {OptimizerKind::SGD, OptimizerKind::Momentum, OptimizerKind::Nesterov,
          OptimizerKind::Adagrad, OptimizerKind::RMSprop, OptimizerKind::Adadelta,
          OptimizerKind::Adam}) {
        auto losses = quadratic_descent(kind, 100);
        INFO(optimizer_name(kind));
        double prev = 0.5;
        for (double j : losses) {
            REQUIRE(j < prev);
            prev = j;
        }
    }
}

TEST_CASE("momentum with gamma=0 equals SGD bitwise") {
    OptimizerHyper h;
    h.eta = 0.05;
    h.gamma = 0.0;
    OptimizerState mom(OptimizerKind::Momentum, h);
    OptimizerState sgd(OptimizerKind::SGD, h);
    Rng rng(5);
    Tensor pm = oracle::random_tensor({3, 4}, rng);
    Tensor ps = pm;
    for (int i = 0; i < 20; ++i) {
        Tensor g = oracle::random_tensor({3, 4}, rng);
        mom.step({&pm}, {&g});
        sgd.step({&ps}, {&g});
    }
    for (std::size_t i = 0; i < pm.size(); ++i) REQUIRE(pm[i] == ps[i]);
}

TEST_CASE("Adam first step applies exact bias correction") {
    OptimizerState st = OptimizerState::with_defaults(OptimizerKind::Adam);
    Tensor theta({2}, {1.0, -2.0});
    Tensor g({2}, {0.3, -0.7});
    st.step({&theta}, {&g});
    // m_hat == g and v_hat == g^2 exactly at e=1
    const auto& h = st.hyper();
    for (std::size_t i = 0; i < 2; ++i) {
        const double m_hat = (1.0 - h.beta1) * g[i] / (1.0 - h.beta1);
        REQUIRE(m_hat == g[i]);
        const double v_hat = (1.0 - h.beta2) * g[i] * g[i] / (1.0 - h.beta2);
        const double expect = (i == 0 ? 1.0 : -2.0) - h.eta / std::sqrt(v_hat + h.epsilon) * m_hat;
        REQUIRE(theta[i] == Catch::Approx(expect).margin(1e-15));
    }
    // for |g| >> eps the step is close to -eta*sign(g)
    Tensor t2({1}, {0.0});
    OptimizerState st2 = OptimizerState::with_defaults(OptimizerKind::Adam);
    Tensor big({1}, {25.0});
    st2.step({&t2}, {&big});
    REQUIRE(t2(0) == Catch::Approx(-st2.hyper().eta).epsilon(1e-6));
}

TEST_CASE("Adagrad accumulates e*g^2 under a constant gradient") {
    OptimizerState st = OptimizerState::with_defaults(OptimizerKind::Adagrad);
    Tensor theta({1}, {0.0});
    const double g0 = 0.25;
    for (int e = 1; e <= 10; ++e) {
        Tensor g({1}, {g0});
        st.step({&theta}, {&g});
        REQUIRE(st.v()[0](0) == Catch::Approx(e * g0 * g0).margin(1e-15));
    }
    SECTION("accumulator is non-decreasing") {
        Rng rng(7);
        OptimizerState s2 = OptimizerState::with_defaults(OptimizerKind::Adagrad);
        Tensor p({4});
        double prev = 0.0;
        for (int i = 0; i < 30; ++i) {
            Tensor g = oracle::random_tensor({4}, rng);
            s2.step({&p}, {&g});
            double total = sum(s2.v()[0]);
            REQUIRE(total >= prev);
            prev = total;
        }
    }
}

TEST_CASE("updates are independent per parameter entry") {
    for (OptimizerKind kind : {OptimizerKind::Adam, OptimizerKind::RMSprop, OptimizerKind::SGD}) {
        OptimizerState a = OptimizerState::with_defaults(kind);
        OptimizerState b = OptimizerState::with_defaults(kind);
        Tensor pa({3}, {1.0, 1.0, 1.0});
        Tensor pb = pa;
        Tensor ga({3}, {0.1, 0.2, 0.3});
        Tensor gb({3}, {0.1, 0.9, 0.3});  // entry 1 perturbed
        a.step({&pa}, {&ga});
        b.step({&pb}, {&gb});
        INFO(optimizer_name(kind));
        REQUIRE(pa(0) == pb(0));
        REQUIRE(pa(2) == pb(2));
        REQUIRE(pa(1) != pb(1));
    }
}

TEST_CASE("Nesterov needs its callback and refuses NaN gradients") {
    OptimizerState st = OptimizerState::with_defaults(OptimizerKind::Nesterov);
    Tensor theta({1}, {1.0});
    Tensor g({1}, {0.5});
    REQUIRE_THROWS_AS(st.step({&theta}, {&g}), ConfigError);

    OptimizerState sgd = OptimizerState::with_defaults(OptimizerKind::SGD);
    Tensor bad({1}, {std::nan("")});
    const double before = theta(0);
    REQUIRE_THROWS_AS(sgd.step({&theta}, {&bad}), NumericError);
    REQUIRE(theta(0) == before);  // step refused, parameters untouched
}

TEST_CASE("lr_decay") {
    REQUIRE(lr_decay(0.5, 0.0) == 0.5);
    REQUIRE(lr_decay(1.0, std::log(2.0)) == Catch::Approx(0.5));
    double eta = 2.0;
    for (int k = 0; k < 5; ++k) eta = lr_decay(eta, 0.1);
    REQUIRE(eta == Catch::Approx(2.0 * std::exp(-0.5)));
}

TEST_CASE("clip_weights") {
    SECTION("inside the ball is untouched bitwise") {
        Tensor t({2}, {0.3, -0.4});
        Tensor c = clip_weights(t, 1.0);
        REQUIRE(c(0) == t(0));
        REQUIRE(c(1) == t(1));
    }
    SECTION("norm-5 vector clips onto the unit sphere") {
        Tensor t({2}, {3.0, 4.0});
        Tensor c = clip_weights(t, 1.0);
        REQUIRE(c(0) == Catch::Approx(0.6));
        REQUIRE(c(1) == Catch::Approx(0.8));
        REQUIRE(std::sqrt(c(0) * c(0) + c(1) * c(1)) == Catch::Approx(1.0).margin(1e-12));
    }
    SECTION("post-condition norm never exceeds C") {
        Rng rng(9);
        for (int rep = 0; rep < 20; ++rep) {
            Tensor t = oracle::random_tensor({5}, rng, -3.0, 3.0);
            Tensor c = clip_weights(t, 0.5);
            double n = 0.0;
            for (std::size_t i = 0; i < c.size(); ++i) n += c[i] * c[i];
            REQUIRE(std::sqrt(n) <= 0.5 + 1e-12);
        }
    }
}

TEST_CASE("penalty_grad") {
    SECTION("zero lambdas give zero") {
        RegularizerConfig cfg;
        Tensor t({3}, {1.0, -2.0, 0.0});
        Tensor g = penalty_grad(cfg, t);
        for (std::size_t i = 0; i < g.size(); ++i) REQUIRE(g[i] == 0.0);
    }
    SECTION("L2 only hand case") {
        RegularizerConfig cfg(0.1, 0.0, 0.0);
        Tensor t({2}, {1.0, -2.0});
        Tensor g = penalty_grad(cfg, t);
        REQUIRE(g(0) == Catch::Approx(0.2));
        REQUIRE(g(1) == Catch::Approx(-0.4));
    }
    SECTION("matches finite differences of the penalty away from zero") {
        RegularizerConfig cfg(0.05, 0.02, 0.0);
        Rng rng(13);
        Tensor t = oracle::random_tensor({6}, rng, 0.2, 1.5);  // keep away from |w|=0
        for (std::size_t i = 0; i < t.size(); ++i)
            if (rng.uniform() < 0.5) t[i] = -t[i];
        Tensor g = penalty_grad(cfg, t);
        const double eps = 1e-7;
        for (std::size_t i = 0; i < t.size(); ++i) {
            Tensor tp = t, tm = t;
            tp[i] += eps;
            tm[i] -= eps;
            const double fd = (penalty_loss(cfg, tp) - penalty_loss(cfg, tm)) / (2.0 * eps);
            REQUIRE(oracle::rel_err(g[i], fd) < 1e-7);
        }
    }
    SECTION("sign(0) is 0 for the L1 part") {
        RegularizerConfig cfg(0.0, 1.0, 0.0);
        Tensor t({1}, {0.0});
        REQUIRE(penalty_grad(cfg, t)(0) == 0.0);
    }
}
