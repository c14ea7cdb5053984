#include <catch2/catch_amalgamated.hpp>

#include "indexnet/tensor.hpp"
#include "indexnet/math.hpp"
#include "oracles.hpp"

using namespace indexnet;

TEST_CASE("tensor shape and row-major indexing") {
    Tensor t({2, 3, 4});
    REQUIRE(t.size() == 24);
    t(1, 2, 3) = 7.0;
    REQUIRE(t[1 * 12 + 2 * 4 + 3] == 7.0);
    REQUIRE_THROWS_AS(t.reshaped({5, 5}), DimensionError);
    REQUIRE(t.reshaped({24}).rank() == 1);
}

TEST_CASE("matmul identity and hand case") {
    Rng rng(11);
    Tensor m = oracle::random_tensor({3, 3}, rng);
    Tensor out = matmul(Tensor::identity(3), m);
    for (std::size_t i = 0; i < m.size(); ++i) REQUIRE(out[i] == m[i]);

    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor b({2, 1}, {1, 1});
    Tensor c = matmul(a, b);
    REQUIRE(c(0, 0) == 3.0);
    REQUIRE(c(1, 0) == 7.0);
}

TEST_CASE("matmul agrees with 3-loop reference") {
    Rng rng(42);
    for (int rep = 0; rep < 5; ++rep) {
        Tensor a = oracle::random_tensor({8, 8}, rng);
        Tensor b = oracle::random_tensor({8, 8}, rng);
        REQUIRE(oracle::max_abs_diff(matmul(a, b), oracle::matmul_3loop(a, b)) < 1e-13);
    }
}

TEST_CASE("matmul shape errors name both shapes") {
    Tensor a({2, 3}), b({4, 2});
    try {
        matmul(a, b);
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        std::string msg = e.what();
        REQUIRE(msg.find("[2,3]") != std::string::npos);
        REQUIRE(msg.find("[4,2]") != std::string::npos);
    }
}

TEST_CASE("pad2d places zeros around the original map") {
    Tensor x({1, 1, 1}, {5.0});
    Tensor p = pad2d(x, 1);
    REQUIRE(p.shape() == std::vector<std::size_t>{1, 3, 3});
    REQUIRE(p(0, 1, 1) == 5.0);
    REQUIRE(sum(p) == 5.0);

    SECTION("p=0 is the identity") {
        Rng rng(3);
        Tensor y = oracle::random_tensor({2, 4, 5}, rng);
        REQUIRE(oracle::max_abs_diff(pad2d(y, 0), y) == 0.0);
    }
    SECTION("padding preserves the total sum") {
        Rng rng(4);
        Tensor y = oracle::random_tensor({3, 5, 4}, rng);
        REQUIRE(std::abs(sum(pad2d(y, 2)) - sum(y)) < 1e-12);
    }
}

TEST_CASE("conv geometry validates integral outputs") {
    auto g = ConvGeometry::make(4, 4, 2, 2, 0);
    REQUIRE(g.out_width == 2);
    REQUIRE(g.out_height == 2);
    REQUIRE_THROWS_AS(ConvGeometry::make(5, 5, 2, 2, 0), GeometryError);
    auto s = ConvGeometry::same(7, 7, 3);
    REQUIRE(s.pad == 1);
    REQUIRE(s.out_width == 7);
    REQUIRE_THROWS_AS(ConvGeometry::same(7, 7, 4), GeometryError);
}

TEST_CASE("im2col single-window case flattens the image") {
    Tensor x({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    auto g = ConvGeometry::make(3, 3, 3, 1, 0);
    Tensor cols = im2col(x, g);
    REQUIRE(cols.shape() == std::vector<std::size_t>{1, 9});
    for (std::size_t i = 0; i < 9; ++i) REQUIRE(cols[i] == x[i]);
}

TEST_CASE("im2col non-overlapping 2x2 blocks") {
    // 4x4 image, R=2, S=2: four rows, each one 2x2 block in row-major order.
    Tensor x({1, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) x[i] = static_cast<double>(i);
    auto g = ConvGeometry::make(4, 4, 2, 2, 0);
    Tensor cols = im2col(x, g);
    REQUIRE(cols.shape() == std::vector<std::size_t>{4, 4});
    // block at output (0,0): pixels (0,0),(0,1),(1,0),(1,1) -> 0,1,4,5
    REQUIRE(cols(0, 0) == 0.0);
    REQUIRE(cols(0, 1) == 1.0);
    REQUIRE(cols(0, 2) == 4.0);
    REQUIRE(cols(0, 3) == 5.0);
    // block at output (1,1): pixels (2,2),(2,3),(3,2),(3,3) -> 10,11,14,15
    REQUIRE(cols(3, 0) == 10.0);
    REQUIRE(cols(3, 3) == 15.0);
}

TEST_CASE("im2col + matmul equals naive convolution") {
    Rng rng(7);
    for (int rep = 0; rep < 10; ++rep) {
        const std::size_t Fi = 1 + rng.below(3), Fo = 1 + rng.below(3);
        const std::size_t R = 1 + rng.below(3);
        const std::size_t S = 1 + rng.below(2);
        const std::size_t P = rng.below(2);
        // pick an input size that makes the output extent integral
        const std::size_t n_out = 1 + rng.below(4);
        const std::size_t in = S * (n_out - 1) + R - 2 * P;
        if (static_cast<long>(in) <= 0) continue;
        auto g = ConvGeometry::make(in, in, R, S, P);
        Tensor x = oracle::random_tensor({Fi, in, in}, rng);
        Tensor theta = oracle::random_tensor({Fo, Fi, R, R}, rng);
        Tensor xp = pad2d(x, P);
        Tensor ref = oracle::conv_naive(xp, theta, g);
        Tensor got = matmul(im2col(xp, g), flatten_kernel(theta));
        // got is [Np*Tp, Fo]; compare element-wise against ref [Fo,Np,Tp]
        for (std::size_t f = 0; f < Fo; ++f)
            for (std::size_t l = 0; l < g.out_width; ++l)
                for (std::size_t m = 0; m < g.out_height; ++m)
                    REQUIRE(std::abs(got(l * g.out_height + m, f) - ref(f, l, m)) < 1e-12);
    }
}

TEST_CASE("col2im is the exact adjoint of im2col") {
    Rng rng(19);
    SECTION("non-overlapping geometry reconstructs the input") {
        auto g = ConvGeometry::make(6, 6, 2, 2, 0);
        Tensor x = oracle::random_tensor({2, 6, 6}, rng);
        Tensor back = col2im(im2col(x, g), 2, g);
        REQUIRE(oracle::max_abs_diff(back, x) == 0.0);
    }
    SECTION("overlap counting: center of 3x3 with R=2,S=1 is used 4 times") {
        auto g = ConvGeometry::make(3, 3, 2, 1, 0);
        Tensor x = Tensor::full({1, 3, 3}, 1.0);
        Tensor counts = col2im(im2col(x, g), 1, g);
        REQUIRE(counts(0, 1, 1) == 4.0);
        REQUIRE(counts(0, 0, 0) == 1.0);
        REQUIRE(counts(0, 0, 1) == 2.0);
    }
    SECTION("inner product identity <im2col(x), c> == <x, col2im(c)>") {
        for (int rep = 0; rep < 10; ++rep) {
            auto g = ConvGeometry::make(5, 5, 3, 1, 1);
            Tensor x = oracle::random_tensor({2, 7, 7}, rng);  // already padded size
            Tensor cols = im2col(x, g);
            Tensor c = oracle::random_tensor(cols.shape(), rng);
            const double lhs = dot(cols, c);
            const double rhs = dot(x, col2im(c, 2, g));
            REQUIRE(std::abs(lhs - rhs) < 1e-12 * std::max(1.0, std::abs(lhs)));
        }
    }
}

TEST_CASE("pool_rows values, argmax and tie-breaking") {
    SECTION("hand case") {
        Tensor x({1, 2, 2}, {1, 2, 3, 4});
        auto r = pool_rows(x, 2, 2);
        REQUIRE(r.values(0, 0, 0) == 4.0);
        REQUIRE(r.arg_j[0] == 1);
        REQUIRE(r.arg_k[0] == 1);
    }
    SECTION("constant input ties break to smallest row-major (j,k)") {
        Tensor x = Tensor::full({2, 4, 4}, 3.25);
        auto r = pool_rows(x, 2, 2);
        for (std::size_t i = 0; i < r.arg_j.size(); ++i) {
            REQUIRE(r.arg_j[i] == 0);
            REQUIRE(r.arg_k[i] == 0);
            REQUIRE(r.values[i] == 3.25);
        }
    }
    SECTION("agrees with exhaustive 6-loop scan") {
        Rng rng(23);
        for (int rep = 0; rep < 10; ++rep) {
            Tensor x = oracle::random_tensor({3, 6, 6}, rng);
            auto r = pool_rows(x, 2, 2);
            REQUIRE(oracle::max_abs_diff(r.values, oracle::maxpool_6loop(x, 2, 2)) == 0.0);
        }
    }
    SECTION("window exceeding bounds raises a geometry error") {
        Tensor x({1, 3, 3});
        REQUIRE_THROWS_AS(pool_rows(x, 4, 1), GeometryError);
        REQUIRE_THROWS_AS(pool_rows(x, 2, 2), GeometryError);  // non-integral output
    }
}
