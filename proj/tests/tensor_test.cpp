#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "stcast/grad_check.hpp"
#include "stcast/tensor.hpp"

using namespace stcast;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.data()) v = static_cast<Real>(rng.uniform(lo, hi));
    return t;
}

}  // namespace

TEST(Matmul, IdentityCase) {
    Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor c = matmul(eye, a);
    EXPECT_EQ(c.data(), a.data());
}

TEST(Matmul, HandArithmetic) {
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from({2, 1}, {5, 6});
    Tensor c = matmul(a, b);
    ASSERT_EQ(c.shape(), (std::vector<int>{2, 1}));
    EXPECT_DOUBLE_EQ(c[0], 17.0);
    EXPECT_DOUBLE_EQ(c[1], 39.0);
}

TEST(Matmul, ZeroAnnihilates) {
    Rng rng(7);
    Tensor zero = Tensor::zeros({3, 4});
    Tensor b = random_tensor({4, 5}, rng);
    Tensor c = matmul(zero, b);
    for (std::size_t i = 0; i < c.numel(); ++i) EXPECT_EQ(c[i], 0.0);
}

TEST(Matmul, DimensionMismatchNamesBothShapes) {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 5});
    try {
        matmul(a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[4x5]"), std::string::npos) << msg;
    }
}

TEST(Matmul, AssociativityOnRandomChains) {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor a = random_tensor({4, 6}, rng);
        Tensor b = random_tensor({6, 3}, rng);
        Tensor c = random_tensor({3, 5}, rng);
        Tensor left = matmul(matmul(a, b), c);
        Tensor right = matmul(a, matmul(b, c));
        for (std::size_t i = 0; i < left.numel(); ++i) {
            double denom = std::max(1.0, std::abs(static_cast<double>(left[i])));
            EXPECT_NEAR(left[i], right[i], 1e-9 * denom);
        }
    }
}

TEST(Matmul, FoldsLeadingAxes) {
    Rng rng(3);
    Tensor a = random_tensor({2, 3, 4}, rng);
    Tensor b = random_tensor({4, 5}, rng);
    Tensor c = matmul(a, b);
    EXPECT_EQ(c.shape(), (std::vector<int>{2, 3, 5}));
}

TEST(SoftmaxRows, UniformOverEqualLogits) {
    Tensor s = softmax_rows(Tensor::from({1, 2}, {0, 0}));
    EXPECT_DOUBLE_EQ(s[0], 0.5);
    EXPECT_DOUBLE_EQ(s[1], 0.5);
}

TEST(SoftmaxRows, ClosedFormQuarterThreeQuarters) {
    Tensor s = softmax_rows(Tensor::from({1, 2}, {0, std::log(3.0)}));
    EXPECT_NEAR(s[0], 0.25, 1e-15);
    EXPECT_NEAR(s[1], 0.75, 1e-15);
}

TEST(SoftmaxRows, ShiftInvariance) {
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor x = random_tensor({3, 7}, rng, -50.0, 50.0);
        Tensor shifted = Tensor::zeros({3, 7});
        double c = rng.uniform(-30.0, 30.0);
        for (std::size_t i = 0; i < x.numel(); ++i) shifted[i] = x[i] + c;
        Tensor a = softmax_rows(x);
        Tensor b = softmax_rows(shifted);
        for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
    }
}

TEST(SoftmaxRows, RowsSumToOne) {
    Rng rng(9);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor x = random_tensor({4, 9}, rng, -50.0, 50.0);
        Tensor s = softmax_rows(x);
        for (int r = 0; r < 4; ++r) {
            double total = 0;
            for (int c = 0; c < 9; ++c) total += s[static_cast<std::size_t>(r) * 9 + c];
            EXPECT_NEAR(total, 1.0, 1e-12);
        }
    }
}

TEST(Dropout, RateZeroIsIdentity) {
    Rng rng(1);
    Tensor x = random_tensor({5, 5}, rng);
    Tensor y = dropout(x, 0.0, /*training=*/true, rng);
    EXPECT_EQ(x.data(), y.data());
}

TEST(Dropout, EvalModeIsBitIdentical) {
    Rng rng(2);
    Tensor x = random_tensor({5, 5}, rng);
    Tensor y = dropout(x, 0.7, /*training=*/false, rng);
    EXPECT_EQ(x.data(), y.data());
}

TEST(Dropout, SurvivorScalingPreservesMean) {
    Rng rng(42);
    const int n = 100000;
    Tensor x = Tensor::full({n}, 1.0);
    Tensor y = dropout(x, 0.5, /*training=*/true, rng);
    double mean = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) mean += y[i];
    mean /= n;
    EXPECT_NEAR(mean, 1.0, 0.01);
}

TEST(Dropout, RejectsRateOutOfRange) {
    Rng rng(2);
    Tensor x = Tensor::zeros({2});
    EXPECT_THROW(dropout(x, 1.0, true, rng), ConfigError);
    EXPECT_THROW(dropout(x, -0.1, true, rng), ConfigError);
}

TEST(GradCheck, IdentityFunction) {
    Tensor x = Tensor::scalar(5.0);
    x.set_requires_grad(true);
    auto f = [&]() { return sum(x); };
    // power-of-two step keeps 5 +/- h exact so the central difference is exactly 1
    GradCheckReport r = grad_check(f, {x}, 0x1p-13, 1e-12);
    EXPECT_TRUE(r.passed) << r.worst;
    EXPECT_EQ(r.max_rel_err, 0.0);
}

TEST(GradCheck, QuadraticIsExactUnderCentralDifference) {
    Tensor x = Tensor::scalar(3.0);
    x.set_requires_grad(true);
    auto f = [&]() { return sum(mul(x, x)); };
    x.zero_grad();
    Tensor loss = f();
    loss.backward();
    EXPECT_NEAR(x.grad()[0], 6.0, 1e-12);
    GradCheckReport r = grad_check(f, {x}, 1e-4, 1e-6);
    EXPECT_TRUE(r.passed) << r.worst;
}

// Reverse-mode gradients of every op match central differences on
// randomized inputs in [-2, 2].
TEST(GradCheck, AllPrimitiveOps) {
    Rng rng(123);
    const double h = 1e-5;
    const double tol = 1e-4;

    {
        Tensor a = random_tensor({3, 4}, rng).set_requires_grad(true);
        Tensor b = random_tensor({4, 2}, rng).set_requires_grad(true);
        auto f = [&]() { return sum(matmul(a, b)); };
        EXPECT_TRUE(grad_check(f, {a, b}, h, tol).passed);
    }
    {
        Tensor a = random_tensor({2, 5}, rng).set_requires_grad(true);
        Tensor b = random_tensor({2, 5}, rng).set_requires_grad(true);
        auto f = [&]() { return sum(mul(add(a, b), sub(a, b))); };
        EXPECT_TRUE(grad_check(f, {a, b}, h, tol).passed);
    }
    {
        Tensor x = random_tensor({3, 6}, rng).set_requires_grad(true);
        Tensor w = random_tensor({6, 6}, rng).set_requires_grad(true);
        auto f = [&]() { return sum(mul(softmax_rows(matmul(x, w)), x)); };
        EXPECT_TRUE(grad_check(f, {x, w}, h, tol).passed);
    }
    {
        Tensor x = random_tensor({4, 3}, rng).set_requires_grad(true);
        auto f = [&]() { return sum(swish(x)); };
        EXPECT_TRUE(grad_check(f, {x}, h, tol).passed);
    }
    {
        Tensor x = random_tensor({4, 6}, rng).set_requires_grad(true);
        Tensor g = random_tensor({6}, rng, 0.5, 1.5).set_requires_grad(true);
        auto f = [&]() { return sum(mul(rmsnorm(x, g), x)); };
        EXPECT_TRUE(grad_check(f, {x, g}, h, tol).passed);
    }
    {
        Tensor x = random_tensor({2, 3, 4}, rng).set_requires_grad(true);
        Tensor b = random_tensor({4}, rng).set_requires_grad(true);
        auto f = [&]() { return sum(mul(add_bias(x, b), x)); };
        EXPECT_TRUE(grad_check(f, {x, b}, h, tol).passed);
    }
    {
        Tensor t = random_tensor({3, 4}, rng).set_requires_grad(true);
        Tensor c = random_tensor({2, 4}, rng).set_requires_grad(true);
        auto f = [&]() { return sum(mul(context_sum(t, c), context_sum(t, c))); };
        EXPECT_TRUE(grad_check(f, {t, c}, h, tol).passed);
    }
    {
        Tensor a = random_tensor({2, 3}, rng).set_requires_grad(true);
        Tensor b = random_tensor({2, 2}, rng).set_requires_grad(true);
        auto f = [&]() { return sum(mul(concat_last(a, b), concat_last(a, b))); };
        EXPECT_TRUE(grad_check(f, {a, b}, h, tol).passed);
    }
    {
        Tensor table = random_tensor({5, 3}, rng).set_requires_grad(true);
        std::vector<int> idx = {0, 2, 2, 4};
        auto f = [&]() { return sum(mul(embedding_rows(table, idx), embedding_rows(table, idx))); };
        EXPECT_TRUE(grad_check(f, {table}, h, tol).passed);
    }
    {
        Tensor p = random_tensor({3, 4}, rng).set_requires_grad(true);
        Tensor t = random_tensor({3, 4}, rng);
        auto f = [&]() { return mae(p, t); };
        EXPECT_TRUE(grad_check(f, {p}, h, tol).passed);
    }
    {
        Tensor x = random_tensor({2, 3, 4}, rng).set_requires_grad(true);
        auto f = [&]() { return sum(mul(reshape(x, {6, 4}), reshape(x, {6, 4}))); };
        EXPECT_TRUE(grad_check(f, {x}, h, tol).passed);
    }
}

TEST(GradCheck, MultiheadMixMatchesFiniteDifferences) {
    Rng rng(77);
    Tensor q = random_tensor({2, 3, 4}, rng).set_requires_grad(true);
    Tensor k = random_tensor({2, 5, 4}, rng).set_requires_grad(true);
    Tensor v = random_tensor({2, 5, 4}, rng).set_requires_grad(true);
    Tensor probe = random_tensor({2, 3, 4}, rng);
    auto f = [&]() { return sum(mul(multihead_mix(q, k, v, 2, 0.0, false, nullptr), probe)); };
    GradCheckReport r = grad_check(f, {q, k, v}, 1e-5, 1e-4);
    EXPECT_TRUE(r.passed) << r.worst;
}

TEST(GradCheck, MultiheadMixWithLogitDropout) {
    Rng rng(78);
    Tensor q = random_tensor({1, 3, 4}, rng).set_requires_grad(true);
    Tensor k = random_tensor({1, 4, 4}, rng).set_requires_grad(true);
    Tensor v = random_tensor({1, 4, 4}, rng).set_requires_grad(true);
    Tensor probe = random_tensor({1, 3, 4}, rng);
    // Fixed dropout stream per evaluation so f is deterministic for the FD oracle.
    auto f = [&]() {
        Rng drop(99);
        return sum(mul(multihead_mix(q, k, v, 2, 0.3, true, &drop), probe));
    };
    GradCheckReport r = grad_check(f, {q, k, v}, 1e-5, 1e-4);
    EXPECT_TRUE(r.passed) << r.worst;
}

TEST(GradCheck, AdjacencyMix) {
    Rng rng(79);
    Tensor h = random_tensor({3, 2, 4}, rng).set_requires_grad(true);
    Tensor adj = Tensor::from({3, 3}, {0, 1, 0.5, 1, 0, 0, 0.5, 0, 0});
    Tensor probe = random_tensor({3, 2, 4}, rng);
    auto f = [&]() { return sum(mul(adjacency_mix(h, adj), probe)); };
    GradCheckReport r = grad_check(f, {h}, 1e-5, 1e-4);
    EXPECT_TRUE(r.passed) << r.worst;
}

TEST(Autograd, GradientsAccumulateAcrossBackwardCalls) {
    Tensor x = Tensor::scalar(2.0);
    x.set_requires_grad(true);
    for (int i = 0; i < 3; ++i) {
        Tensor loss = sum(mul(x, x));
        loss.backward();
    }
    EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);  // 3 * 2x
    x.zero_grad();
    EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);
}

TEST(Autograd, NoGradGuardSkipsGraph) {
    Tensor x = Tensor::scalar(2.0);
    x.set_requires_grad(true);
    NoGradGuard ng;
    Tensor y = sum(mul(x, x));
    EXPECT_FALSE(y.requires_grad());
}

TEST(Autograd, SharedSubexpressionGradient) {
    // f = (x*x) + (x*x) -> df/dx = 4x
    Tensor x = Tensor::scalar(3.0);
    x.set_requires_grad(true);
    Tensor sq = mul(x, x);
    Tensor loss = sum(add(sq, sq));
    loss.backward();
    EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Rng, DeterministicAndCounterBased) {
    Rng a(1234), b(1234);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
    Rng::State s = a.state();
    double next = a.uniform();
    a.set_state(s);
    EXPECT_EQ(a.uniform(), next);
}

TEST(Rng, ForkGivesIndependentStreams) {
    Rng root(5);
    Rng a = root.fork(0);
    Rng b = root.fork(1);
    EXPECT_NE(a.next_u64(), b.next_u64());
    Rng a2 = root.fork(0);
    a2.next_u64();
    EXPECT_EQ(a.next_u64(), a2.next_u64());
}
