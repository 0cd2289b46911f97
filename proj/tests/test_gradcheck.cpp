#include <cmath>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "floc/gradcheck.hpp"
#include "floc/gradsuite.hpp"
#include "floc/layers.hpp"
#include "support.hpp"

using namespace floc;
using floc::testing::dot;
using floc::testing::random_tensor;

TEST(RelativeError, UsesTheLargerMagnitudeOrTheFloor) {
    EXPECT_DOUBLE_EQ(relative_error(2.0, 1.0), 0.5);
    EXPECT_DOUBLE_EQ(relative_error(0.0, 0.0), 0.0);
    EXPECT_DOUBLE_EQ(relative_error(1e-9, 0.0, 1e-6), 1e-3);
}

TEST(GradCheck, LinearLayerIsNearExact) {
    std::mt19937_64 rng(1);
    Tensor x = random_tensor({8}, rng), w = random_tensor({8, 5}, rng), b = random_tensor({5}, rng);
    const Tensor G = random_tensor({5}, rng);
    auto loss = [&] { return dot(G, dense(x, w, b)); };
    const auto report = grad_check(loss, w.values(), dense_backward(x, w, G).weight.values(), 1e-7);
    EXPECT_TRUE(report.passed) << report.summary();
    EXPECT_EQ(report.checked, 40u);
    EXPECT_LT(report.max_relative_error, 1e-7);
}

namespace {

struct ConvRelu {
    Tensor x, k, b, G;

    double loss() const { return dot(G, relu(conv2d(x, k, b))); }
    Conv2dGrads grads() const {
        const Tensor pre = conv2d(x, k, b);
        return conv2d_backward(x, k, relu_backward(pre, G));
    }
    std::uint64_t regime() const {
        std::uint64_t h = 1469598103934665603ull;
        const Tensor pre = conv2d(x, k, b);
        for (double v : pre.values()) h = (h ^ (v > 0)) * 1099511628211ull;
        return h;
    }
};

ConvRelu make_conv_relu(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return {random_tensor({6, 6, 2}, rng), random_tensor({3, 3, 2, 3}, rng), random_tensor({3}, rng),
            random_tensor({6, 6, 3}, rng)};
}

}  // namespace

TEST(GradCheck, ConvReluStackPasses) {
    auto net = make_conv_relu(2);
    const auto g = net.grads();
    GradCheckOptions opts{.floor = 1e-5, .regime = [&] { return net.regime(); }};
    const auto rk = grad_check([&] { return net.loss(); }, net.k.values(), g.kernel.values(), 1e-4, opts);
    const auto rx = grad_check([&] { return net.loss(); }, net.x.values(), g.input.values(), 1e-4, opts);
    EXPECT_TRUE(rk.passed) << rk.summary();
    EXPECT_TRUE(rx.passed) << rx.summary();
}

TEST(GradCheck, CorruptedBackwardFails) {
    auto net = make_conv_relu(3);
    Tensor doubled = net.grads().kernel;
    for (double& v : doubled.values()) v *= 2.0;
    const auto r = grad_check([&] { return net.loss(); }, net.k.values(), doubled.values(), 1e-4, {.floor = 1e-5});
    EXPECT_FALSE(r.passed);
    EXPECT_GT(r.max_relative_error, 0.3);
}

TEST(GradCheck, NonFiniteAnalyticGradientIsFatal) {
    Tensor x = Tensor::from({1, 2});
    const Tensor g = Tensor::from({1, std::numeric_limits<double>::infinity()});
    EXPECT_THROW(grad_check([&] { return x[0] + x[1]; }, x.values(), g.values(), 1e-4), NumericError);
}

TEST(GradCheck, RestoresValuesAndValidatesArguments) {
    Tensor x = Tensor::from({0.3, -0.7});
    const Tensor before = x;
    const Tensor g = Tensor::from({0.6, -1.4});
    grad_check([&] { return x[0] * x[0] + x[1] * x[1]; }, x.values(), g.values(), 1e-6);
    EXPECT_EQ(x, before);
    EXPECT_THROW(grad_check([] { return 0.0; }, x.values(), g.values(), 0.0), ArgumentError);
    EXPECT_THROW(grad_check([] { return 0.0; }, x.values(), Tensor({3}).values(), 1e-4), ShapeError);
}

TEST(GradCheck, RegimeChangesAreSkippedAsKinks) {
    // |x| sits exactly on its kink at 0; the one-sided analytic slope +1
    // disagrees with the central difference 0 there.
    Tensor x = Tensor::from({0.0, 0.5});
    const Tensor g = Tensor::from({1.0, 1.0});
    auto loss = [&] { return std::abs(x[0]) + std::abs(x[1]); };
    EXPECT_FALSE(grad_check(loss, x.values(), g.values(), 1e-4).passed);
    GradCheckOptions opts{.regime = [&] { return std::uint64_t(x[0] > 0) | std::uint64_t(x[1] > 0) << 1; }};
    const auto r = grad_check(loss, x.values(), g.values(), 1e-4, opts);
    EXPECT_TRUE(r.passed);
    EXPECT_EQ(r.kinks, 1u);
    EXPECT_EQ(r.checked, 1u);
}

TEST(GradientSuite, EveryEntryPasses) {
    for (std::uint64_t seed : {1u, 2u}) {
        const auto suite = run_gradient_suite(seed);
        ASSERT_FALSE(suite.empty());
        for (const auto& e : suite) EXPECT_TRUE(e.report.passed) << "seed " << seed << " " << e.name << ": " << e.report.summary();
    }
}
