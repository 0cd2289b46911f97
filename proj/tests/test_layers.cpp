#include <algorithm>
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "floc/gradcheck.hpp"
#include "floc/layers.hpp"
#include "support.hpp"

using namespace floc;
using floc::testing::dot;
using floc::testing::random_tensor;

namespace {

// Six nested loops, written independently of the library's im2col-free kernel.
Tensor conv_oracle(const Tensor& in, const Tensor& k, const Tensor& b) {
    const long H = in.dim(0), W = in.dim(1), Ci = in.dim(2), K = k.dim(0), Co = k.dim(3), pad = (K - 1) / 2;
    Tensor out({in.dim(0), in.dim(1), k.dim(3)});
    for (long y = 0; y < H; ++y)
        for (long x = 0; x < W; ++x)
            for (long co = 0; co < Co; ++co) {
                double s = b[co];
                for (long dy = 0; dy < K; ++dy)
                    for (long dx = 0; dx < K; ++dx)
                        for (long ci = 0; ci < Ci; ++ci) {
                            const long yy = y + dy - pad, xx = x + dx - pad;
                            if (yy < 0 || xx < 0 || yy >= H || xx >= W) continue;
                            s += in.at(yy, xx, ci) * k[((dy * K + dx) * Ci + ci) * Co + co];
                        }
                out.at(y, x, co) = s;
            }
    return out;
}

}  // namespace

TEST(Conv2d, ScalarMultiply) {
    const Tensor out = conv2d(Tensor({1, 1, 1}, 5.0), Tensor({1, 1, 1, 1}, 2.0), Tensor({1}, 0.0));
    ASSERT_EQ(out.shape(), (Shape{1, 1, 1}));
    EXPECT_EQ(out[0], 10.0);
}

TEST(Conv2d, ZeroSumKernelAnnihilatesConstantsInInterior) {
    Tensor k({3, 3, 1, 1}, std::vector<double>{0, 1, 0, 1, -4, 1, 0, 1, 0});
    const Tensor out = conv2d(Tensor({6, 6, 1}, 3.7), k, Tensor({1}));
    for (std::size_t y = 1; y < 5; ++y)
        for (std::size_t x = 1; x < 5; ++x) EXPECT_NEAR(out.at(y, x, 0), 0.0, 1e-15);
}

TEST(Conv2d, MatchesNestedLoopOracle) {
    std::mt19937_64 rng(11);
    const Tensor in = random_tensor({5, 5, 2}, rng);
    const Tensor k = random_tensor({3, 3, 2, 3}, rng);
    const Tensor b = random_tensor({3}, rng);
    EXPECT_LT(max_abs_diff(conv2d(in, k, b), conv_oracle(in, k, b)), 1e-14);

    const Tensor k5 = random_tensor({5, 5, 2, 1}, rng);
    EXPECT_LT(max_abs_diff(conv2d(in, k5, Tensor({1})), conv_oracle(in, k5, Tensor({1}))), 1e-14);
}

TEST(Conv2d, ZeroKernelAndBiasGiveZero) {
    std::mt19937_64 rng(3);
    const Tensor out = conv2d(random_tensor({4, 4, 3}, rng, -50, 50), Tensor({3, 3, 3, 2}), Tensor({2}));
    for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, RejectsChannelMismatchAndEvenKernels) {
    EXPECT_THROW(conv2d(Tensor({4, 4, 2}), Tensor({3, 3, 3, 1}), Tensor({1})), ShapeError);
    EXPECT_THROW(conv2d(Tensor({4, 4, 1}), Tensor({2, 2, 1, 1}), Tensor({1})), ShapeError);
    EXPECT_THROW(conv2d_backward(Tensor({4, 4, 1}), Tensor({3, 3, 1, 1}), Tensor({4, 4, 2})), ShapeError);
}

TEST(Conv2dBackward, ZeroUpstreamGivesZeroGradients) {
    std::mt19937_64 rng(5);
    const auto g = conv2d_backward(random_tensor({4, 4, 2}, rng), random_tensor({3, 3, 2, 2}, rng), Tensor({4, 4, 2}));
    for (const Tensor* t : {&g.kernel, &g.bias, &g.input})
        for (double v : t->values()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2dBackward, ScalarProductRule) {
    const auto g = conv2d_backward(Tensor({1, 1, 1}, 3.0), Tensor({1, 1, 1, 1}, -2.0), Tensor({1, 1, 1}, 0.5));
    EXPECT_DOUBLE_EQ(g.kernel[0], 1.5);
    EXPECT_DOUBLE_EQ(g.bias[0], 0.5);
    EXPECT_DOUBLE_EQ(g.input[0], -1.0);
}

TEST(Conv2dBackward, MatchesFiniteDifferences) {
    std::mt19937_64 rng(7);
    Tensor in = random_tensor({5, 5, 2}, rng);
    Tensor k = random_tensor({3, 3, 2, 3}, rng);
    Tensor b = random_tensor({3}, rng);
    const Tensor G = random_tensor({5, 5, 3}, rng);
    auto loss = [&] { return dot(G, conv2d(in, k, b)); };
    const auto g = conv2d_backward(in, k, G);
    GradCheckOptions opts;
    opts.floor = 1e-5;
    EXPECT_TRUE(grad_check(loss, in.values(), g.input.values(), 1e-4, opts).passed);
    EXPECT_TRUE(grad_check(loss, k.values(), g.kernel.values(), 1e-4, opts).passed);
    EXPECT_TRUE(grad_check(loss, b.values(), g.bias.values(), 1e-4, opts).passed);
}

TEST(MaxPool2, TwoByTwo) {
    const auto r = maxpool2(Tensor({2, 2, 1}, std::vector<double>{1, 2, 3, 4}));
    ASSERT_EQ(r.output.shape(), (Shape{1, 1, 1}));
    EXPECT_EQ(r.output[0], 4.0);
    EXPECT_EQ(r.argmax[0], 3u);
}

TEST(MaxPool2, TiesGoToFirstInRowMajorOrder) {
    const Tensor in({4, 4, 2}, 1.0);
    const auto r = maxpool2(in);
    for (std::size_t oy = 0; oy < 2; ++oy)
        for (std::size_t ox = 0; ox < 2; ++ox)
            for (std::size_t c = 0; c < 2; ++c) {
                EXPECT_EQ(r.output.at(oy, ox, c), 1.0);
                EXPECT_EQ(r.argmax[(oy * 2 + ox) * 2 + c], ((2 * oy) * 4 + 2 * ox) * 2 + c);
            }
}

TEST(MaxPool2, MatchesWindowScanAndValuesComeFromTheirWindow) {
    std::mt19937_64 rng(13);
    const Tensor in = random_tensor({8, 8, 3}, rng);
    const auto r = maxpool2(in);
    for (std::size_t oy = 0; oy < 4; ++oy)
        for (std::size_t ox = 0; ox < 4; ++ox)
            for (std::size_t c = 0; c < 3; ++c) {
                double m = -1e300;
                for (std::size_t dy = 0; dy < 2; ++dy)
                    for (std::size_t dx = 0; dx < 2; ++dx) m = std::max(m, in.at(2 * oy + dy, 2 * ox + dx, c));
                EXPECT_EQ(r.output.at(oy, ox, c), m);
                EXPECT_EQ(in[r.argmax[(oy * 4 + ox) * 3 + c]], m);
            }
}

TEST(MaxPool2, OddSidesRejected) {
    EXPECT_THROW(maxpool2(Tensor({3, 4, 1})), ShapeError);
    EXPECT_THROW(maxpool2(Tensor({4, 5, 1})), ShapeError);
}

TEST(MaxPool2, BackwardRoutesToWinners) {
    const Tensor in({2, 4, 1}, std::vector<double>{1, 9, 2, 3, 4, 0, 8, 5});
    const auto r = maxpool2(in);
    const Tensor g = maxpool2_backward(Tensor({1, 2, 1}, std::vector<double>{10, 20}), r.argmax, in.shape());
    EXPECT_EQ(g, Tensor({2, 4, 1}, std::vector<double>{0, 10, 0, 0, 0, 0, 20, 0}));
}

TEST(MaxPool2, UndoesNearestUpsampling) {
    std::mt19937_64 rng(17);
    const Tensor in = random_tensor({3, 5, 2}, rng);
    EXPECT_EQ(maxpool2(upsample_nearest(in, 2)).output, in);
}

TEST(Relu, Examples) {
    EXPECT_EQ(relu(Tensor::from({-1, 0, 2})), Tensor::from({0, 0, 2}));
    EXPECT_EQ(relu(Tensor::from({-3, -0.1, -7})), Tensor({3}));
    EXPECT_EQ(relu_backward(Tensor::from({-1, 0, 2}), Tensor::from({5, 5, 5})), Tensor::from({0, 0, 5}));
}

TEST(Relu, GradientAwayFromZero) {
    std::mt19937_64 rng(19);
    Tensor x = random_tensor({40}, rng);
    for (double& v : x.values()) v += v < 0 ? -0.1 : 0.1;
    const Tensor G = random_tensor({40}, rng);
    auto loss = [&] { return dot(G, relu(x)); };
    const Tensor g = relu_backward(x, G);
    EXPECT_TRUE(grad_check(loss, x.values(), g.values(), 1e-4).passed);
}

TEST(Upsample, Examples) {
    const Tensor in({2, 2, 1}, std::vector<double>{1, 2, 3, 4});
    const Tensor expected({4, 4, 1}, std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});
    EXPECT_EQ(upsample_nearest(in, 2), expected);
    EXPECT_EQ(upsample_nearest(in, 1), in);
    EXPECT_THROW(upsample_nearest(in, 0), ArgumentError);
}

TEST(Upsample, BackwardSumsEachBlock) {
    std::mt19937_64 rng(23);
    const Tensor G = random_tensor({6, 9, 2}, rng);
    const Tensor g = upsample_nearest_backward(G, 3);
    ASSERT_EQ(g.shape(), (Shape{2, 3, 2}));
    for (std::size_t y = 0; y < 2; ++y)
        for (std::size_t x = 0; x < 3; ++x)
            for (std::size_t c = 0; c < 2; ++c) {
                double s = 0;
                for (std::size_t dy = 0; dy < 3; ++dy)
                    for (std::size_t dx = 0; dx < 3; ++dx) s += G.at(3 * y + dy, 3 * x + dx, c);
                EXPECT_NEAR(g.at(y, x, c), s, 1e-14);
            }
}

TEST(Dense, IdentityAndZeroWeight) {
    const Tensor x = Tensor::from({0.5, -2, 3});
    Tensor eye({3, 3});
    for (std::size_t i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
    EXPECT_EQ(dense(x, eye, Tensor({3})), x);
    const Tensor b = Tensor::from({7, 8});
    EXPECT_EQ(dense(x, Tensor({3, 2}), b), b);
    EXPECT_THROW(dense(x, Tensor({4, 2}), b), ShapeError);
    EXPECT_THROW(dense(x, Tensor({3, 2}), Tensor({3})), ShapeError);
}

TEST(Dense, MatchesDotProductLoopAndIsNearExactUnderFiniteDifferences) {
    std::mt19937_64 rng(29);
    Tensor x = random_tensor({6}, rng);
    Tensor w = random_tensor({6, 4}, rng);
    Tensor b = random_tensor({4}, rng);
    const Tensor out = dense(x, w, b);
    for (std::size_t j = 0; j < 4; ++j) {
        double s = b[j];
        for (std::size_t i = 0; i < 6; ++i) s += x[i] * w.at(i, j);
        EXPECT_NEAR(out[j], s, 1e-15);
    }

    const Tensor G = random_tensor({4}, rng);
    auto loss = [&] { return dot(G, dense(x, w, b)); };
    const auto g = dense_backward(x, w, G);
    for (auto [values, analytic] : {std::pair{x.values(), g.input.values()}, std::pair{w.values(), g.weight.values()},
                                    std::pair{b.values(), g.bias.values()}}) {
        const auto report = grad_check(loss, values, analytic, 1e-7);
        EXPECT_TRUE(report.passed) << report.summary();
    }
}

TEST(Softmax2, Examples) {
    const Tensor p = softmax2(Tensor({1, 2, 2}, std::vector<double>{0, 0, 1000, 0}));
    EXPECT_EQ(p[0], 0.5);
    EXPECT_EQ(p[1], 0.5);
    EXPECT_NEAR(p[2], 1.0, 1e-300);
    EXPECT_NEAR(p[3], 0.0, 1e-300);
    EXPECT_TRUE(p.all_finite());
}

TEST(Softmax2, MatchesNaiveOracleSumsToOneAndIgnoresShift) {
    std::mt19937_64 rng(31);
    Tensor logits = random_tensor({5, 4, 2}, rng, -10, 10);
    const Tensor p = softmax2(logits);
    Tensor shifted = logits;
    for (double& v : shifted.values()) v += 123.25;
    const Tensor q = softmax2(shifted);
    for (std::size_t i = 0; i < p.size(); i += 2) {
        const double e0 = std::exp(logits[i]), e1 = std::exp(logits[i + 1]);
        EXPECT_NEAR(p[i], e0 / (e0 + e1), 1e-12);
        EXPECT_NEAR(p[i + 1], e1 / (e0 + e1), 1e-12);
        EXPECT_NEAR(p[i] + p[i + 1], 1.0, 1e-12);
        EXPECT_NEAR(q[i], p[i], 1e-12);
    }
    EXPECT_THROW(softmax2(Tensor({2, 2, 3})), ShapeError);
}

TEST(Softmax2, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(37);
    Tensor logits = random_tensor({3, 3, 2}, rng, -2, 2);
    const Tensor G = random_tensor({3, 3, 2}, rng);
    auto loss = [&] { return dot(G, softmax2(logits)); };
    const Tensor g = softmax2_backward(softmax2(logits), G);
    EXPECT_TRUE(grad_check(loss, logits.values(), g.values(), 1e-4, {.floor = 1e-5}).passed);
}

TEST(BatchNorm, TrainModeStandardizesEachChannel) {
    std::mt19937_64 rng(41);
    // Wide inputs make eps/var ~ 3e-11, so the variance lands within 1e-9 of 1.
    const Tensor in = random_tensor({6, 5, 3}, rng, -1000, 1000);
    BatchNormStats stats;
    const Tensor out = batchnorm(in, Tensor({3}, 1.0), Tensor({3}), Mode::Train, stats);
    for (std::size_t c = 0; c < 3; ++c) {
        double m = 0, v = 0;
        for (std::size_t i = c; i < out.size(); i += 3) m += out[i];
        m /= 30;
        for (std::size_t i = c; i < out.size(); i += 3) v += (out[i] - m) * (out[i] - m);
        v /= 30;
        EXPECT_NEAR(m, 0.0, 1e-9);
        EXPECT_NEAR(v, 1.0, 1e-9);
    }
}

TEST(BatchNorm, NormalizedVarianceIsVarOverVarPlusEpsilon) {
    std::mt19937_64 rng(43);
    const Tensor in = random_tensor({4, 4, 1}, rng, -0.01, 0.01);
    double m = 0, v = 0;
    for (double x : in.values()) m += x;
    m /= 16;
    for (double x : in.values()) v += (x - m) * (x - m);
    v /= 16;
    BatchNormStats stats;
    const Tensor out = batchnorm(in, Tensor({1}, 1.0), Tensor({1}), Mode::Train, stats);
    double ov = 0;
    for (double x : out.values()) ov += x * x;
    EXPECT_NEAR(ov / 16, v / (v + kBatchNormEpsilon), 1e-12);
}

TEST(BatchNorm, ZeroGammaGivesBeta) {
    std::mt19937_64 rng(47);
    BatchNormStats stats;
    const Tensor out = batchnorm(random_tensor({3, 3, 2}, rng), Tensor({2}), Tensor::from({0.25, -4}), Mode::Train, stats);
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out[i], i % 2 ? -4.0 : 0.25);
}

TEST(BatchNorm, InferenceWithoutStatisticsIsAStateError) {
    BatchNormStats stats;
    EXPECT_THROW(batchnorm(Tensor({2, 2, 1}), Tensor({1}, 1.0), Tensor({1}), Mode::Infer, stats), StateError);
}

TEST(BatchNorm, RunningStatisticsUseMomentum) {
    BatchNormStats stats;
    const Tensor g({1}, 1.0), b({1});
    batchnorm(Tensor({2, 1, 1}, std::vector<double>{1, 3}), g, b, Mode::Train, stats);
    EXPECT_DOUBLE_EQ(stats.mean[0], 2.0);
    EXPECT_DOUBLE_EQ(stats.var[0], 1.0);
    batchnorm(Tensor({2, 1, 1}, std::vector<double>{10, 14}), g, b, Mode::Train, stats);
    EXPECT_DOUBLE_EQ(stats.mean[0], 0.9 * 2.0 + 0.1 * 12.0);
    EXPECT_DOUBLE_EQ(stats.var[0], 0.9 * 1.0 + 0.1 * 4.0);

    const Tensor out = batchnorm(Tensor({1, 1, 1}, 5.0), g, b, Mode::Infer, stats);
    EXPECT_NEAR(out[0], (5.0 - 3.0) / std::sqrt(1.3 + kBatchNormEpsilon), 1e-15);
}

TEST(BatchNorm, TrainBackwardMatchesFiniteDifferencesOverABatch) {
    std::mt19937_64 rng(53);
    std::vector<Tensor> batch{random_tensor({3, 3, 2}, rng), random_tensor({3, 3, 2}, rng)};
    Tensor gamma = random_tensor({2}, rng, 0.5, 1.5), beta = random_tensor({2}, rng);
    const std::vector<Tensor> G{random_tensor({3, 3, 2}, rng), random_tensor({3, 3, 2}, rng)};
    auto loss = [&] {
        BatchNormStats s;
        const auto out = batchnorm(batch, gamma, beta, Mode::Train, s);
        return dot(G[0], out[0]) + dot(G[1], out[1]);
    };
    BatchNormStats s;
    BatchNormCache cache;
    batchnorm(batch, gamma, beta, Mode::Train, s, &cache);
    const auto g = batchnorm_backward(G, gamma, cache);
    const GradCheckOptions opts{.floor = 1e-5};
    EXPECT_TRUE(grad_check(loss, gamma.values(), g.gamma.values(), 1e-4, opts).passed);
    EXPECT_TRUE(grad_check(loss, beta.values(), g.beta.values(), 1e-4, opts).passed);
    for (std::size_t i = 0; i < 2; ++i) {
        const auto r = grad_check(loss, batch[i].values(), g.inputs[i].values(), 1e-4, opts);
        EXPECT_TRUE(r.passed) << r.summary();
    }
}

TEST(ChannelOps, ConcatAndSplitAreInverse) {
    std::mt19937_64 rng(59);
    const Tensor a = random_tensor({3, 3, 2}, rng), b = random_tensor({3, 3, 5}, rng);
    const Tensor ab = concat_channels(a, b);
    ASSERT_EQ(ab.shape(), (Shape{3, 3, 7}));
    EXPECT_EQ(ab.at(1, 2, 1), a.at(1, 2, 1));
    EXPECT_EQ(ab.at(1, 2, 4), b.at(1, 2, 2));
    const auto [x, y] = split_channels(ab, 2);
    EXPECT_EQ(x, a);
    EXPECT_EQ(y, b);
    EXPECT_THROW(concat_channels(a, Tensor({2, 3, 1})), ShapeError);
}
