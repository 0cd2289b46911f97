#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "floc/gradcheck.hpp"
#include "floc/lstm.hpp"
#include "support.hpp"

using namespace floc;
using floc::testing::dot;
using floc::testing::random_tensor;

namespace {

LstmParams random_params(std::size_t din, std::size_t h, std::mt19937_64& rng) {
    LstmParams p = LstmParams::zeros(din, h);
    for (Tensor* t : {&p.w_input, &p.w_forget, &p.w_output, &p.w_candidate, &p.b_input, &p.b_forget, &p.b_output,
                      &p.b_candidate})
        *t = random_tensor(t->shape(), rng);
    return p;
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

TEST(LstmCell, ZeroParametersHalveTheCell) {
    const LstmParams p = LstmParams::zeros(3, 4);
    LstmCellState prev = LstmCellState::zeros(4);
    prev.cell = Tensor::from({1.0, -2.0, 0.5, 4.0});
    prev.output = Tensor::from({0.3, 0.3, 0.3, 0.3});
    const auto next = lstm_cell_step(Tensor::from({1, 2, 3}), prev, p);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_DOUBLE_EQ(next.cell[i], 0.5 * prev.cell[i]);
        EXPECT_DOUBLE_EQ(next.output[i], 0.5 * std::tanh(0.5 * prev.cell[i]));
    }
}

TEST(LstmCell, ZeroStateAndParametersStayZero) {
    const auto next = lstm_cell_step(Tensor::from({5, -5}), LstmCellState::zeros(3), LstmParams::zeros(2, 3));
    for (double v : next.output.values()) EXPECT_EQ(v, 0.0);
    for (double v : next.cell.values()) EXPECT_EQ(v, 0.0);
}

TEST(LstmCell, MatchesGateEquationsWrittenOut) {
    std::mt19937_64 rng(4);
    const LstmParams p = random_params(2, 3, rng);
    LstmCellState prev{random_tensor({3}, rng), random_tensor({3}, rng)};
    const Tensor x = random_tensor({2}, rng);
    const auto next = lstm_cell_step(x, prev, p);
    const double concat[5] = {x[0], x[1], prev.output[0], prev.output[1], prev.output[2]};
    auto affine = [&](const Tensor& w, const Tensor& b, std::size_t j) {
        double s = b[j];
        for (std::size_t r = 0; r < 5; ++r) s += concat[r] * w.at(r, j);
        return s;
    };
    for (std::size_t j = 0; j < 3; ++j) {
        const double i = sigmoid(affine(p.w_input, p.b_input, j));
        const double f = sigmoid(affine(p.w_forget, p.b_forget, j));
        const double o = sigmoid(affine(p.w_output, p.b_output, j));
        const double cand = std::tanh(affine(p.w_candidate, p.b_candidate, j));
        const double c = f * prev.cell[j] + i * cand;
        EXPECT_NEAR(next.cell[j], c, 1e-15);
        EXPECT_NEAR(next.output[j], o * std::tanh(c), 1e-15);
    }
}

TEST(LstmCell, OutputBoundedByOne) {
    std::mt19937_64 rng(6);
    LstmParams p = random_params(4, 5, rng);
    for (double& v : p.w_candidate.values()) v *= 50;
    LstmCellState s = LstmCellState::zeros(5);
    for (int t = 0; t < 50; ++t) {
        s = lstm_cell_step(random_tensor({4}, rng, -20, 20), s, p);
        ASSERT_EQ(s.cell.shape(), s.output.shape());
        for (double v : s.output.values()) EXPECT_LE(std::abs(v), 1.0);
    }
}

TEST(LstmCell, ShapeMismatchRejected) {
    const LstmParams p = LstmParams::zeros(3, 2);
    EXPECT_THROW(lstm_cell_step(Tensor({4}), LstmCellState::zeros(2), p), ShapeError);
    EXPECT_THROW(lstm_cell_step(Tensor({3}), LstmCellState::zeros(3), p), ShapeError);
}

TEST(LstmSequence, BackpropThroughTimeMatchesFiniteDifferences) {
    std::mt19937_64 rng(8);
    LstmParams p = random_params(3, 4, rng);
    std::vector<Tensor> xs{random_tensor({3}, rng), random_tensor({3}, rng), random_tensor({3}, rng)};
    const std::vector<Tensor> G{random_tensor({4}, rng), random_tensor({4}, rng), random_tensor({4}, rng)};
    auto loss = [&] {
        const auto out = lstm_sequence(xs, p);
        double s = 0;
        for (std::size_t t = 0; t < 3; ++t) s += dot(G[t], out[t]);
        return s;
    };
    LstmSequenceCache cache;
    lstm_sequence(xs, p, &cache);
    LstmParams grads = LstmParams::zeros(3, 4);
    const auto dx = lstm_sequence_backward(cache, p, G, grads);

    const GradCheckOptions opts{.floor = 1e-5};
    const std::pair<Tensor*, Tensor*> pairs[] = {
        {&p.w_input, &grads.w_input},         {&p.w_forget, &grads.w_forget}, {&p.w_output, &grads.w_output},
        {&p.w_candidate, &grads.w_candidate}, {&p.b_input, &grads.b_input},   {&p.b_forget, &grads.b_forget},
        {&p.b_output, &grads.b_output},       {&p.b_candidate, &grads.b_candidate}};
    for (auto [param, grad] : pairs) {
        const auto r = grad_check(loss, param->values(), grad->values(), 1e-4, opts);
        EXPECT_TRUE(r.passed) << r.summary();
    }
    for (std::size_t t = 0; t < 3; ++t) EXPECT_TRUE(grad_check(loss, xs[t].values(), dx[t].values(), 1e-4, opts).passed);
}
