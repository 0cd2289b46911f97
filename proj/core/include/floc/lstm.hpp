#pragma once

#include <cstddef>
#include <random>
#include <vector>

#include "floc/tensor.hpp"

namespace floc {

/// Gate parameters of one LSTM layer. Every gate pre-activation is an affine
/// map of the concatenation [x_t, z_{t-1}]: weights are [Din + H, H].
struct LstmParams {
    Tensor w_input, w_forget, w_output, w_candidate;
    Tensor b_input, b_forget, b_output, b_candidate;

    static LstmParams zeros(std::size_t input_size, std::size_t hidden);
    std::size_t input_size() const { return w_input.dim(0) - hidden(); }
    std::size_t hidden() const { return b_input.size(); }
};

struct LstmCellState {
    Tensor cell;
    Tensor output;

    static LstmCellState zeros(std::size_t hidden);
};

/// Intermediate values of one step, kept for backpropagation through time.
struct LstmStepCache {
    Tensor concat;
    Tensor input_gate, forget_gate, output_gate, candidate;
    Tensor prev_cell;
    Tensor cell_tanh;
};

/// C_t = f o C_{t-1} + i o C~_t;  z_t = o o tanh(C_t).
LstmCellState lstm_cell_step(const Tensor& x, const LstmCellState& prev, const LstmParams& params,
                             LstmStepCache* cache = nullptr);

struct LstmStepGrads {
    Tensor input;
    Tensor prev_cell;
    Tensor prev_output;
};

/// Backward through one step. Parameter gradients are accumulated into
/// `param_grads`, which must be shaped like the parameters.
LstmStepGrads lstm_cell_step_backward(const LstmStepCache& cache, const LstmParams& params, const Tensor& d_cell,
                                      const Tensor& d_output, LstmParams& param_grads);

struct LstmSequenceCache {
    std::vector<LstmStepCache> steps;
};

/// Runs one layer over a sequence from a zero initial state.
std::vector<Tensor> lstm_sequence(const std::vector<Tensor>& inputs, const LstmParams& params,
                                  LstmSequenceCache* cache = nullptr);

/// BPTT for one layer. Returns the gradient w.r.t. each input and accumulates
/// parameter gradients.
std::vector<Tensor> lstm_sequence_backward(const LstmSequenceCache& cache, const LstmParams& params,
                                           const std::vector<Tensor>& d_outputs, LstmParams& param_grads);

}  // namespace floc
