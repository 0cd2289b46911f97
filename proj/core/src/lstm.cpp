#include "floc/lstm.hpp"

#include <cmath>

namespace floc {

namespace {

double sigmoid(double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); }

// out[h] = b[h] + sum_k x[k] * W[k, h]
void affine(const Tensor& x, const Tensor& w, const Tensor& b, Tensor& out) {
    const std::size_t hidden = b.size();
    out = b;
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double v = x[k];
        const double* wr = w.data() + k * hidden;
        for (std::size_t h = 0; h < hidden; ++h) out[h] += v * wr[h];
    }
}

// gw += x^T d, dx += W d
void affine_backward(const Tensor& x, const Tensor& w, const Tensor& d, Tensor& gw, Tensor& gb, Tensor& dx) {
    const std::size_t hidden = d.size();
    for (std::size_t h = 0; h < hidden; ++h) gb[h] += d[h];
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double v = x[k];
        const double* wr = w.data() + k * hidden;
        double* gr = gw.data() + k * hidden;
        double acc = 0.0;
        for (std::size_t h = 0; h < hidden; ++h) {
            gr[h] += v * d[h];
            acc += wr[h] * d[h];
        }
        dx[k] += acc;
    }
}

}  // namespace

LstmParams LstmParams::zeros(std::size_t input_size, std::size_t hidden) {
    const Shape ws{input_size + hidden, hidden};
    const Shape bs{hidden};
    return {Tensor(ws), Tensor(ws), Tensor(ws), Tensor(ws), Tensor(bs), Tensor(bs), Tensor(bs), Tensor(bs)};
}

LstmCellState LstmCellState::zeros(std::size_t hidden) { return {Tensor({hidden}), Tensor({hidden})}; }

LstmCellState lstm_cell_step(const Tensor& x, const LstmCellState& prev, const LstmParams& params,
                             LstmStepCache* cache) {
    require_rank(x, 1, "lstm_cell_step input");
    const std::size_t hidden = params.hidden();
    const std::size_t din = x.size();
    const Shape wshape{din + hidden, hidden};
    require_shape(params.w_input, wshape, "lstm input-gate weight");
    require_shape(params.w_forget, wshape, "lstm forget-gate weight");
    require_shape(params.w_output, wshape, "lstm output-gate weight");
    require_shape(params.w_candidate, wshape, "lstm candidate weight");
    require_shape(params.b_forget, {hidden}, "lstm forget-gate bias");
    require_shape(params.b_output, {hidden}, "lstm output-gate bias");
    require_shape(params.b_candidate, {hidden}, "lstm candidate bias");
    require_shape(prev.cell, {hidden}, "lstm previous cell");
    require_shape(prev.output, {hidden}, "lstm previous output");

    Tensor concat({din + hidden});
    std::copy_n(x.data(), din, concat.data());
    std::copy_n(prev.output.data(), hidden, concat.data() + din);

    Tensor i, f, o, g;
    affine(concat, params.w_input, params.b_input, i);
    affine(concat, params.w_forget, params.b_forget, f);
    affine(concat, params.w_output, params.b_output, o);
    affine(concat, params.w_candidate, params.b_candidate, g);
    LstmCellState next{Tensor({hidden}), Tensor({hidden})};
    Tensor cell_tanh({hidden});
    for (std::size_t h = 0; h < hidden; ++h) {
        i[h] = sigmoid(i[h]);
        f[h] = sigmoid(f[h]);
        o[h] = sigmoid(o[h]);
        g[h] = std::tanh(g[h]);
        next.cell[h] = f[h] * prev.cell[h] + i[h] * g[h];
        cell_tanh[h] = std::tanh(next.cell[h]);
        next.output[h] = o[h] * cell_tanh[h];
    }
    if (cache) {
        *cache = {std::move(concat), std::move(i), std::move(f), std::move(o),
                  std::move(g),      prev.cell,    std::move(cell_tanh)};
    }
    return next;
}

LstmStepGrads lstm_cell_step_backward(const LstmStepCache& cache, const LstmParams& params, const Tensor& d_cell,
                                      const Tensor& d_output, LstmParams& param_grads) {
    const std::size_t hidden = params.hidden();
    require_shape(d_cell, {hidden}, "lstm backward d_cell");
    require_shape(d_output, {hidden}, "lstm backward d_output");
    Tensor di({hidden}), df({hidden}), dox({hidden}), dg({hidden});
    Tensor dprev_cell({hidden});
    for (std::size_t h = 0; h < hidden; ++h) {
        const double th = cache.cell_tanh[h];
        const double dz = d_output[h];
        const double dc = d_cell[h] + dz * cache.output_gate[h] * (1.0 - th * th);
        const double i = cache.input_gate[h], f = cache.forget_gate[h], o = cache.output_gate[h];
        const double g = cache.candidate[h];
        dox[h] = dz * th * o * (1.0 - o);
        di[h] = dc * g * i * (1.0 - i);
        df[h] = dc * cache.prev_cell[h] * f * (1.0 - f);
        dg[h] = dc * i * (1.0 - g * g);
        dprev_cell[h] = dc * f;
    }
    Tensor dconcat(cache.concat.shape());
    affine_backward(cache.concat, params.w_input, di, param_grads.w_input, param_grads.b_input, dconcat);
    affine_backward(cache.concat, params.w_forget, df, param_grads.w_forget, param_grads.b_forget, dconcat);
    affine_backward(cache.concat, params.w_output, dox, param_grads.w_output, param_grads.b_output, dconcat);
    affine_backward(cache.concat, params.w_candidate, dg, param_grads.w_candidate, param_grads.b_candidate, dconcat);

    const std::size_t din = cache.concat.size() - hidden;
    LstmStepGrads out{Tensor({din}), std::move(dprev_cell), Tensor({hidden})};
    std::copy_n(dconcat.data(), din, out.input.data());
    std::copy_n(dconcat.data() + din, hidden, out.prev_output.data());
    return out;
}

std::vector<Tensor> lstm_sequence(const std::vector<Tensor>& inputs, const LstmParams& params,
                                  LstmSequenceCache* cache) {
    LstmCellState state = LstmCellState::zeros(params.hidden());
    std::vector<Tensor> outputs;
    outputs.reserve(inputs.size());
    if (cache) cache->steps.assign(inputs.size(), {});
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        state = lstm_cell_step(inputs[t], state, params, cache ? &cache->steps[t] : nullptr);
        outputs.push_back(state.output);
    }
    return outputs;
}

std::vector<Tensor> lstm_sequence_backward(const LstmSequenceCache& cache, const LstmParams& params,
                                           const std::vector<Tensor>& d_outputs, LstmParams& param_grads) {
    const std::size_t steps = cache.steps.size();
    if (d_outputs.size() != steps) throw ShapeError("lstm_sequence_backward: gradient count does not match steps");
    const std::size_t hidden = params.hidden();
    Tensor d_cell({hidden}), d_out_carry({hidden});
    std::vector<Tensor> d_inputs(steps);
    for (std::size_t t = steps; t-- > 0;) {
        Tensor d_out = d_outputs[t];
        for (std::size_t h = 0; h < hidden; ++h) d_out[h] += d_out_carry[h];
        auto g = lstm_cell_step_backward(cache.steps[t], params, d_cell, d_out, param_grads);
        d_inputs[t] = std::move(g.input);
        d_cell = std::move(g.prev_cell);
        d_out_carry = std::move(g.prev_output);
    }
    return d_inputs;
}

}  // namespace floc
