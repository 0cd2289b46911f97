#pragma once

// Forward and hand-written backward passes for the layer primitives used by
// the localization network. Feature maps are [H, W, C] tensors.

#include <cstddef>
#include <span>
#include <vector>

#include "floc/tensor.hpp"

namespace floc {

enum class Mode { Train, Infer };

/// Same-size 2-D convolution, stride 1, zero padding (k-1)/2.
/// kernel is [k, k, Cin, Cout] with k odd; bias is [Cout].
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias);

struct Conv2dGrads {
    Tensor kernel;
    Tensor bias;
    Tensor input;
};

Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& upstream);

struct MaxPoolResult {
    Tensor output;
    /// Flat index into the input for every output element.
    std::vector<std::size_t> argmax;
};

/// 2x2 max pooling with stride 2. Ties go to the first element of the
/// window in row-major order.
MaxPoolResult maxpool2(const Tensor& input);
Tensor maxpool2_backward(const Tensor& upstream, std::span<const std::size_t> argmax, const Shape& input_shape);

Tensor relu(const Tensor& input);
/// Passes upstream where input > 0; the gradient at exactly 0 is 0.
Tensor relu_backward(const Tensor& input, const Tensor& upstream);

Tensor upsample_nearest(const Tensor& input, std::size_t factor);
Tensor upsample_nearest_backward(const Tensor& upstream, std::size_t factor);

/// output = input . weight + bias with input [Din], weight [Din, Dout].
Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias);

struct DenseGrads {
    Tensor weight;
    Tensor bias;
    Tensor input;
};

DenseGrads dense_backward(const Tensor& input, const Tensor& weight, const Tensor& upstream);

/// Per-pixel two-class softmax over the last axis of an [H, W, 2] tensor.
Tensor softmax2(const Tensor& logits);
/// Gradient w.r.t. logits given the softmax output and upstream gradient.
Tensor softmax2_backward(const Tensor& probs, const Tensor& upstream);

// ---------------------------------------------------------------------------
// Batch normalization over the last (channel) axis. A batch is a list of
// same-shaped tensors; statistics pool every element of a channel across the
// whole batch.

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

struct BatchNormStats {
    Tensor mean;
    Tensor var;
    bool initialized = false;
};

struct BatchNormCache {
    Mode mode = Mode::Train;
    std::vector<Tensor> normalized;
    Tensor inv_std;
};

std::vector<Tensor> batchnorm(std::span<const Tensor> batch, const Tensor& gamma, const Tensor& beta, Mode mode,
                              BatchNormStats& stats, BatchNormCache* cache = nullptr);

/// Single-sample convenience overload.
Tensor batchnorm(const Tensor& input, const Tensor& gamma, const Tensor& beta, Mode mode, BatchNormStats& stats,
                 BatchNormCache* cache = nullptr);

struct BatchNormGrads {
    Tensor gamma;
    Tensor beta;
    std::vector<Tensor> inputs;
};

BatchNormGrads batchnorm_backward(std::span<const Tensor> upstream, const Tensor& gamma, const BatchNormCache& cache);

/// Elementwise a += b.
void accumulate(Tensor& into, const Tensor& delta);

/// Channel concatenation of [H, W, Ca] and [H, W, Cb].
Tensor concat_channels(const Tensor& a, const Tensor& b);
/// Inverse of concat_channels for gradients: splits off the first `first_channels`.
std::pair<Tensor, Tensor> split_channels(const Tensor& t, std::size_t first_channels);

}  // namespace floc
