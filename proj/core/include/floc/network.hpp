#pragma once

// The localization network: an LSTM branch over Hilbert-ordered resampling
// descriptors, a residual convolutional encoder, channel fusion and an
// upsampling decoder ending in a two-class per-pixel softmax.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "floc/checkpoint.hpp"
#include "floc/hilbert.hpp"
#include "floc/layers.hpp"
#include "floc/lstm.hpp"
#include "floc/resampling.hpp"
#include "floc/tensor.hpp"

namespace floc {

struct NetworkConfig {
    std::size_t input_side = 256;
    std::size_t patch_grid = 8;
    std::size_t lstm_hidden = 128;
    std::size_t lstm_layers = 2;
    std::size_t timesteps = 64;
    std::size_t projection_width = 64;
    std::vector<std::size_t> encoder_channels{32, 64, 128, 256};
    std::vector<std::size_t> decoder_channels{64, 16};
    std::vector<std::size_t> decoder_upsample_factors{4, 4};
    FeatureConfig features = FeatureConfig::full();

    static NetworkConfig full();
    static NetworkConfig desk();

    /// Throws ArgumentError naming the first violated invariant.
    void validate() const;
    std::size_t patch_size() const { return input_side / patch_grid; }
    std::size_t fusion_side() const { return input_side >> encoder_channels.size(); }
    std::size_t lstm_upsample() const { return fusion_side() / patch_grid; }
    std::size_t fused_channels() const { return encoder_channels.back() + projection_width; }
    std::size_t grid_order() const;

    nlohmann::json to_json() const;
    /// Fields absent from `j` keep their value in `base`.
    static NetworkConfig from_json(const nlohmann::json& j, NetworkConfig base = full());
    bool operator==(const NetworkConfig&) const = default;
};

/// Learnable tensors keyed by slot name plus batch-norm running statistics.
struct ModelParams {
    NamedTensors tensors;
    std::map<std::string, BatchNormStats> batchnorm;

    Tensor& operator[](const std::string& name);
    const Tensor& operator[](const std::string& name) const;

    /// Learnable tensors followed by "<bn>.running_mean" / "<bn>.running_var"
    /// for every initialized batch-norm layer.
    NamedTensors to_checkpoint() const;
    static ModelParams from_checkpoint(const NetworkConfig& config, const NamedTensors& tensors);
    bool all_finite() const;
};

/// Expected shape of every learnable slot, in creation order.
std::vector<std::pair<std::string, Shape>> parameter_layout(const NetworkConfig& config);
/// Names of the batch-norm layers.
std::vector<std::string> batchnorm_layers(const NetworkConfig& config);

/// Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases, gamma 1,
/// beta 0, LSTM forget-gate bias 1.
ModelParams initialize_params(const NetworkConfig& config, std::uint64_t seed);
/// Same shapes with every value zero (gamma included).
ModelParams zero_params(const NetworkConfig& config);
NamedTensors zeros_like(const NamedTensors& tensors);

LstmParams lstm_layer_params(const ModelParams& params, std::size_t layer);

// ---------------------------------------------------------------------------
// Branches. Each forward can fill a cache consumed by the matching backward.

struct LstmBranchCache {
    std::vector<Tensor> sequence_inputs;
    std::vector<LstmSequenceCache> layers;
    std::vector<Tensor> final_outputs;
};

/// `grid_features` holds one descriptor per patch in row-major grid order.
/// Descriptors pass through log(1 + v) before entering the LSTM.
/// Returns [grid, grid, projection_width].
Tensor lstm_branch(const std::vector<Tensor>& grid_features, const ModelParams& params, const NetworkConfig& config,
                   const HilbertOrdering& ordering, LstmBranchCache* cache = nullptr);
void lstm_branch_backward(const LstmBranchCache& cache, const Tensor& d_map, const ModelParams& params,
                          const NetworkConfig& config, const HilbertOrdering& ordering, NamedTensors& grads);

struct EncoderStageCache {
    std::vector<Tensor> input, conv1, bn1_out, relu1, bn2_out, sum;
    BatchNormCache bn1, bn2;
    std::vector<std::vector<std::size_t>> pool_argmax;
    Shape pool_input_shape;
};

struct EncoderCache {
    std::vector<EncoderStageCache> stages;
};

std::vector<Tensor> encoder(std::span<const Tensor> images, ModelParams& params, const NetworkConfig& config,
                            Mode mode, EncoderCache* cache = nullptr);
std::vector<Tensor> encoder_backward(const EncoderCache& cache, std::span<const Tensor> d_out,
                                     const ModelParams& params, const NetworkConfig& config, NamedTensors& grads);

/// Nearest-upsamples the LSTM map to the encoder's side, then concatenates
/// channels as [encoder, lstm].
Tensor fuse(const Tensor& encoder_map, const Tensor& lstm_map);
std::pair<Tensor, Tensor> fuse_backward(const Tensor& d_fused, std::size_t encoder_channels, std::size_t lstm_upsample);

struct DecoderStageCache {
    std::vector<Tensor> upsampled, bn_out;
    BatchNormCache bn;
};

struct DecoderCache {
    std::vector<DecoderStageCache> stages;
    std::vector<Tensor> head_input;
};

/// Returns per-pixel logits [S, S, 2].
std::vector<Tensor> decoder(std::span<const Tensor> fused, ModelParams& params, const NetworkConfig& config, Mode mode,
                            DecoderCache* cache = nullptr);
std::vector<Tensor> decoder_backward(const DecoderCache& cache, std::span<const Tensor> d_logits,
                                     const ModelParams& params, const NetworkConfig& config, NamedTensors& grads);

// ---------------------------------------------------------------------------
// Whole model.

struct ForwardCache {
    std::vector<LstmBranchCache> lstm;
    EncoderCache encoder;
    DecoderCache decoder;
};

struct ForwardResult {
    std::vector<Tensor> logits;
    std::vector<Tensor> probs;
};

class Model {
public:
    Model(NetworkConfig config, ModelParams params);

    static Model initialize(const NetworkConfig& config, std::uint64_t seed);

    const NetworkConfig& config() const noexcept { return config_; }
    const HilbertOrdering& ordering() const noexcept { return ordering_; }
    ModelParams& params() noexcept { return params_; }
    const ModelParams& params() const noexcept { return params_; }

    /// Resampling descriptors of every grid patch (row-major).
    std::vector<Tensor> features(const Tensor& image) const;

    /// Batch forward. `features` may be empty, in which case descriptors are
    /// computed from the images. Train mode updates batch-norm running stats.
    ForwardResult forward(std::span<const Tensor> images, std::span<const std::vector<Tensor>> features, Mode mode,
                          ForwardCache* cache = nullptr);

    /// Infer-mode probability map [S, S, 2] for one image.
    Tensor predict(const Tensor& image);

    /// Parameter gradients given d loss / d logits per sample.
    NamedTensors backward(const ForwardCache& cache, std::span<const Tensor> d_logits) const;

    void save(const std::filesystem::path& checkpoint) const;
    static Model load(const std::filesystem::path& checkpoint, const NetworkConfig& config);

private:
    NetworkConfig config_;
    ModelParams params_;
    HilbertOrdering ordering_;
};

/// softmax2(decoder(fuse(encoder(image), lstm_branch(features(image))))).
Tensor model_forward(const Tensor& image, Model& model, Mode mode);

}  // namespace floc
