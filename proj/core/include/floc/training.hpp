#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "floc/checkpoint.hpp"
#include "floc/network.hpp"
#include "floc/tensor.hpp"

namespace floc {

struct LabeledSample {
    Tensor image;  // [S, S, 3] in [0, 1]
    Tensor mask;   // [S, S], 1 = manipulated
    std::string source_id;
    std::string split;
};

struct SplitIndices {
    std::vector<std::size_t> train, validation, test;
};

/// Seeded 70/5/25 partition of n items, sizes by largest-remainder rounding.
SplitIndices split_indices(std::size_t n, std::uint64_t seed);

template <typename T>
struct DatasetSplit {
    std::vector<T> train, validation, test;
};

template <typename T>
DatasetSplit<T> split_dataset(const std::vector<T>& samples, std::uint64_t seed) {
    const auto idx = split_indices(samples.size(), seed);
    DatasetSplit<T> out;
    for (auto i : idx.train) out.train.push_back(samples[i]);
    for (auto i : idx.validation) out.validation.push_back(samples[i]);
    for (auto i : idx.test) out.test.push_back(samples[i]);
    return out;
}

/// Four corner crops then the centre crop, image and mask cut jointly.
std::vector<LabeledSample> crop_augment(const LabeledSample& sample, std::size_t crop_side);

/// Bilinear image / nearest-thresholded mask resize to the network input side.
LabeledSample prepare_sample(const LabeledSample& sample, std::size_t side);

/// w_c = (1/f_c) / sum_k (1/f_k) over pixel frequencies of the masks.
Tensor class_weights(std::span<const Tensor> masks);

inline constexpr double kProbabilityFloor = 1e-12;

/// -(1/M) sum_m w[y_m] log p(y_m), log clamped below at 1e-12.
double weighted_cross_entropy(const Tensor& probs, const Tensor& mask, const Tensor& weights);

/// Gradient of weighted_cross_entropy w.r.t. the logits feeding softmax2:
/// w[y_m] (p_m - onehot(y_m)) / M.
Tensor weighted_cross_entropy_logit_grad(const Tensor& probs, const Tensor& mask, const Tensor& weights);

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct OptimizerState {
    NamedTensors first_moment;
    NamedTensors second_moment;
    std::uint64_t step = 0;
};

/// One bias-corrected Adam update. Throws NumericError naming the parameter
/// when a gradient is non-finite (parameters are left untouched).
void adam_step(NamedTensors& params, const NamedTensors& grads, OptimizerState& state, const AdamConfig& config);

struct TrainConfig {
    AdamConfig adam;
    std::size_t batch_size = 4;
    std::size_t iterations = 1000;
    std::uint64_t seed = 0;
    std::size_t checkpoint_every = 100;
    /// Empty: derived from the training masks.
    Tensor class_weights;
    /// When set, periodic and best checkpoints are written here.
    std::optional<std::filesystem::path> checkpoint_dir;

    static TrainConfig full() { return {}; }
    static TrainConfig desk();
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j, TrainConfig base);
    void validate() const;
};

struct TrainResult {
    std::vector<double> loss_history;
    /// (iteration, validation loss) at each checkpoint.
    std::vector<std::pair<std::size_t, double>> validation_history;
    NamedTensors best_checkpoint;
    double best_validation_loss = 0.0;
    std::size_t iterations_run = 0;
    bool diverged = false;
    bool stopped_early = false;
};

/// Called after every checkpoint; returning false stops training.
using TrainMonitor = std::function<bool(std::size_t iteration, Model& model, const TrainResult& progress)>;

/// Mini-batch Adam on weighted cross-entropy. Batches come from a seeded
/// per-epoch shuffle. On a non-finite loss the model is restored to the last
/// good checkpoint and `diverged` is set.
TrainResult train(Model& model, const std::vector<LabeledSample>& train_set,
                  const std::vector<LabeledSample>& validation_set, const TrainConfig& config,
                  const TrainMonitor& monitor = {});

/// Mean weighted cross-entropy in infer mode.
double evaluate_loss(Model& model, const std::vector<LabeledSample>& samples, const Tensor& weights);

/// Loss history as CSV: iteration,train_loss,validation_loss.
void write_loss_csv(std::ostream& out, const TrainResult& result);

struct ManifestRecord {
    std::string image;
    std::string mask;
    std::string split;
    std::string source_id;
    nlohmann::json extra = nlohmann::json::object();
};

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path);
std::string manifest_line(const ManifestRecord& record);

}  // namespace floc
