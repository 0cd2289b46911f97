#include "floc/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <ostream>

#include "floc/image.hpp"

namespace floc {

SplitIndices split_indices(std::size_t n, std::uint64_t seed) {
    if (n == 0) throw ArgumentError("split_dataset: no samples");
    constexpr double kFractions[3] = {0.70, 0.05, 0.25};
    std::size_t sizes[3];
    double remainders[3];
    std::size_t assigned = 0;
    for (int k = 0; k < 3; ++k) {
        // Work in hundredths to avoid 0.7 * 20 = 13.999... style floor errors.
        const std::size_t scaled = n * static_cast<std::size_t>(std::lround(kFractions[k] * 100.0));
        sizes[k] = scaled / 100;
        remainders[k] = static_cast<double>(scaled % 100);
        assigned += sizes[k];
    }
    int order[3] = {0, 1, 2};
    std::stable_sort(order, order + 3, [&](int a, int b) { return remainders[a] > remainders[b]; });
    for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++sizes[order[i % 3]];

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);
    SplitIndices out;
    out.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(sizes[0]));
    out.validation.assign(perm.begin() + static_cast<std::ptrdiff_t>(sizes[0]),
                          perm.begin() + static_cast<std::ptrdiff_t>(sizes[0] + sizes[1]));
    out.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(sizes[0] + sizes[1]), perm.end());
    return out;
}

std::vector<LabeledSample> crop_augment(const LabeledSample& sample, std::size_t crop_side) {
    require_rank(sample.image, 3, "crop_augment image");
    const std::size_t h = sample.image.dim(0), w = sample.image.dim(1);
    require_shape(sample.mask, {h, w}, "crop_augment mask");
    if (crop_side == 0 || crop_side > h || crop_side > w) {
        throw ArgumentError("crop_augment: crop side " + std::to_string(crop_side) + " exceeds image " +
                            shape_to_string(sample.image.shape()));
    }
    const std::pair<std::size_t, std::size_t> origins[5] = {
        {0, 0}, {0, w - crop_side}, {h - crop_side, 0}, {h - crop_side, w - crop_side},
        {(h - crop_side) / 2, (w - crop_side) / 2}};
    std::vector<LabeledSample> out;
    for (const auto& [top, left] : origins) {
        out.push_back({crop(sample.image, top, left, crop_side, crop_side),
                       crop(sample.mask, top, left, crop_side, crop_side), sample.source_id, sample.split});
    }
    return out;
}

LabeledSample prepare_sample(const LabeledSample& sample, std::size_t side) {
    LabeledSample out = sample;
    if (sample.image.dim(0) != side || sample.image.dim(1) != side) {
        out.image = resize_bilinear(sample.image, side, side);
        out.mask = resize_mask(sample.mask, side, side);
    }
    return out;
}

Tensor class_weights(std::span<const Tensor> masks) {
    double counts[2] = {0.0, 0.0};
    for (const auto& m : masks) {
        for (double v : m.values()) {
            if (v == 0.0) {
                counts[0] += 1.0;
            } else if (v == 1.0) {
                counts[1] += 1.0;
            } else {
                throw ArgumentError("class_weights: mask is not binary");
            }
        }
    }
    static const char* const kNames[2] = {"non-manipulated", "manipulated"};
    for (int c = 0; c < 2; ++c) {
        if (counts[c] == 0.0) throw ArgumentError(std::string("class_weights: no pixels of class ") + kNames[c]);
    }
    const double total = counts[0] + counts[1];
    const double inv0 = total / counts[0], inv1 = total / counts[1];
    return Tensor::from({inv0 / (inv0 + inv1), inv1 / (inv0 + inv1)});
}

namespace {

void check_loss_inputs(const Tensor& probs, const Tensor& mask, const Tensor& weights) {
    require_rank(probs, 3, "cross entropy probabilities");
    if (probs.dim(2) != 2) throw ShapeError("cross entropy: probabilities need 2 channels");
    require_shape(mask, {probs.dim(0), probs.dim(1)}, "cross entropy mask");
    require_shape(weights, {2}, "cross entropy weights");
    if (!is_binary_mask(mask)) throw ArgumentError("cross entropy: mask is not binary");
}

}  // namespace

double weighted_cross_entropy(const Tensor& probs, const Tensor& mask, const Tensor& weights) {
    check_loss_inputs(probs, mask, weights);
    double sum = 0.0;
    for (std::size_t m = 0; m < mask.size(); ++m) {
        const auto cls = static_cast<std::size_t>(mask[m]);
        sum += weights[cls] * std::log(std::max(probs[2 * m + cls], kProbabilityFloor));
    }
    return -sum / static_cast<double>(mask.size());
}

Tensor weighted_cross_entropy_logit_grad(const Tensor& probs, const Tensor& mask, const Tensor& weights) {
    check_loss_inputs(probs, mask, weights);
    const double inv_m = 1.0 / static_cast<double>(mask.size());
    Tensor g(probs.shape());
    for (std::size_t m = 0; m < mask.size(); ++m) {
        const auto cls = static_cast<std::size_t>(mask[m]);
        const double w = weights[cls] * inv_m;
        g[2 * m] = w * (probs[2 * m] - (cls == 0 ? 1.0 : 0.0));
        g[2 * m + 1] = w * (probs[2 * m + 1] - (cls == 1 ? 1.0 : 0.0));
    }
    return g;
}

void adam_step(NamedTensors& params, const NamedTensors& grads, OptimizerState& state, const AdamConfig& config) {
    for (const auto& [name, p] : params) {
        auto it = grads.find(name);
        if (it == grads.end()) throw ArgumentError("adam_step: missing gradient for " + name);
        require_shape(it->second, p.shape(), "adam_step gradient " + name);
        if (!it->second.all_finite()) throw NumericError("adam_step: non-finite gradient for parameter " + name);
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(config.beta1, t);
    const double c2 = 1.0 - std::pow(config.beta2, t);
    for (auto& [name, p] : params) {
        const Tensor& g = grads.at(name);
        auto& m = state.first_moment.try_emplace(name, p.shape()).first->second;
        auto& v = state.second_moment.try_emplace(name, p.shape()).first->second;
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
            const double m_hat = m[i] / c1;
            const double v_hat = v[i] / c2;
            p[i] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + config.epsilon);
        }
    }
}

TrainConfig TrainConfig::desk() {
    TrainConfig c;
    c.batch_size = 2;
    return c;
}

void TrainConfig::validate() const {
    if (batch_size == 0) throw ArgumentError("train config: batch_size must be >= 1");
    if (checkpoint_every == 0) throw ArgumentError("train config: checkpoint_every must be >= 1");
    if (adam.learning_rate < 0.0) throw ArgumentError("train config: negative learning rate");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
        throw ArgumentError("train config: Adam betas must lie in [0, 1)");
    }
    if (adam.epsilon <= 0.0) throw ArgumentError("train config: epsilon must be positive");
    if (!class_weights.empty()) {
        require_shape(class_weights, {2}, "train config class weights");
        const double w0 = class_weights[0], w1 = class_weights[1];
        if (!(w0 > 0.0 && w0 < 1.0 && w1 > 0.0 && w1 < 1.0) || std::abs(w0 + w1 - 1.0) > 1e-12) {
            throw ArgumentError("train config: class weights must lie in (0,1) and sum to 1");
        }
    }
}

nlohmann::json TrainConfig::to_json() const {
    nlohmann::json j = {{"learning_rate", adam.learning_rate},
                        {"beta1", adam.beta1},
                        {"beta2", adam.beta2},
                        {"epsilon", adam.epsilon},
                        {"batch_size", batch_size},
                        {"iterations", iterations},
                        {"seed", seed},
                        {"checkpoint_every", checkpoint_every}};
    if (!class_weights.empty()) j["class_weights"] = {class_weights[0], class_weights[1]};
    return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j, TrainConfig c) {
    try {
        c.adam.learning_rate = j.value("learning_rate", c.adam.learning_rate);
        c.adam.beta1 = j.value("beta1", c.adam.beta1);
        c.adam.beta2 = j.value("beta2", c.adam.beta2);
        c.adam.epsilon = j.value("epsilon", c.adam.epsilon);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.iterations = j.value("iterations", c.iterations);
        c.seed = j.value("seed", c.seed);
        c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
        if (j.contains("class_weights")) {
            const auto w = j.at("class_weights").get<std::vector<double>>();
            c.class_weights = Tensor({w.size()}, w);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ArgumentError(std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
}

double evaluate_loss(Model& model, const std::vector<LabeledSample>& samples, const Tensor& weights) {
    if (samples.empty()) throw ArgumentError("evaluate_loss: no samples");
    double total = 0.0;
    for (const auto& s : samples) total += weighted_cross_entropy(model.predict(s.image), s.mask, weights);
    return total / static_cast<double>(samples.size());
}

TrainResult train(Model& model, const std::vector<LabeledSample>& train_set,
                  const std::vector<LabeledSample>& validation_set, const TrainConfig& config,
                  const TrainMonitor& monitor) {
    config.validate();
    if (train_set.empty()) throw ArgumentError("train: empty training set");
    const std::size_t side = model.config().input_side;
    for (const auto& s : train_set) {
        require_shape(s.image, {side, side, 3}, "training image");
        require_shape(s.mask, {side, side}, "training mask");
    }

    Tensor weights = config.class_weights;
    if (weights.empty()) {
        std::vector<Tensor> masks;
        for (const auto& s : train_set) masks.push_back(s.mask);
        weights = class_weights(masks);
    }

    std::vector<std::vector<Tensor>> features;
    features.reserve(train_set.size());
    for (const auto& s : train_set) features.push_back(model.features(s.image));

    if (config.checkpoint_dir) std::filesystem::create_directories(*config.checkpoint_dir);

    TrainResult result;
    result.best_validation_loss = std::numeric_limits<double>::infinity();
    NamedTensors last_good = model.params().to_checkpoint();
    result.best_checkpoint = last_good;
    OptimizerState optimizer;
    std::mt19937_64 rng(config.seed);
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = order.size();

    auto restore_last_good = [&]() {
        model.params() = ModelParams::from_checkpoint(model.config(), last_good);
        result.diverged = true;
    };

    for (std::size_t it = 1; it <= config.iterations; ++it) {
        if (cursor >= order.size()) {
            std::shuffle(order.begin(), order.end(), rng);
            cursor = 0;
        }
        const std::size_t end = std::min(order.size(), cursor + config.batch_size);
        std::vector<Tensor> images;
        std::vector<std::vector<Tensor>> batch_features;
        std::vector<const Tensor*> masks;
        for (std::size_t k = cursor; k < end; ++k) {
            images.push_back(train_set[order[k]].image);
            batch_features.push_back(features[order[k]]);
            masks.push_back(&train_set[order[k]].mask);
        }
        cursor = end;

        ForwardCache cache;
        const auto out = model.forward(images, batch_features, Mode::Train, &cache);
        const double scale = 1.0 / static_cast<double>(images.size());
        double loss = 0.0;
        std::vector<Tensor> d_logits;
        for (std::size_t b = 0; b < images.size(); ++b) {
            loss += scale * weighted_cross_entropy(out.probs[b], *masks[b], weights);
            Tensor g = weighted_cross_entropy_logit_grad(out.probs[b], *masks[b], weights);
            for (auto& v : g.storage()) v *= scale;
            d_logits.push_back(std::move(g));
        }
        if (!std::isfinite(loss)) {
            restore_last_good();
            break;
        }
        try {
            const NamedTensors grads = model.backward(cache, d_logits);
            adam_step(model.params().tensors, grads, optimizer, config.adam);
        } catch (const NumericError&) {
            restore_last_good();
            break;
        }
        result.loss_history.push_back(loss);
        result.iterations_run = it;

        if (it % config.checkpoint_every == 0 || it == config.iterations) {
            if (!model.params().all_finite()) {
                restore_last_good();
                break;
            }
            last_good = model.params().to_checkpoint();
            double score = loss;
            if (!validation_set.empty()) {
                score = evaluate_loss(model, validation_set, weights);
                result.validation_history.emplace_back(it, score);
            }
            if (score < result.best_validation_loss) {
                result.best_validation_loss = score;
                result.best_checkpoint = last_good;
                if (config.checkpoint_dir) save_checkpoint(*config.checkpoint_dir / "best.floc", last_good);
            }
            if (config.checkpoint_dir) save_checkpoint(*config.checkpoint_dir / "last.floc", last_good);
            if (monitor && !monitor(it, model, result)) {
                result.stopped_early = true;
                break;
            }
        }
    }
    return result;
}

void write_loss_csv(std::ostream& out, const TrainResult& result) {
    out << "iteration,train_loss,validation_loss\n";
    out.precision(17);
    std::size_t v = 0;
    for (std::size_t i = 0; i < result.loss_history.size(); ++i) {
        const std::size_t it = i + 1;
        out << it << ',' << result.loss_history[i] << ',';
        if (v < result.validation_history.size() && result.validation_history[v].first == it) {
            out << result.validation_history[v].second;
            ++v;
        }
        out << '\n';
    }
}

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ArgumentError("cannot open manifest " + path.string());
    std::vector<ManifestRecord> records;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            auto j = nlohmann::json::parse(line);
            ManifestRecord r;
            r.image = j.at("image").get<std::string>();
            r.mask = j.value("mask", std::string{});
            r.split = j.value("split", std::string{});
            r.source_id = j.value("source_id", std::string{});
            for (auto it = j.begin(); it != j.end(); ++it) {
                if (it.key() != "image" && it.key() != "mask" && it.key() != "split" && it.key() != "source_id") {
                    r.extra[it.key()] = it.value();
                }
            }
            records.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw ArgumentError("manifest " + path.string() + " line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return records;
}

std::string manifest_line(const ManifestRecord& record) {
    nlohmann::ordered_json j;
    j["image"] = record.image;
    j["mask"] = record.mask;
    j["split"] = record.split;
    j["source_id"] = record.source_id;
    for (auto it = record.extra.begin(); it != record.extra.end(); ++it) j[it.key()] = it.value();
    return j.dump();
}

}  // namespace floc
