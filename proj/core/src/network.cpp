#include "floc/network.hpp"

#include <cmath>
#include <random>
#include <set>


namespace floc {

namespace {

std::string stage_prefix(const char* branch, std::size_t stage) {
    return std::string(branch) + ".s" + std::to_string(stage);
}

std::string lstm_prefix(std::size_t layer) { return "lstm.l" + std::to_string(layer); }

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

const char* const kGateNames[] = {"input", "forget", "output", "candidate"};

}  // namespace

// ---------------------------------------------------------------------------
// NetworkConfig

NetworkConfig NetworkConfig::full() { return {}; }

NetworkConfig NetworkConfig::desk() {
    NetworkConfig c;
    c.input_side = 128;
    c.lstm_hidden = 32;
    c.projection_width = 16;
    c.encoder_channels = {8, 16, 32, 64};
    c.decoder_channels = {16, 4};
    c.decoder_upsample_factors = {4, 4};
    c.features = FeatureConfig::desk();
    return c;
}

std::size_t NetworkConfig::grid_order() const {
    std::size_t order = 0;
    while ((std::size_t{1} << order) < patch_grid) ++order;
    return order;
}

void NetworkConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ArgumentError("network config: " + msg); };
    if (!is_power_of_two(patch_grid) || patch_grid < 2) fail("patch_grid must be a power of two >= 2");
    if (timesteps != patch_grid * patch_grid) fail("timesteps must equal patch_grid^2");
    if (input_side == 0 || input_side % patch_grid != 0) fail("input_side must be divisible by patch_grid");
    if (lstm_hidden == 0 || projection_width == 0) fail("lstm_hidden and projection_width must be positive");
    if (lstm_layers == 0) fail("lstm_layers must be >= 1");
    if (encoder_channels.empty()) fail("encoder needs at least one stage");
    for (auto c : encoder_channels) {
        if (c == 0) fail("encoder channel counts must be positive");
    }
    const std::size_t halvings = std::size_t{1} << encoder_channels.size();
    if (input_side % halvings != 0) fail("input_side must be divisible by 2^(encoder stages)");
    if (fusion_side() % patch_grid != 0) fail("fusion side must be a multiple of patch_grid");
    if (decoder_channels.size() != decoder_upsample_factors.size()) {
        fail("decoder_channels and decoder_upsample_factors must have equal length");
    }
    std::size_t side = fusion_side();
    for (auto f : decoder_upsample_factors) {
        if (f == 0) fail("decoder upsample factors must be >= 1");
        side *= f;
    }
    for (auto c : decoder_channels) {
        if (c == 0) fail("decoder channel counts must be positive");
    }
    if (side != input_side) fail("decoder upsampling must map the fusion side back to input_side");
    features.validate();
}

nlohmann::json NetworkConfig::to_json() const {
    return {{"input_side", input_side},
            {"patch_grid", patch_grid},
            {"lstm_hidden", lstm_hidden},
            {"lstm_layers", lstm_layers},
            {"timesteps", timesteps},
            {"projection_width", projection_width},
            {"encoder_channels", encoder_channels},
            {"decoder_channels", decoder_channels},
            {"decoder_upsample_factors", decoder_upsample_factors},
            {"features", {{"angles", features.angles}, {"bins", features.bins}, {"retained", features.retained}}}};
}

NetworkConfig NetworkConfig::from_json(const nlohmann::json& j, NetworkConfig base) {
    NetworkConfig c = std::move(base);
    try {
        c.input_side = j.value("input_side", c.input_side);
        c.patch_grid = j.value("patch_grid", c.patch_grid);
        c.lstm_hidden = j.value("lstm_hidden", c.lstm_hidden);
        c.lstm_layers = j.value("lstm_layers", c.lstm_layers);
        c.timesteps = j.value("timesteps", c.timesteps);
        c.projection_width = j.value("projection_width", c.projection_width);
        c.encoder_channels = j.value("encoder_channels", c.encoder_channels);
        c.decoder_channels = j.value("decoder_channels", c.decoder_channels);
        c.decoder_upsample_factors = j.value("decoder_upsample_factors", c.decoder_upsample_factors);
        if (j.contains("features")) {
            const auto& f = j.at("features");
            c.features.angles = f.value("angles", c.features.angles);
            c.features.bins = f.value("bins", c.features.bins);
            c.features.retained = f.value("retained", c.features.retained);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ArgumentError(std::string("network config: ") + e.what());
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Parameters

Tensor& ModelParams::operator[](const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ArgumentError("unknown parameter " + name);
    return it->second;
}

const Tensor& ModelParams::operator[](const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ArgumentError("unknown parameter " + name);
    return it->second;
}

NamedTensors ModelParams::to_checkpoint() const {
    NamedTensors out = tensors;
    for (const auto& [name, stats] : batchnorm) {
        if (!stats.initialized) continue;
        out.emplace(name + ".running_mean", stats.mean);
        out.emplace(name + ".running_var", stats.var);
    }
    return out;
}

ModelParams ModelParams::from_checkpoint(const NetworkConfig& config, const NamedTensors& stored) {
    config.validate();
    ModelParams p;
    std::set<std::string> consumed;
    for (const auto& [name, shape] : parameter_layout(config)) {
        auto it = stored.find(name);
        if (it == stored.end()) throw FormatError("checkpoint is missing parameter " + name);
        require_shape(it->second, shape, "checkpoint parameter " + name);
        p.tensors.emplace(name, it->second);
        consumed.insert(name);
    }
    for (const auto& bn : batchnorm_layers(config)) {
        BatchNormStats stats;
        auto m = stored.find(bn + ".running_mean");
        auto v = stored.find(bn + ".running_var");
        if ((m == stored.end()) != (v == stored.end())) {
            throw FormatError("checkpoint has incomplete running statistics for " + bn);
        }
        if (m != stored.end()) {
            const std::size_t c = p.tensors.at(bn + ".gamma").size();
            require_shape(m->second, {c}, bn + ".running_mean");
            require_shape(v->second, {c}, bn + ".running_var");
            stats = {m->second, v->second, true};
            consumed.insert(m->first);
            consumed.insert(v->first);
        }
        p.batchnorm.emplace(bn, std::move(stats));
    }
    for (const auto& [name, t] : stored) {
        if (!consumed.count(name)) throw FormatError("checkpoint has unexpected tensor " + name);
    }
    return p;
}

bool ModelParams::all_finite() const {
    for (const auto& [name, t] : tensors) {
        if (!t.all_finite()) return false;
    }
    return true;
}

std::vector<std::pair<std::string, Shape>> parameter_layout(const NetworkConfig& config) {
    std::vector<std::pair<std::string, Shape>> layout;
    const std::size_t h = config.lstm_hidden;
    std::size_t din = config.features.length();
    for (std::size_t l = 0; l < config.lstm_layers; ++l) {
        for (const char* g : kGateNames) layout.emplace_back(lstm_prefix(l) + ".w_" + g, Shape{din + h, h});
        for (const char* g : kGateNames) layout.emplace_back(lstm_prefix(l) + ".b_" + g, Shape{h});
        din = h;
    }
    layout.emplace_back("lstm.proj.weight", Shape{h, config.projection_width});
    layout.emplace_back("lstm.proj.bias", Shape{config.projection_width});

    std::size_t cin = 3;
    for (std::size_t s = 0; s < config.encoder_channels.size(); ++s) {
        const std::size_t c = config.encoder_channels[s];
        const auto p = stage_prefix("enc", s);
        layout.emplace_back(p + ".conv1.kernel", Shape{3, 3, cin, c});
        layout.emplace_back(p + ".conv1.bias", Shape{c});
        layout.emplace_back(p + ".bn1.gamma", Shape{c});
        layout.emplace_back(p + ".bn1.beta", Shape{c});
        layout.emplace_back(p + ".conv2.kernel", Shape{3, 3, c, c});
        layout.emplace_back(p + ".conv2.bias", Shape{c});
        layout.emplace_back(p + ".bn2.gamma", Shape{c});
        layout.emplace_back(p + ".bn2.beta", Shape{c});
        if (cin != c) {
            layout.emplace_back(p + ".shortcut.kernel", Shape{1, 1, cin, c});
            layout.emplace_back(p + ".shortcut.bias", Shape{c});
        }
        cin = c;
    }

    cin = config.fused_channels();
    for (std::size_t s = 0; s < config.decoder_channels.size(); ++s) {
        const std::size_t c = config.decoder_channels[s];
        const auto p = stage_prefix("dec", s);
        layout.emplace_back(p + ".conv.kernel", Shape{3, 3, cin, c});
        layout.emplace_back(p + ".conv.bias", Shape{c});
        layout.emplace_back(p + ".bn.gamma", Shape{c});
        layout.emplace_back(p + ".bn.beta", Shape{c});
        cin = c;
    }
    layout.emplace_back("head.kernel", Shape{1, 1, cin, 2});
    layout.emplace_back("head.bias", Shape{2});
    return layout;
}

std::vector<std::string> batchnorm_layers(const NetworkConfig& config) {
    std::vector<std::string> names;
    for (std::size_t s = 0; s < config.encoder_channels.size(); ++s) {
        names.push_back(stage_prefix("enc", s) + ".bn1");
        names.push_back(stage_prefix("enc", s) + ".bn2");
    }
    for (std::size_t s = 0; s < config.decoder_channels.size(); ++s) names.push_back(stage_prefix("dec", s) + ".bn");
    return names;
}

ModelParams zero_params(const NetworkConfig& config) {
    config.validate();
    ModelParams p;
    for (const auto& [name, shape] : parameter_layout(config)) p.tensors.emplace(name, Tensor(shape));
    for (const auto& bn : batchnorm_layers(config)) p.batchnorm.emplace(bn, BatchNormStats{});
    return p;
}

ModelParams initialize_params(const NetworkConfig& config, std::uint64_t seed) {
    config.validate();
    ModelParams p;
    std::mt19937_64 rng(seed);
    auto ends_with = [](const std::string& s, const std::string& suffix) {
        return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    for (const auto& [name, shape] : parameter_layout(config)) {
        Tensor t(shape);
        if (ends_with(name, ".gamma")) {
            t.fill(1.0);
        } else if (ends_with(name, ".b_forget")) {
            t.fill(1.0);
        } else if (shape.size() >= 2) {
            double fan_in = 0.0, fan_out = 0.0;
            if (shape.size() == 4) {
                const double area = static_cast<double>(shape[0] * shape[1]);
                fan_in = area * static_cast<double>(shape[2]);
                fan_out = area * static_cast<double>(shape[3]);
            } else {
                fan_in = static_cast<double>(shape[0]);
                fan_out = static_cast<double>(shape[1]);
            }
            const double limit = std::sqrt(6.0 / (fan_in + fan_out));
            std::uniform_real_distribution<double> dist(-limit, limit);
            for (auto& v : t.storage()) v = dist(rng);
        }
        p.tensors.emplace(name, std::move(t));
    }
    for (const auto& bn : batchnorm_layers(config)) p.batchnorm.emplace(bn, BatchNormStats{});
    return p;
}

NamedTensors zeros_like(const NamedTensors& tensors) {
    NamedTensors out;
    for (const auto& [name, t] : tensors) out.emplace(name, Tensor(t.shape()));
    return out;
}

LstmParams lstm_layer_params(const ModelParams& params, std::size_t layer) {
    const auto p = lstm_prefix(layer);
    return {params[p + ".w_input"], params[p + ".w_forget"], params[p + ".w_output"], params[p + ".w_candidate"],
            params[p + ".b_input"], params[p + ".b_forget"], params[p + ".b_output"], params[p + ".b_candidate"]};
}

namespace {

void add_lstm_grads(NamedTensors& grads, std::size_t layer, const LstmParams& g) {
    const auto p = lstm_prefix(layer);
    accumulate(grads[p + ".w_input"], g.w_input);
    accumulate(grads[p + ".w_forget"], g.w_forget);
    accumulate(grads[p + ".w_output"], g.w_output);
    accumulate(grads[p + ".w_candidate"], g.w_candidate);
    accumulate(grads[p + ".b_input"], g.b_input);
    accumulate(grads[p + ".b_forget"], g.b_forget);
    accumulate(grads[p + ".b_output"], g.b_output);
    accumulate(grads[p + ".b_candidate"], g.b_candidate);
}

}  // namespace

// ---------------------------------------------------------------------------
// LSTM branch

Tensor lstm_branch(const std::vector<Tensor>& grid_features, const ModelParams& params, const NetworkConfig& config,
                   const HilbertOrdering& ordering, LstmBranchCache* cache) {
    if (grid_features.size() != config.timesteps) {
        throw ShapeError("lstm_branch: expected " + std::to_string(config.timesteps) + " patch descriptors, got " +
                         std::to_string(grid_features.size()));
    }
    if (ordering.side() != config.patch_grid) throw ShapeError("lstm_branch: ordering does not match patch grid");
    for (const auto& f : grid_features) require_shape(f, {config.features.length()}, "lstm_branch descriptor");

    std::vector<Tensor> sequence = reorder_features(grid_features, ordering);
    for (auto& f : sequence) {
        for (auto& v : f.storage()) v = std::log1p(v);
    }
    if (cache) {
        cache->sequence_inputs = sequence;
        cache->layers.assign(config.lstm_layers, {});
    }
    for (std::size_t l = 0; l < config.lstm_layers; ++l) {
        sequence = lstm_sequence(sequence, lstm_layer_params(params, l), cache ? &cache->layers[l] : nullptr);
    }
    const Tensor& w = params["lstm.proj.weight"];
    const Tensor& b = params["lstm.proj.bias"];
    const std::size_t nf = config.projection_width, grid = config.patch_grid;
    Tensor map({grid, grid, nf});
    for (std::size_t t = 0; t < sequence.size(); ++t) {
        const Tensor projected = dense(sequence[t], w, b);
        const auto cell = ordering.cell(t);
        std::copy_n(projected.data(), nf, map.data() + (cell.row * grid + cell.col) * nf);
    }
    if (cache) cache->final_outputs = std::move(sequence);
    return map;
}

void lstm_branch_backward(const LstmBranchCache& cache, const Tensor& d_map, const ModelParams& params,
                          const NetworkConfig& config, const HilbertOrdering& ordering, NamedTensors& grads) {
    const std::size_t nf = config.projection_width, grid = config.patch_grid;
    require_shape(d_map, {grid, grid, nf}, "lstm_branch_backward upstream");
    const Tensor& w = params["lstm.proj.weight"];
    std::vector<Tensor> d_seq(cache.final_outputs.size());
    for (std::size_t t = 0; t < d_seq.size(); ++t) {
        const auto cell = ordering.cell(t);
        Tensor up({nf});
        std::copy_n(d_map.data() + (cell.row * grid + cell.col) * nf, nf, up.data());
        auto g = dense_backward(cache.final_outputs[t], w, up);
        accumulate(grads["lstm.proj.weight"], g.weight);
        accumulate(grads["lstm.proj.bias"], g.bias);
        d_seq[t] = std::move(g.input);
    }
    for (std::size_t l = config.lstm_layers; l-- > 0;) {
        const LstmParams p = lstm_layer_params(params, l);
        LstmParams pg = LstmParams::zeros(p.input_size(), p.hidden());
        d_seq = lstm_sequence_backward(cache.layers[l], p, d_seq, pg);
        add_lstm_grads(grads, l, pg);
    }
}

// ---------------------------------------------------------------------------
// Encoder

std::vector<Tensor> encoder(std::span<const Tensor> images, ModelParams& params, const NetworkConfig& config,
                            Mode mode, EncoderCache* cache) {
    if (images.empty()) throw ArgumentError("encoder: empty batch");
    std::vector<Tensor> x(images.begin(), images.end());
    for (const auto& img : x) {
        require_rank(img, 3, "encoder input");
        if (img.dim(0) % (std::size_t{1} << config.encoder_channels.size()) != 0 || img.dim(0) != img.dim(1)) {
            throw ShapeError("encoder: input " + shape_to_string(img.shape()) + " must be square and divisible by " +
                             std::to_string(std::size_t{1} << config.encoder_channels.size()));
        }
    }
    if (cache) cache->stages.assign(config.encoder_channels.size(), {});
    for (std::size_t s = 0; s < config.encoder_channels.size(); ++s) {
        const auto p = stage_prefix("enc", s);
        EncoderStageCache local;
        EncoderStageCache& sc = cache ? cache->stages[s] : local;
        const bool keep = cache != nullptr;

        std::vector<Tensor> conv1;
        for (const auto& xi : x) conv1.push_back(conv2d(xi, params[p + ".conv1.kernel"], params[p + ".conv1.bias"]));
        auto bn1 = batchnorm(conv1, params[p + ".bn1.gamma"], params[p + ".bn1.beta"], mode,
                             params.batchnorm[p + ".bn1"], keep ? &sc.bn1 : nullptr);
        std::vector<Tensor> relu1, conv2;
        for (const auto& t : bn1) relu1.push_back(relu(t));
        for (const auto& t : relu1) conv2.push_back(conv2d(t, params[p + ".conv2.kernel"], params[p + ".conv2.bias"]));
        auto bn2 = batchnorm(conv2, params[p + ".bn2.gamma"], params[p + ".bn2.beta"], mode,
                             params.batchnorm[p + ".bn2"], keep ? &sc.bn2 : nullptr);
        const bool projected = params.tensors.count(p + ".shortcut.kernel") != 0;
        std::vector<Tensor> sum, next;
        for (std::size_t b = 0; b < x.size(); ++b) {
            Tensor u = projected ? conv2d(x[b], params[p + ".shortcut.kernel"], params[p + ".shortcut.bias"]) : x[b];
            accumulate(u, bn2[b]);
            auto pooled = maxpool2(relu(u));
            if (keep) {
                sc.pool_input_shape = u.shape();
                sc.pool_argmax.push_back(std::move(pooled.argmax));
                sum.push_back(std::move(u));
            }
            next.push_back(std::move(pooled.output));
        }
        if (keep) {
            sc.input = std::move(x);
            sc.conv1 = std::move(conv1);
            sc.bn1_out = std::move(bn1);
            sc.relu1 = std::move(relu1);
            sc.bn2_out = std::move(bn2);
            sc.sum = std::move(sum);
        }
        x = std::move(next);
    }
    return x;
}

std::vector<Tensor> encoder_backward(const EncoderCache& cache, std::span<const Tensor> d_out,
                                     const ModelParams& params, const NetworkConfig& config, NamedTensors& grads) {
    std::vector<Tensor> d(d_out.begin(), d_out.end());
    for (std::size_t s = config.encoder_channels.size(); s-- > 0;) {
        const auto p = stage_prefix("enc", s);
        const EncoderStageCache& sc = cache.stages.at(s);
        const std::size_t n = d.size();
        std::vector<Tensor> d_sum(n), d_conv2(n), d_x(n);
        for (std::size_t b = 0; b < n; ++b) {
            const Tensor d_relu = maxpool2_backward(d[b], sc.pool_argmax[b], sc.pool_input_shape);
            d_sum[b] = relu_backward(sc.sum[b], d_relu);
        }
        auto g2 = batchnorm_backward(d_sum, params[p + ".bn2.gamma"], sc.bn2);
        accumulate(grads[p + ".bn2.gamma"], g2.gamma);
        accumulate(grads[p + ".bn2.beta"], g2.beta);
        std::vector<Tensor> d_bn1(n);
        for (std::size_t b = 0; b < n; ++b) {
            auto c2 = conv2d_backward(sc.relu1[b], params[p + ".conv2.kernel"], g2.inputs[b]);
            accumulate(grads[p + ".conv2.kernel"], c2.kernel);
            accumulate(grads[p + ".conv2.bias"], c2.bias);
            d_bn1[b] = relu_backward(sc.bn1_out[b], c2.input);
        }
        auto g1 = batchnorm_backward(d_bn1, params[p + ".bn1.gamma"], sc.bn1);
        accumulate(grads[p + ".bn1.gamma"], g1.gamma);
        accumulate(grads[p + ".bn1.beta"], g1.beta);
        const bool projected = params.tensors.count(p + ".shortcut.kernel") != 0;
        for (std::size_t b = 0; b < n; ++b) {
            auto c1 = conv2d_backward(sc.input[b], params[p + ".conv1.kernel"], g1.inputs[b]);
            accumulate(grads[p + ".conv1.kernel"], c1.kernel);
            accumulate(grads[p + ".conv1.bias"], c1.bias);
            d_x[b] = std::move(c1.input);
            if (projected) {
                auto sc_g = conv2d_backward(sc.input[b], params[p + ".shortcut.kernel"], d_sum[b]);
                accumulate(grads[p + ".shortcut.kernel"], sc_g.kernel);
                accumulate(grads[p + ".shortcut.bias"], sc_g.bias);
                accumulate(d_x[b], sc_g.input);
            } else {
                accumulate(d_x[b], d_sum[b]);
            }
        }
        d = std::move(d_x);
    }
    return d;
}

// ---------------------------------------------------------------------------
// Fusion

Tensor fuse(const Tensor& encoder_map, const Tensor& lstm_map) {
    require_rank(encoder_map, 3, "fuse encoder map");
    require_rank(lstm_map, 3, "fuse lstm map");
    const std::size_t f = encoder_map.dim(0), g = lstm_map.dim(0);
    if (encoder_map.dim(1) != f || lstm_map.dim(1) != g || f % g != 0) {
        throw ShapeError("fuse: encoder side " + std::to_string(f) + " is not a multiple of LSTM grid side " +
                         std::to_string(g));
    }
    return concat_channels(encoder_map, upsample_nearest(lstm_map, f / g));
}

std::pair<Tensor, Tensor> fuse_backward(const Tensor& d_fused, std::size_t encoder_channels, std::size_t lstm_upsample) {
    auto [d_enc, d_lstm_up] = split_channels(d_fused, encoder_channels);
    return {std::move(d_enc), upsample_nearest_backward(d_lstm_up, lstm_upsample)};
}

// ---------------------------------------------------------------------------
// Decoder

std::vector<Tensor> decoder(std::span<const Tensor> fused, ModelParams& params, const NetworkConfig& config, Mode mode,
                            DecoderCache* cache) {
    if (fused.empty()) throw ArgumentError("decoder: empty batch");
    std::vector<Tensor> x(fused.begin(), fused.end());
    if (cache) cache->stages.assign(config.decoder_channels.size(), {});
    for (std::size_t s = 0; s < config.decoder_channels.size(); ++s) {
        const auto p = stage_prefix("dec", s);
        std::vector<Tensor> up, conv;
        for (const auto& xi : x) up.push_back(upsample_nearest(xi, config.decoder_upsample_factors[s]));
        for (const auto& u : up) conv.push_back(conv2d(u, params[p + ".conv.kernel"], params[p + ".conv.bias"]));
        auto bn = batchnorm(conv, params[p + ".bn.gamma"], params[p + ".bn.beta"], mode, params.batchnorm[p + ".bn"],
                            cache ? &cache->stages[s].bn : nullptr);
        std::vector<Tensor> next;
        for (const auto& t : bn) next.push_back(relu(t));
        if (cache) {
            cache->stages[s].upsampled = std::move(up);
            cache->stages[s].bn_out = std::move(bn);
        }
        x = std::move(next);
    }
    std::vector<Tensor> logits;
    for (const auto& xi : x) logits.push_back(conv2d(xi, params["head.kernel"], params["head.bias"]));
    if (cache) cache->head_input = std::move(x);
    return logits;
}

std::vector<Tensor> decoder_backward(const DecoderCache& cache, std::span<const Tensor> d_logits,
                                     const ModelParams& params, const NetworkConfig& config, NamedTensors& grads) {
    const std::size_t n = d_logits.size();
    std::vector<Tensor> d(n);
    for (std::size_t b = 0; b < n; ++b) {
        auto g = conv2d_backward(cache.head_input[b], params["head.kernel"], d_logits[b]);
        accumulate(grads["head.kernel"], g.kernel);
        accumulate(grads["head.bias"], g.bias);
        d[b] = std::move(g.input);
    }
    for (std::size_t s = config.decoder_channels.size(); s-- > 0;) {
        const auto p = stage_prefix("dec", s);
        const DecoderStageCache& sc = cache.stages.at(s);
        std::vector<Tensor> d_bn(n);
        for (std::size_t b = 0; b < n; ++b) d_bn[b] = relu_backward(sc.bn_out[b], d[b]);
        auto gb = batchnorm_backward(d_bn, params[p + ".bn.gamma"], sc.bn);
        accumulate(grads[p + ".bn.gamma"], gb.gamma);
        accumulate(grads[p + ".bn.beta"], gb.beta);
        for (std::size_t b = 0; b < n; ++b) {
            auto gc = conv2d_backward(sc.upsampled[b], params[p + ".conv.kernel"], gb.inputs[b]);
            accumulate(grads[p + ".conv.kernel"], gc.kernel);
            accumulate(grads[p + ".conv.bias"], gc.bias);
            d[b] = upsample_nearest_backward(gc.input, config.decoder_upsample_factors[s]);
        }
    }
    return d;
}

// ---------------------------------------------------------------------------
// Model

Model::Model(NetworkConfig config, ModelParams params)
    : config_(std::move(config)), params_(std::move(params)), ordering_(hilbert_curve(config_.grid_order())) {
    config_.validate();
    for (const auto& [name, shape] : parameter_layout(config_)) {
        auto it = params_.tensors.find(name);
        if (it == params_.tensors.end()) throw ArgumentError("model parameters missing slot " + name);
        require_shape(it->second, shape, "model parameter " + name);
    }
    for (const auto& bn : batchnorm_layers(config_)) params_.batchnorm.try_emplace(bn);
}

Model Model::initialize(const NetworkConfig& config, std::uint64_t seed) {
    return Model(config, initialize_params(config, seed));
}

std::vector<Tensor> Model::features(const Tensor& image) const {
    return image_features(image, config_.features, config_.patch_grid);
}

ForwardResult Model::forward(std::span<const Tensor> images, std::span<const std::vector<Tensor>> features, Mode mode,
                             ForwardCache* cache) {
    if (images.empty()) throw ArgumentError("forward: empty batch");
    if (!features.empty() && features.size() != images.size()) {
        throw ArgumentError("forward: descriptor count does not match batch size");
    }
    const std::size_t s = config_.input_side;
    for (const auto& img : images) require_shape(img, {s, s, 3}, "model input");

    if (cache) cache->lstm.assign(images.size(), {});
    std::vector<Tensor> lstm_maps;
    lstm_maps.reserve(images.size());
    for (std::size_t b = 0; b < images.size(); ++b) {
        const std::vector<Tensor> computed = features.empty() ? this->features(images[b]) : std::vector<Tensor>{};
        const auto& f = features.empty() ? computed : features[b];
        lstm_maps.push_back(lstm_branch(f, params_, config_, ordering_, cache ? &cache->lstm[b] : nullptr));
    }
    const auto encoded = encoder(images, params_, config_, mode, cache ? &cache->encoder : nullptr);
    std::vector<Tensor> fused;
    fused.reserve(images.size());
    for (std::size_t b = 0; b < images.size(); ++b) fused.push_back(fuse(encoded[b], lstm_maps[b]));
    ForwardResult r;
    r.logits = decoder(fused, params_, config_, mode, cache ? &cache->decoder : nullptr);
    for (const auto& l : r.logits) r.probs.push_back(softmax2(l));
    return r;
}

Tensor Model::predict(const Tensor& image) {
    auto r = forward(std::span<const Tensor>(&image, 1), {}, Mode::Infer);
    return std::move(r.probs.front());
}

NamedTensors Model::backward(const ForwardCache& cache, std::span<const Tensor> d_logits) const {
    NamedTensors grads = zeros_like(params_.tensors);
    auto d_fused = decoder_backward(cache.decoder, d_logits, params_, config_, grads);
    std::vector<Tensor> d_enc;
    d_enc.reserve(d_fused.size());
    for (std::size_t b = 0; b < d_fused.size(); ++b) {
        auto [de, dl] = fuse_backward(d_fused[b], config_.encoder_channels.back(), config_.lstm_upsample());
        lstm_branch_backward(cache.lstm.at(b), dl, params_, config_, ordering_, grads);
        d_enc.push_back(std::move(de));
    }
    encoder_backward(cache.encoder, d_enc, params_, config_, grads);
    return grads;
}

void Model::save(const std::filesystem::path& checkpoint) const { save_checkpoint(checkpoint, params_.to_checkpoint()); }

Model Model::load(const std::filesystem::path& checkpoint, const NetworkConfig& config) {
    return Model(config, ModelParams::from_checkpoint(config, load_checkpoint(checkpoint)));
}

Tensor model_forward(const Tensor& image, Model& model, Mode mode) {
    auto r = model.forward(std::span<const Tensor>(&image, 1), {}, mode);
    return std::move(r.probs.front());
}

}  // namespace floc
