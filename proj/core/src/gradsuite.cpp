#include "floc/gradsuite.hpp"

#include <random>

#include "floc/layers.hpp"
#include "floc/lstm.hpp"
#include "floc/training.hpp"

namespace floc {

namespace {

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Tensor t(shape);
    for (auto& v : t.storage()) v = dist(rng);
    return t;
}

double dot(const Tensor& a, const Tensor& b) {
    require_shape(b, a.shape(), "dot");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double dot(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += dot(a[i], b[i]);
    return s;
}

std::vector<Tensor> random_like(const std::vector<Tensor>& ts, std::mt19937_64& rng) {
    std::vector<Tensor> out;
    for (const auto& t : ts) out.push_back(random_tensor(t.shape(), rng));
    return out;
}

std::uint64_t mix(std::uint64_t h, std::uint64_t v) { return (h ^ v) * 1099511628211ULL; }

std::uint64_t sign_pattern(std::uint64_t h, const std::vector<Tensor>& ts) {
    for (const auto& t : ts) {
        for (double v : t.values()) h = mix(h, v > 0.0 ? 1 : 2);
    }
    return h;
}

std::uint64_t encoder_regime(const EncoderCache& cache, std::uint64_t h = 14695981039346656037ULL) {
    for (const auto& s : cache.stages) {
        h = sign_pattern(h, s.bn1_out);
        h = sign_pattern(h, s.sum);
        for (const auto& arg : s.pool_argmax) {
            for (auto i : arg) h = mix(h, i);
        }
    }
    return h;
}

std::uint64_t decoder_regime(const DecoderCache& cache, std::uint64_t h = 14695981039346656037ULL) {
    for (const auto& s : cache.stages) h = sign_pattern(h, s.bn_out);
    return h;
}

class Suite {
public:
    explicit Suite(std::vector<GradSuiteEntry>& out) : out_(out) {}

    const GradCheckReport& check(const std::string& name, const std::function<double()>& loss, Tensor& values,
                                 const Tensor& analytic, double tolerance = kLayerTolerance,
                                 std::span<const std::size_t> indices = {},
                                 const std::function<std::uint64_t()>& regime = {}) {
        require_shape(analytic, values.shape(), "gradient of " + name);
        GradCheckOptions opts;
        opts.floor = kSuiteFloor;
        opts.indices = indices;
        opts.regime = regime;
        out_.push_back({name, grad_check(loss, values.values(), analytic.values(), tolerance, opts)});
        return out_.back().report;
    }

    void drop_last() { out_.pop_back(); }

private:
    std::vector<GradSuiteEntry>& out_;
};

void layer_checks(Suite& suite, std::mt19937_64& rng) {
    {
        Tensor in = random_tensor({5, 5, 3}, rng), k = random_tensor({3, 3, 3, 4}, rng), b = random_tensor({4}, rng);
        const Tensor r = random_tensor(conv2d(in, k, b).shape(), rng);
        auto loss = [&] { return dot(conv2d(in, k, b), r); };
        const auto g = conv2d_backward(in, k, r);
        suite.check("conv2d.kernel", loss, k, g.kernel);
        suite.check("conv2d.bias", loss, b, g.bias);
        suite.check("conv2d.input", loss, in, g.input);
    }
    {
        Tensor in = random_tensor({4, 4, 2}, rng);
        const auto fwd = maxpool2(in);
        const Tensor r = random_tensor(fwd.output.shape(), rng);
        auto loss = [&] { return dot(maxpool2(in).output, r); };
        suite.check("maxpool2.input", loss, in, maxpool2_backward(r, fwd.argmax, in.shape()));
    }
    {
        Tensor in = random_tensor({4, 4, 2}, rng);
        // Keep inputs clear of the kink so the central difference is valid.
        for (auto& v : in.storage()) v = v < 0.0 ? std::min(v, -0.1) : std::max(v, 0.1);
        const Tensor r = random_tensor(in.shape(), rng);
        auto loss = [&] { return dot(relu(in), r); };
        suite.check("relu.input", loss, in, relu_backward(in, r));
    }
    {
        Tensor in = random_tensor({3, 3, 2}, rng);
        const Tensor r = random_tensor({6, 6, 2}, rng);
        auto loss = [&] { return dot(upsample_nearest(in, 2), r); };
        suite.check("upsample_nearest.input", loss, in, upsample_nearest_backward(r, 2));
    }
    {
        Tensor in = random_tensor({5}, rng), w = random_tensor({5, 3}, rng), b = random_tensor({3}, rng);
        const Tensor r = random_tensor({3}, rng);
        auto loss = [&] { return dot(dense(in, w, b), r); };
        const auto g = dense_backward(in, w, r);
        suite.check("dense.weight", loss, w, g.weight);
        suite.check("dense.bias", loss, b, g.bias);
        suite.check("dense.input", loss, in, g.input);
    }
    {
        Tensor logits = random_tensor({3, 3, 2}, rng, -3.0, 3.0);
        const Tensor r = random_tensor(logits.shape(), rng);
        auto loss = [&] { return dot(softmax2(logits), r); };
        suite.check("softmax2.logits", loss, logits, softmax2_backward(softmax2(logits), r));
    }
    {
        std::vector<Tensor> batch = {random_tensor({3, 3, 2}, rng), random_tensor({3, 3, 2}, rng),
                                     random_tensor({3, 3, 2}, rng)};
        Tensor gamma = random_tensor({2}, rng), beta = random_tensor({2}, rng);
        const auto r = random_like(batch, rng);
        auto loss = [&] {
            BatchNormStats stats;
            return dot(batchnorm(batch, gamma, beta, Mode::Train, stats), r);
        };
        BatchNormStats stats;
        BatchNormCache cache;
        batchnorm(batch, gamma, beta, Mode::Train, stats, &cache);
        const auto g = batchnorm_backward(r, gamma, cache);
        suite.check("batchnorm.train.gamma", loss, gamma, g.gamma);
        suite.check("batchnorm.train.beta", loss, beta, g.beta);
        for (std::size_t i = 0; i < batch.size(); ++i) {
            suite.check("batchnorm.train.input" + std::to_string(i), loss, batch[i], g.inputs[i]);
        }

        BatchNormStats running{random_tensor({2}, rng), random_tensor({2}, rng, 0.5, 2.0), true};
        Tensor x = random_tensor({3, 3, 2}, rng);
        const Tensor rx = random_tensor(x.shape(), rng);
        auto infer_loss = [&] { return dot(batchnorm(x, gamma, beta, Mode::Infer, running), rx); };
        BatchNormCache icache;
        batchnorm(x, gamma, beta, Mode::Infer, running, &icache);
        const std::vector<Tensor> up{rx};
        suite.check("batchnorm.infer.input", infer_loss, x, batchnorm_backward(up, gamma, icache).inputs[0]);
    }
}

void lstm_checks(Suite& suite, std::mt19937_64& rng) {
    const std::size_t din = 3, hidden = 4, steps = 3;
    LstmParams p = LstmParams::zeros(din, hidden);
    for (Tensor* t : {&p.w_input, &p.w_forget, &p.w_output, &p.w_candidate, &p.b_input, &p.b_forget, &p.b_output,
                      &p.b_candidate}) {
        *t = random_tensor(t->shape(), rng);
    }
    std::vector<Tensor> inputs;
    for (std::size_t t = 0; t < steps; ++t) inputs.push_back(random_tensor({din}, rng));
    std::vector<Tensor> r;
    for (std::size_t t = 0; t < steps; ++t) r.push_back(random_tensor({hidden}, rng));
    auto loss = [&] { return dot(lstm_sequence(inputs, p), r); };

    LstmSequenceCache cache;
    lstm_sequence(inputs, p, &cache);
    LstmParams g = LstmParams::zeros(din, hidden);
    const auto d_inputs = lstm_sequence_backward(cache, p, r, g);
    suite.check("lstm.w_input", loss, p.w_input, g.w_input);
    suite.check("lstm.w_forget", loss, p.w_forget, g.w_forget);
    suite.check("lstm.w_output", loss, p.w_output, g.w_output);
    suite.check("lstm.w_candidate", loss, p.w_candidate, g.w_candidate);
    suite.check("lstm.b_input", loss, p.b_input, g.b_input);
    suite.check("lstm.b_forget", loss, p.b_forget, g.b_forget);
    suite.check("lstm.b_output", loss, p.b_output, g.b_output);
    suite.check("lstm.b_candidate", loss, p.b_candidate, g.b_candidate);
    for (std::size_t t = 0; t < steps; ++t) suite.check("lstm.x" + std::to_string(t), loss, inputs[t], d_inputs[t]);
}

bool has_prefix(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

void branch_checks(Suite& suite, std::mt19937_64& rng) {
    const NetworkConfig config = toy_network_config();
    Model model = Model::initialize(config, rng());
    ModelParams& params = model.params();
    // Random biases and affine terms so no gradient is trivially zero.
    for (auto& [name, t] : params.tensors) {
        if (name.find("bias") != std::string::npos || name.find("beta") != std::string::npos ||
            has_prefix(name, "lstm.l")) {
            t = random_tensor(t.shape(), rng, -0.5, 0.5);
        }
    }
    const std::size_t side = config.input_side;
    const std::vector<Tensor> images = {random_tensor({side, side, 3}, rng, 0.0, 1.0),
                                        random_tensor({side, side, 3}, rng, 0.0, 1.0)};

    {
        const auto features = model.features(images[0]);
        const Tensor r = random_tensor({config.patch_grid, config.patch_grid, config.projection_width}, rng);
        auto loss = [&] { return dot(lstm_branch(features, params, config, model.ordering()), r); };
        LstmBranchCache cache;
        lstm_branch(features, params, config, model.ordering(), &cache);
        NamedTensors grads = zeros_like(params.tensors);
        lstm_branch_backward(cache, r, params, config, model.ordering(), grads);
        for (auto& [name, t] : params.tensors) {
            if (has_prefix(name, "lstm.")) suite.check("lstm_branch." + name, loss, t, grads.at(name));
        }
    }
    {
        std::vector<Tensor> inputs = images;
        const auto probe = encoder(inputs, params, config, Mode::Train);
        const auto r = random_like(probe, rng);
        auto loss = [&] { return dot(encoder(inputs, params, config, Mode::Train), r); };
        auto regime = [&] {
            EncoderCache c;
            encoder(inputs, params, config, Mode::Train, &c);
            return encoder_regime(c);
        };
        EncoderCache cache;
        encoder(inputs, params, config, Mode::Train, &cache);
        NamedTensors grads = zeros_like(params.tensors);
        const auto d_in = encoder_backward(cache, r, params, config, grads);
        for (auto& [name, t] : params.tensors) {
            if (has_prefix(name, "enc.")) suite.check("encoder." + name, loss, t, grads.at(name), kLayerTolerance, {}, regime);
        }
        suite.check("encoder.input0", loss, inputs[0], d_in[0], kLayerTolerance, {}, regime);
    }
    {
        const std::size_t f = config.fusion_side(), g = config.patch_grid;
        Tensor enc = random_tensor({f, f, config.encoder_channels.back()}, rng);
        Tensor lstm = random_tensor({g, g, config.projection_width}, rng);
        const Tensor r = random_tensor({f, f, config.fused_channels()}, rng);
        auto loss = [&] { return dot(fuse(enc, lstm), r); };
        const auto [d_enc, d_lstm] = fuse_backward(r, config.encoder_channels.back(), config.lstm_upsample());
        suite.check("fuse.encoder", loss, enc, d_enc);
        suite.check("fuse.lstm", loss, lstm, d_lstm);
    }
    {
        const std::size_t f = config.fusion_side();
        std::vector<Tensor> fused = {random_tensor({f, f, config.fused_channels()}, rng),
                                     random_tensor({f, f, config.fused_channels()}, rng)};
        const auto probe = decoder(fused, params, config, Mode::Train);
        const auto r = random_like(probe, rng);
        auto loss = [&] { return dot(decoder(fused, params, config, Mode::Train), r); };
        auto regime = [&] {
            DecoderCache c;
            decoder(fused, params, config, Mode::Train, &c);
            return decoder_regime(c);
        };
        DecoderCache cache;
        decoder(fused, params, config, Mode::Train, &cache);
        NamedTensors grads = zeros_like(params.tensors);
        const auto d_in = decoder_backward(cache, r, params, config, grads);
        for (auto& [name, t] : params.tensors) {
            if (has_prefix(name, "dec.") || has_prefix(name, "head.")) {
                suite.check("decoder." + name, loss, t, grads.at(name), kLayerTolerance, {}, regime);
            }
        }
        suite.check("decoder.input0", loss, fused[0], d_in[0], kLayerTolerance, {}, regime);
    }
}

struct LossSetup {
    std::vector<Tensor> images;
    std::vector<std::vector<Tensor>> features;
    std::vector<Tensor> masks;
    Tensor weights;
};

LossSetup make_loss_setup(Model& model, std::size_t batch, std::mt19937_64& rng) {
    const std::size_t side = model.config().input_side;
    LossSetup s;
    std::bernoulli_distribution coin(0.3);
    for (std::size_t b = 0; b < batch; ++b) {
        s.images.push_back(random_tensor({side, side, 3}, rng, 0.0, 1.0));
        s.features.push_back(model.features(s.images.back()));
        Tensor m({side, side});
        for (auto& v : m.storage()) v = coin(rng) ? 1.0 : 0.0;
        s.masks.push_back(std::move(m));
    }
    s.weights = class_weights(s.masks);
    return s;
}

double model_loss(Model& model, const LossSetup& s, NamedTensors* grads) {
    ForwardCache cache;
    const auto out = model.forward(s.images, s.features, Mode::Train, grads ? &cache : nullptr);
    const double scale = 1.0 / static_cast<double>(s.images.size());
    double loss = 0.0;
    std::vector<Tensor> d_logits;
    for (std::size_t b = 0; b < s.images.size(); ++b) {
        loss += scale * weighted_cross_entropy(out.probs[b], s.masks[b], s.weights);
        if (grads) {
            Tensor g = weighted_cross_entropy_logit_grad(out.probs[b], s.masks[b], s.weights);
            for (auto& v : g.storage()) v *= scale;
            d_logits.push_back(std::move(g));
        }
    }
    if (grads) *grads = model.backward(cache, d_logits);
    return loss;
}

std::uint64_t model_regime(Model& model, const LossSetup& s) {
    ForwardCache cache;
    model.forward(s.images, s.features, Mode::Train, &cache);
    return decoder_regime(cache.decoder, encoder_regime(cache.encoder));
}

void toy_model_check(Suite& suite, std::mt19937_64& rng) {
    Model model = Model::initialize(toy_network_config(), rng());
    const LossSetup setup = make_loss_setup(model, 2, rng);
    NamedTensors grads;
    model_loss(model, setup, &grads);
    auto loss = [&] { return model_loss(model, setup, nullptr); };
    auto regime = [&] { return model_regime(model, setup); };
    for (auto& [name, t] : model.params().tensors) {
        suite.check("model.toy." + name, loss, t, grads.at(name), kLayerTolerance, {}, regime);
    }
}

void desk_model_check(Suite& suite, std::mt19937_64& rng) {
    Model model = Model::initialize(NetworkConfig::desk(), rng());
    const LossSetup setup = make_loss_setup(model, 1, rng);
    NamedTensors grads;
    model_loss(model, setup, &grads);
    auto loss = [&] { return model_loss(model, setup, nullptr); };
    std::vector<std::string> names;
    for (const auto& [name, t] : model.params().tensors) names.push_back(name);
    auto regime = [&] { return model_regime(model, setup); };
    std::uniform_int_distribution<std::size_t> pick_tensor(0, names.size() - 1);
    // Draws that straddle a kink are redrawn until three parameters compared.
    constexpr int kCompared = 3, kMaxDraws = 30;
    int compared = 0;
    for (int draw = 0; draw < kMaxDraws && compared < kCompared; ++draw) {
        const std::string& name = names[pick_tensor(rng)];
        Tensor& t = model.params()[name];
        const std::size_t index = std::uniform_int_distribution<std::size_t>(0, t.size() - 1)(rng);
        const auto& report = suite.check("model.desk." + name + "[" + std::to_string(index) + "]", loss, t,
                                         grads.at(name), kEndToEndTolerance, std::span<const std::size_t>(&index, 1),
                                         regime);
        if (report.checked == 0) {
            suite.drop_last();
        } else {
            ++compared;
        }
    }
    if (compared < kCompared) throw NumericError("end-to-end gradient check: every draw straddled a kink");
}

}  // namespace

NetworkConfig toy_network_config() {
    NetworkConfig c;
    c.input_side = 16;
    c.patch_grid = 2;
    c.timesteps = 4;
    c.lstm_hidden = 3;
    c.lstm_layers = 2;
    c.projection_width = 2;
    c.encoder_channels = {2, 3};
    c.decoder_channels = {3};
    c.decoder_upsample_factors = {4};
    c.features = FeatureConfig{2, 4, 2};
    c.validate();
    return c;
}

std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed, bool end_to_end) {
    std::vector<GradSuiteEntry> out;
    Suite suite(out);
    std::mt19937_64 rng(seed);
    layer_checks(suite, rng);
    lstm_checks(suite, rng);
    branch_checks(suite, rng);
    toy_model_check(suite, rng);
    if (end_to_end) desk_model_check(suite, rng);
    return out;
}

}  // namespace floc
