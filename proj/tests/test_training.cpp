#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "floc/gradsuite.hpp"
#include "floc/image.hpp"
#include "floc/training.hpp"
#include "support.hpp"

using namespace floc;
using floc::testing::random_image;
using floc::testing::random_tensor;

namespace {

Tensor random_mask(std::size_t h, std::size_t w, std::mt19937_64& rng, double p = 0.3) {
    Tensor m({h, w});
    std::bernoulli_distribution b(p);
    for (double& v : m.values()) v = b(rng);
    return m;
}

std::vector<LabeledSample> toy_samples(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<LabeledSample> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back({random_image(16, 16, rng), random_mask(16, 16, rng), "s", "train"});
    return out;
}

}  // namespace

TEST(Split, PaperSizes) {
    const auto s = split_indices(100, 1);
    EXPECT_EQ(s.train.size(), 70u);
    EXPECT_EQ(s.validation.size(), 5u);
    EXPECT_EQ(s.test.size(), 25u);
    const auto t = split_indices(20, 1);
    EXPECT_EQ(t.train.size(), 14u);
    EXPECT_EQ(t.validation.size(), 1u);
    EXPECT_EQ(t.test.size(), 5u);
    EXPECT_THROW(split_indices(0, 1), ArgumentError);
}

TEST(Split, DisjointCoverDeterministicPerSeed) {
    for (std::size_t n : {1u, 7u, 20u, 33u, 101u}) {
        const auto s = split_indices(n, 42);
        std::multiset<std::size_t> all(s.train.begin(), s.train.end());
        all.insert(s.validation.begin(), s.validation.end());
        all.insert(s.test.begin(), s.test.end());
        std::multiset<std::size_t> expected;
        for (std::size_t i = 0; i < n; ++i) expected.insert(i);
        EXPECT_EQ(all, expected) << n;
        EXPECT_EQ(split_indices(n, 42).train, s.train);
    }
    EXPECT_NE(split_indices(100, 1).train, split_indices(100, 2).train);

    std::vector<int> items(20);
    for (int i = 0; i < 20; ++i) items[i] = i * i;
    const auto ds = split_dataset(items, 5);
    EXPECT_EQ(ds.train.size() + ds.validation.size() + ds.test.size(), 20u);
}

TEST(CropAugment, CornersThenCentre) {
    Tensor img({4, 6, 3});
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = double(i);
    Tensor mask({4, 6});
    mask.at(3, 5) = 1;
    const auto crops = crop_augment({img, mask, "src", "train"}, 2);
    ASSERT_EQ(crops.size(), 5u);
    const std::pair<std::size_t, std::size_t> origins[] = {{0, 0}, {0, 4}, {2, 0}, {2, 4}, {1, 2}};
    for (std::size_t k = 0; k < 5; ++k) {
        EXPECT_EQ(crops[k].image.at(0, 0, 0), img.at(origins[k].first, origins[k].second, 0));
        EXPECT_EQ(crops[k].source_id, "src");
    }
    EXPECT_EQ(crops[3].mask.at(1, 1), 1.0);
    EXPECT_THROW(crop_augment({img, mask, "src", ""}, 5), ArgumentError);
}

TEST(CropAugment, FullSizeCropGivesFiveCopies) {
    std::mt19937_64 rng(3);
    const LabeledSample s{random_image(8, 8, rng), random_mask(8, 8, rng), "a", "train"};
    for (const auto& c : crop_augment(s, 8)) {
        EXPECT_EQ(c.image, s.image);
        EXPECT_EQ(c.mask, s.mask);
    }
}

TEST(PrepareSample, ResizesImageAndKeepsMaskBinary) {
    std::mt19937_64 rng(4);
    const LabeledSample s{random_image(32, 32, rng), random_mask(32, 32, rng), "a", "train"};
    const auto p = prepare_sample(s, 16);
    EXPECT_EQ(p.image.shape(), (Shape{16, 16, 3}));
    EXPECT_TRUE(is_binary_mask(p.mask));
    EXPECT_EQ(prepare_sample(s, 32).image, s.image);
}

TEST(ClassWeights, ClosedForms) {
    Tensor half({2, 2}, std::vector<double>{0, 1, 1, 0});
    const Tensor w = class_weights(std::vector<Tensor>{half});
    EXPECT_DOUBLE_EQ(w[0], 0.5);
    EXPECT_DOUBLE_EQ(w[1], 0.5);

    Tensor tenth({10, 1});
    tenth[3] = 1;
    const Tensor v = class_weights(std::vector<Tensor>{tenth});
    EXPECT_NEAR(v[0], 0.1, 1e-15);
    EXPECT_NEAR(v[1], 0.9, 1e-15);
}

TEST(ClassWeights, MatchesCountingAndFavoursTheRarerClass) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<Tensor> masks{random_mask(7, 9, rng, 0.1 + 0.08 * trial), random_mask(5, 5, rng, 0.5)};
        double pos = 0, total = 0;
        for (const auto& m : masks)
            for (double x : m.values()) pos += x, total += 1;
        const double f1 = pos / total, f0 = 1 - f1;
        const Tensor w = class_weights(masks);
        EXPECT_NEAR(w[0], (1 / f0) / (1 / f0 + 1 / f1), 1e-12);
        EXPECT_NEAR(w[0] + w[1], 1.0, 1e-15);
        if (f0 < f1) EXPECT_GT(w[0], w[1]);
        if (f1 < f0) EXPECT_GT(w[1], w[0]);
    }
}

TEST(ClassWeights, MissingClassNamed) {
    try {
        class_weights(std::vector<Tensor>{Tensor({3, 3})});
        FAIL();
    } catch (const ArgumentError& e) {
        EXPECT_NE(std::string(e.what()).find("manipulated"), std::string::npos);
    }
}

TEST(CrossEntropy, PerfectAndUniform) {
    Tensor mask({2, 2}, std::vector<double>{0, 1, 1, 0});
    Tensor perfect({2, 2, 2});
    for (std::size_t i = 0; i < 4; ++i) perfect[2 * i + std::size_t(mask[i])] = 1.0;
    const Tensor w = Tensor::from({0.3, 0.7});
    EXPECT_EQ(weighted_cross_entropy(perfect, mask, w), 0.0);

    const Tensor uniform({2, 2, 2}, 0.5);
    EXPECT_NEAR(weighted_cross_entropy(uniform, mask, Tensor::from({0.5, 0.5})), 0.5 * std::numbers::ln2, 1e-15);
}

TEST(CrossEntropy, MatchesLoopOracleAndHalvesTheUnweightedLoss) {
    std::mt19937_64 rng(6);
    const Tensor probs = softmax2(random_tensor({6, 5, 2}, rng, -3, 3));
    const Tensor mask = random_mask(6, 5, rng);
    const Tensor w = Tensor::from({0.35, 0.65});
    double oracle = 0, plain = 0;
    for (std::size_t m = 0; m < 30; ++m) {
        const std::size_t y = std::size_t(mask[m]);
        oracle -= w[y] * std::log(probs[2 * m + y]);
        plain -= std::log(probs[2 * m + y]);
    }
    EXPECT_NEAR(weighted_cross_entropy(probs, mask, w), oracle / 30, 1e-12);
    EXPECT_NEAR(weighted_cross_entropy(probs, mask, Tensor::from({0.5, 0.5})), 0.5 * plain / 30, 1e-12);
    EXPECT_GE(weighted_cross_entropy(probs, mask, w), 0.0);
}

TEST(CrossEntropy, ClampsLogAndRejectsNonBinaryMasks) {
    Tensor probs({1, 1, 2}, std::vector<double>{1.0, 0.0});
    const Tensor mask({1, 1}, 1.0);
    EXPECT_NEAR(weighted_cross_entropy(probs, mask, Tensor::from({0.5, 0.5})), -0.5 * std::log(1e-12), 1e-9);
    EXPECT_THROW(weighted_cross_entropy(probs, Tensor({1, 1}, 0.5), Tensor::from({0.5, 0.5})), ArgumentError);
}

TEST(CrossEntropy, LogitGradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(7);
    Tensor logits = random_tensor({4, 4, 2}, rng, -2, 2);
    const Tensor mask = random_mask(4, 4, rng);
    const Tensor w = Tensor::from({0.4, 0.6});
    const Tensor g = weighted_cross_entropy_logit_grad(softmax2(logits), mask, w);
    auto loss = [&] { return weighted_cross_entropy(softmax2(logits), mask, w); };
    const auto r = grad_check(loss, logits.values(), g.values(), 1e-6);
    EXPECT_TRUE(r.passed) << r.summary();
}

TEST(Adam, FirstStepMovesByLearningRateTimesSign) {
    NamedTensors params{{"p", Tensor::from({1.0, -2.0, 0.5})}};
    const NamedTensors grads{{"p", Tensor::from({0.3, -4.0, 1e-3})}};
    OptimizerState state;
    AdamConfig cfg;
    cfg.learning_rate = 0.01;
    adam_step(params, grads, state, cfg);
    EXPECT_EQ(state.step, 1u);
    const double expected[] = {1.0 - 0.01 * 0.3 / (0.3 + 1e-8), -2.0 + 0.01 * 4.0 / (4.0 + 1e-8),
                               0.5 - 0.01 * 1e-3 / (1e-3 + 1e-8)};
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(params.at("p")[i], expected[i], 1e-15);
}

TEST(Adam, ZeroGradientStillCountsTheStep) {
    NamedTensors params{{"p", Tensor::from({1.0, 2.0})}};
    const NamedTensors before = params;
    OptimizerState state;
    adam_step(params, {{"p", Tensor({2})}}, state, {});
    adam_step(params, {{"p", Tensor({2})}}, state, {});
    EXPECT_EQ(params, before);
    EXPECT_EQ(state.step, 2u);
}

TEST(Adam, QuadraticBowlDescendsMonotonically) {
    // Scalar simulation of the same recurrences as the oracle.
    NamedTensors params{{"x", Tensor::from({3.0, -1.5})}};
    OptimizerState state;
    AdamConfig cfg;
    cfg.learning_rate = 0.1;
    double m[2] = {0, 0}, v[2] = {0, 0}, x[2] = {3.0, -1.5};
    auto f = [](const Tensor& t) { return t[0] * t[0] + 4 * t[1] * t[1]; };
    double prev = f(params.at("x"));
    for (int step = 1; step <= 3; ++step) {
        const Tensor& p = params.at("x");
        adam_step(params, {{"x", Tensor::from({2 * p[0], 8 * p[1]})}}, state, cfg);
        for (int i = 0; i < 2; ++i) {
            const double g = i == 0 ? 2 * x[0] : 8 * x[1];
            m[i] = 0.9 * m[i] + 0.1 * g;
            v[i] = 0.999 * v[i] + 0.001 * g * g;
            const double mh = m[i] / (1 - std::pow(0.9, step)), vh = v[i] / (1 - std::pow(0.999, step));
            x[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
            EXPECT_NEAR(params.at("x")[i], x[i], 1e-14);
        }
        const double now = f(params.at("x"));
        EXPECT_LT(now, prev);
        prev = now;
    }
}

TEST(Adam, NonFiniteGradientNamesTheParameterAndChangesNothing) {
    NamedTensors params{{"a", Tensor::from({1.0})}, {"b", Tensor::from({1.0})}};
    const NamedTensors before = params;
    OptimizerState state;
    try {
        adam_step(params, {{"a", Tensor::from({1.0})}, {"b", Tensor::from({std::nan("")})}}, state, {});
        FAIL();
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("b"), std::string::npos);
    }
    EXPECT_EQ(params, before);
}

TEST(TrainConfig, DeskDefaultsJsonAndValidation) {
    const auto d = TrainConfig::desk();
    EXPECT_EQ(d.batch_size, 2u);
    EXPECT_EQ(TrainConfig::full().batch_size, 4u);
    EXPECT_EQ(d.adam.learning_rate, 1e-3);
    const auto back = TrainConfig::from_json(d.to_json(), TrainConfig::full());
    EXPECT_EQ(back.batch_size, 2u);
    EXPECT_THROW(TrainConfig::from_json({{"class_weights", {0.5, 0.6}}}, d), ArgumentError);
    EXPECT_THROW(TrainConfig::from_json({{"batch_size", 0}}, d), ArgumentError);
}

TEST(Train, ZeroLearningRateLeavesParametersAlone) {
    Model model = Model::initialize(toy_network_config(), 1);
    const auto before = model.params().tensors;
    const auto samples = toy_samples(4, 2);
    TrainConfig cfg = TrainConfig::desk();
    cfg.adam.learning_rate = 0.0;
    cfg.batch_size = 4;
    cfg.iterations = 6;
    const auto r = train(model, samples, {}, cfg);
    EXPECT_EQ(model.params().tensors, before);
    ASSERT_EQ(r.loss_history.size(), 6u);
    for (double l : r.loss_history) EXPECT_NEAR(l, r.loss_history[0], 1e-12);
}

TEST(Train, FixedSeedReplaysBitwise) {
    const auto samples = toy_samples(5, 3);
    TrainConfig cfg = TrainConfig::desk();
    cfg.iterations = 12;
    cfg.checkpoint_every = 5;
    cfg.seed = 9;
    Model a = Model::initialize(toy_network_config(), 4), b = Model::initialize(toy_network_config(), 4);
    const auto ra = train(a, samples, {samples[0]}, cfg);
    const auto rb = train(b, samples, {samples[0]}, cfg);
    EXPECT_EQ(ra.loss_history, rb.loss_history);
    EXPECT_EQ(a.params().tensors, b.params().tensors);
    EXPECT_EQ(ra.validation_history.size(), 3u);  // 5, 10 and the last iteration
    EXPECT_EQ(ra.validation_history.back().first, 12u);
}

TEST(Train, EachEpochVisitsEverySampleOnce) {
    // With batch 1 the monitor sees loss per sample; an epoch's multiset of
    // losses at lr 0 must equal the per-sample losses.
    const auto samples = toy_samples(3, 4);
    Model model = Model::initialize(toy_network_config(), 5);
    TrainConfig cfg = TrainConfig::desk();
    cfg.adam.learning_rate = 0.0;
    cfg.batch_size = 1;
    cfg.iterations = 6;
    const auto r = train(model, samples, {}, cfg);
    const std::multiset<double> first(r.loss_history.begin(), r.loss_history.begin() + 3);
    const std::multiset<double> second(r.loss_history.begin() + 3, r.loss_history.end());
    EXPECT_EQ(first, second);
    EXPECT_EQ(first.size(), 3u);
}

TEST(Train, DivergenceRestoresTheLastGoodCheckpoint) {
    Model model = Model::initialize(toy_network_config(), 6);
    const auto samples = toy_samples(4, 5);
    TrainConfig cfg = TrainConfig::desk();
    cfg.adam.learning_rate = 1e300;
    cfg.iterations = 20;
    const auto before = model.params().tensors;
    const auto r = train(model, samples, {}, cfg);
    EXPECT_TRUE(r.diverged);
    EXPECT_LT(r.iterations_run, 20u);
    EXPECT_EQ(model.params().tensors, before);
    EXPECT_TRUE(model.params().all_finite());
}

TEST(Train, MonitorCanStopAndCheckpointsAreWritten) {
    floc::testing::TempDir dir("train");
    Model model = Model::initialize(toy_network_config(), 7);
    TrainConfig cfg = TrainConfig::desk();
    cfg.iterations = 50;
    cfg.checkpoint_every = 4;
    cfg.checkpoint_dir = dir.path() / "ck";
    std::vector<std::size_t> seen;
    const auto r = train(model, toy_samples(4, 6), {}, cfg, [&](std::size_t it, Model&, const TrainResult&) {
        seen.push_back(it);
        return it < 8;
    });
    EXPECT_TRUE(r.stopped_early);
    EXPECT_EQ(seen, (std::vector<std::size_t>{4, 8}));
    EXPECT_EQ(r.iterations_run, 8u);
    EXPECT_TRUE(std::filesystem::exists(dir.path() / "ck" / "best.floc"));
    EXPECT_TRUE(std::filesystem::exists(dir.path() / "ck" / "last.floc"));
    EXPECT_NO_THROW(ModelParams::from_checkpoint(toy_network_config(), r.best_checkpoint));
}

TEST(Train, LossCsvLayout) {
    TrainResult r;
    r.loss_history = {0.5, 0.25};
    r.validation_history = {{2, 0.125}};
    std::ostringstream out;
    write_loss_csv(out, r);
    EXPECT_EQ(out.str(), "iteration,train_loss,validation_loss\n1,0.5,\n2,0.25,0.125\n");
}

TEST(Manifest, ReadAndWriteLines) {
    floc::testing::TempDir dir("manifest");
    const ManifestRecord rec{"images/a.png", "masks/a.png", "train", "src0", {{"crop", 2}}};
    const std::string line = manifest_line(rec);
    EXPECT_EQ(line.find("{\"image\":\"images/a.png\""), 0u);
    {
        std::ofstream f(dir / "m.jsonl");
        f << line << "\n\n" << R"({"image":"b.png","mask":"bm.png"})" << "\n";
    }
    const auto recs = read_manifest(dir / "m.jsonl");
    ASSERT_EQ(recs.size(), 2u);
    EXPECT_EQ(recs[0].split, "train");
    EXPECT_EQ(recs[0].extra.at("crop"), 2);
    EXPECT_EQ(recs[1].split, "");
    {
        std::ofstream f(dir / "bad.jsonl");
        f << "{not json\n";
    }
    EXPECT_THROW(read_manifest(dir / "bad.jsonl"), ArgumentError);
}
