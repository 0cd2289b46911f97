#include <benchmark/benchmark.h>

#include <random>

#include "floc/layers.hpp"
#include "floc/network.hpp"
#include "floc/resampling.hpp"
#include "support.hpp"

using namespace floc;

namespace {

void BM_Conv2d(benchmark::State& state) {
    const auto side = static_cast<std::size_t>(state.range(0));
    const auto channels = static_cast<std::size_t>(state.range(1));
    std::mt19937_64 rng(1);
    const Tensor input = testing::random_tensor({side, side, channels}, rng);
    const Tensor kernel = testing::random_tensor({3, 3, channels, channels}, rng);
    const Tensor bias = testing::random_tensor({channels}, rng);
    for (auto _ : state) benchmark::DoNotOptimize(conv2d(input, kernel, bias));
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(side * side));
}
BENCHMARK(BM_Conv2d)->Args({64, 16})->Args({128, 8})->Args({256, 3})->Unit(benchmark::kMillisecond);

void BM_PatchFeatures(benchmark::State& state) {
    // Full profile: 32 px patches, desk profile: 16 px.
    const auto side = static_cast<std::size_t>(state.range(0));
    const auto cfg = side == 32 ? FeatureConfig::full() : FeatureConfig::desk();
    std::mt19937_64 rng(2);
    const Tensor patch = testing::random_image(side, side, rng);
    for (auto _ : state) benchmark::DoNotOptimize(patch_features(patch, cfg));
}
BENCHMARK(BM_PatchFeatures)->Arg(16)->Arg(32)->Unit(benchmark::kMicrosecond);

void BM_DeskPredict(benchmark::State& state) {
    const auto cfg = NetworkConfig::desk();
    Model model = Model::initialize(cfg, 1);
    std::mt19937_64 rng(3);
    const Tensor image = testing::random_image(cfg.input_side, cfg.input_side, rng);
    // Seed the batch-norm statistics so infer mode is available.
    const std::vector<Tensor> batch{image};
    model.forward(batch, {}, Mode::Train);
    for (auto _ : state) benchmark::DoNotOptimize(model.predict(image));
}
BENCHMARK(BM_DeskPredict)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
