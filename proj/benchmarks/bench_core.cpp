#include <benchmark/benchmark.h>

#include "transnetr/model.hpp"
#include "transnetr/nn_ops.hpp"
#include "transnetr/rng.hpp"
#include "transnetr/tensor.hpp"
#include "transnetr/train.hpp"

using namespace transnetr;

namespace {

Tensor random_tensor(Rng& rng, Shape shape) {
    std::vector<float> data(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& v : data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    return Tensor::from_vector(std::move(shape), std::move(data));
}

void BM_Conv3x3(benchmark::State& state) {
    const std::int64_t c = state.range(0);
    const std::int64_t hw = state.range(1);
    Rng rng(1);
    auto x = random_tensor(rng, {1, c, hw, hw});
    auto w = random_tensor(rng, {c, c, 3, 3});
    for (auto _ : state) {
        auto y = conv2d(x, w, Tensor{}, 1, 1);
        benchmark::DoNotOptimize(y.values().data());
    }
    state.SetItemsProcessed(state.iterations() * c * c * hw * hw * 9);
}
BENCHMARK(BM_Conv3x3)->Args({64, 32})->Args({128, 32})->Args({64, 64});

void BM_Conv1x1(benchmark::State& state) {
    const std::int64_t c = state.range(0);
    const std::int64_t hw = state.range(1);
    Rng rng(2);
    auto x = random_tensor(rng, {1, c, hw, hw});
    auto w = random_tensor(rng, {c, c, 1, 1});
    for (auto _ : state) {
        auto y = conv2d(x, w, Tensor{}, 1, 0);
        benchmark::DoNotOptimize(y.values().data());
    }
    state.SetItemsProcessed(state.iterations() * c * c * hw * hw);
}
BENCHMARK(BM_Conv1x1)->Args({256, 32})->Args({1024, 16});

void BM_Softmax(benchmark::State& state) {
    Rng rng(3);
    auto x = random_tensor(rng, {4, 4, 256, 256});
    for (auto _ : state) {
        auto y = softmax(x);
        benchmark::DoNotOptimize(y.values().data());
    }
}
BENCHMARK(BM_Softmax);

void BM_ForwardEval(benchmark::State& state) {
    ModelConfig cfg;
    cfg.encoder_preset = state.range(0) == 0 ? EncoderPreset::Tiny : EncoderPreset::ResNet50;
    auto model = build_model(cfg, 1);
    const std::int64_t size = cfg.effective_train_height();
    Rng rng(4);
    auto image = random_tensor(rng, {1, 3, size, size});
    for (auto _ : state) {
        auto y = model.forward(image, false);
        benchmark::DoNotOptimize(y.values().data());
    }
}
BENCHMARK(BM_ForwardEval)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
    ModelConfig cfg;
    cfg.encoder_preset = EncoderPreset::Tiny;
    auto model = build_model(cfg, 1);
    AdamOptimizer opt(model.registry(), 1e-4);
    Rng rng(5);
    auto image = random_tensor(rng, {4, 3, 64, 64});
    std::vector<float> mv(4 * 64 * 64);
    for (auto& v : mv) v = rng.bernoulli(0.3) ? 1.0f : 0.0f;
    auto mask = Tensor::from_vector({4, 1, 64, 64}, std::move(mv));
    for (auto _ : state) {
        Tape tape;
        auto loss = bce_dice_loss(model.forward(image, true), mask);
        tape.backward(loss);
        opt.step();
        opt.zero_grad();
        benchmark::DoNotOptimize(loss.item());
    }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
