// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include <numeric>

#include "cbdes/dataset.hpp"
#include "cbdes/layers.hpp"
#include "cbdes/model.hpp"
#include "cbdes/moe.hpp"
#include "cbdes/ops.hpp"

using namespace cbdes;

namespace {

MoeModel& shared_model() {
    static MoeModel model(ModelConfig{}, 1);
    return model;
}

Tensor images(std::size_t batch) {
    const auto scenes = generate_dataset(batch, 99);
    std::vector<std::size_t> idx(batch);
    std::iota(idx.begin(), idx.end(), 0);
    return stack_images(scenes, idx);
}

// Expert stage only: routing is computed once outside the timed loop.
void BM_ExpertsSoft(benchmark::State& state) {
    auto& model = shared_model();
    const auto x = images(static_cast<std::size_t>(state.range(0)));
    NoGradGuard guard;
    const auto routing = model.router().route(x, Mode::Eval);
    for (auto _ : state) {
        auto outputs = model.experts().forward_all(x, Mode::Eval);
        benchmark::DoNotOptimize(fuse_soft(outputs, routing).data().data());
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_ExpertsTop1(benchmark::State& state) {
    auto& model = shared_model();
    const auto x = images(static_cast<std::size_t>(state.range(0)));
    NoGradGuard guard;
    const auto routing = model.router().route(x, Mode::Eval);
    for (auto _ : state) {
        auto sparse = infer_sparse(model.experts(), routing, x, 1);
        benchmark::DoNotOptimize(sparse.output.data().data());
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_Router(benchmark::State& state) {
    auto& model = shared_model();
    const auto x = images(static_cast<std::size_t>(state.range(0)));
    NoGradGuard guard;
    for (auto _ : state) benchmark::DoNotOptimize(model.router().route(x, Mode::Eval).tensor().data().data());
    state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_Conv3x3(benchmark::State& state) {
    const auto c = static_cast<std::size_t>(state.range(0));
    Initializer init(3);
    const auto x = init.he_normal({4, c, 32, 32}, 1);
    const auto w = init.he_normal({c, c, 3, 3}, 9 * c);
    const auto b = init.he_normal({c}, 1);
    NoGradGuard guard;
    for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, b, 1, 1).data().data());
}

}  // namespace

BENCHMARK(BM_ExpertsSoft)->Arg(1)->Arg(4)->Arg(16)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ExpertsTop1)->Arg(1)->Arg(4)->Arg(16)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Router)->Arg(1)->Arg(4)->Arg(16)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Conv3x3)->Arg(16)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
