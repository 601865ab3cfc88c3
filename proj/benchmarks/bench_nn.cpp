#include <benchmark/benchmark.h>

#include "lmk/contrastive.hpp"
#include "lmk/encoder.hpp"
#include "lmk/random.hpp"

namespace {

using namespace lmk;

nn::Activation<float> random_input(int batch, std::uint64_t seed) {
    nn::Activation<float> in(batch, kPatchSlices, kPatchSide, kPatchSide);
    Rng rng(seed);
    for (Eigen::Index i = 0; i < in.data.size(); ++i) in.data.data()[i] = static_cast<float>(rng.uniform());
    return in;
}

void BM_EncoderForward(benchmark::State& state) {
    const int batch = static_cast<int>(state.range(0));
    const auto params = init_encoder<float>(1);
    const auto in = random_input(batch, 2);
    for (auto _ : state) benchmark::DoNotOptimize(encode(params, in));
    state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_EncoderForward)->Arg(1)->Arg(4)->Arg(8)->Arg(16)->Arg(48)->Unit(benchmark::kMillisecond);

void BM_EncoderForwardBackward(benchmark::State& state) {
    const int batch = static_cast<int>(state.range(0));
    auto params = init_encoder<float>(1);
    const auto in = random_input(batch, 2);
    EncoderGraph<float> graph;
    nn::Matrix<float> grad = nn::Matrix<float>::Ones(kFeatureDim, batch);
    for (auto _ : state) {
        benchmark::DoNotOptimize(graph.forward(params, in));
        benchmark::DoNotOptimize(graph.backward(grad));
    }
    state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_EncoderForwardBackward)->Arg(64)->Arg(320)->Unit(benchmark::kMillisecond);

void BM_Im2col(benchmark::State& state) {
    auto in = random_input(64, 3);
    nn::Matrix<float> cols;
    for (auto _ : state) {
        nn::im2col(in, 1, cols);
        benchmark::ClobberMemory();
    }
}
BENCHMARK(BM_Im2col)->Unit(benchmark::kMillisecond);

void BM_GroupNormForward(benchmark::State& state) {
    nn::Activation<float> x(64, 64, 42, 42);
    x.data.setRandom();
    const nn::Vector<float> scale = nn::Vector<float>::Ones(64), shift = nn::Vector<float>::Zero(64);
    for (auto _ : state) {
        nn::GroupNormCache<float> cache;
        benchmark::DoNotOptimize(nn::group_norm_forward(x, scale, shift, &cache));
    }
}
BENCHMARK(BM_GroupNormForward)->Unit(benchmark::kMillisecond);

void BM_InfoNce(benchmark::State& state) {
    const int n = 64, k = 4;
    nn::Matrix<double> anchors = nn::Matrix<double>::Random(kFeatureDim, n);
    nn::Matrix<double> candidates = nn::Matrix<double>::Random(kFeatureDim, n * (k + 1));
    std::vector<int> pos(n);
    std::vector<std::vector<int>> negs(n);
    for (int i = 0; i < n; ++i) {
        pos[static_cast<std::size_t>(i)] = i;
        for (int j = 0; j < k; ++j) negs[static_cast<std::size_t>(i)].push_back(n + i * k + j);
    }
    for (auto _ : state) benchmark::DoNotOptimize(info_nce(anchors, candidates, pos, negs, 1.0));
}
BENCHMARK(BM_InfoNce)->Unit(benchmark::kMicrosecond);

}  // namespace
