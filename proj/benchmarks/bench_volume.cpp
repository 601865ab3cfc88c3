#include <benchmark/benchmark.h>

#include "lmk/matcher.hpp"
#include "lmk/patch.hpp"
#include "lmk/random.hpp"
#include "lmk/sift3d.hpp"

namespace {

using namespace lmk;

Volume3D noise_volume(int side, std::uint64_t seed) {
    Volume3D v({side, side, side}, {0.5, 0.5, 0.5});
    Rng rng(seed);
    for (auto& x : v.data()) x = static_cast<float>(rng.uniform());
    return v;
}

void BM_GaussianBlur(benchmark::State& state) {
    const auto v = noise_volume(static_cast<int>(state.range(0)), 1);
    for (auto _ : state) benchmark::DoNotOptimize(gaussian_blur(v, 1.6));
    state.SetItemsProcessed(state.iterations() * static_cast<long>(v.size()));
}
BENCHMARK(BM_GaussianBlur)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

void BM_ExtractSeries(benchmark::State& state) {
    const auto v = noise_volume(128, 2);
    std::vector<float> buf(kPatchPixels);
    const Vec3 c{31.7, 30.2, 33.9};
    for (auto _ : state) {
        for (Axis a : kAllAxes) extract_series_into(v, c, a, buf.data());
        benchmark::ClobberMemory();
    }
}
BENCHMARK(BM_ExtractSeries)->Unit(benchmark::kMicrosecond);

void BM_CandidateGrid(benchmark::State& state) {
    SearchConfig cfg;
    for (auto _ : state) benchmark::DoNotOptimize(candidate_grid({10.0, 10.0, 10.0}, cfg));
}
BENCHMARK(BM_CandidateGrid)->Unit(benchmark::kMicrosecond);

void BM_ScaleSpace(benchmark::State& state) {
    const auto v = noise_volume(64, 3);
    for (auto _ : state) benchmark::DoNotOptimize(build_scale_space(v));
}
BENCHMARK(BM_ScaleSpace)->Unit(benchmark::kMillisecond);

}  // namespace
