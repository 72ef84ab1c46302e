#include <benchmark/benchmark.h>

#include "effseg/oracle.hpp"
#include "effseg/rng.hpp"
#include "effseg/scene.hpp"
#include "effseg/sparse_ops.hpp"

using namespace effseg;

namespace {

constexpr int kGrid = 56;
constexpr int kFeat = 32;

SpsMap bench_map(int active_permille) {
    return random_sps_map(4242, 2, kGrid, kGrid, kFeat, active_permille / 1000.0);
}

SfmParams bench_sfm_params() {
    Rng rng(7);
    SfmParams p{ConvKernel(kFeat, kFeat, 1), ConvKernel(kFeat, kFeat, 3),
                ConvKernel(kFeat, kFeat, 5)};
    for (ConvKernel* k : {&p.conv_d1, &p.conv_d3, &p.conv_d5}) {
        for (float& w : k->weights) w = rng.uniform_f(-0.5f, 0.5f);
        for (float& b : k->bias) b = rng.uniform_f(-0.5f, 0.5f);
    }
    return p;
}

} // namespace

static void BM_SparseConv3x3(benchmark::State& state) {
    const SpsMap sps = bench_map(static_cast<int>(state.range(0)));
    Rng rng(3);
    ConvKernel kernel(kFeat, kFeat, 1);
    for (float& w : kernel.weights) w = rng.uniform_f(-0.5f, 0.5f);
    for (auto _ : state) {
        SpsMap out = sparse_conv3x3(sps, kernel);
        benchmark::DoNotOptimize(out.active.data());
    }
    state.counters["active_rows"] = sps.n_active;
}
BENCHMARK(BM_SparseConv3x3)->Arg(50)->Arg(100)->Arg(250)->Arg(1000);

static void BM_DenseConv3x3(benchmark::State& state) {
    const DenseGrid dense = to_dense(bench_map(250));
    Rng rng(3);
    ConvKernel kernel(kFeat, kFeat, 1);
    for (float& w : kernel.weights) w = rng.uniform_f(-0.5f, 0.5f);
    for (auto _ : state) {
        DenseGrid out = dense_conv2d(dense, kernel);
        benchmark::DoNotOptimize(out.data().data());
    }
}
BENCHMARK(BM_DenseConv3x3);

static void BM_SparseSfm(benchmark::State& state) {
    const SpsMap sps = bench_map(static_cast<int>(state.range(0)));
    const SfmParams params = bench_sfm_params();
    for (auto _ : state) {
        SpsMap out = sfm(sps, params);
        benchmark::DoNotOptimize(out.active.data());
    }
    state.counters["active_rows"] = sps.n_active;
}
BENCHMARK(BM_SparseSfm)->Arg(50)->Arg(100)->Arg(250)->Arg(1000);

static void BM_DenseSfm(benchmark::State& state) {
    const DenseGrid dense = to_dense(bench_map(250));
    const SfmParams params = bench_sfm_params();
    for (auto _ : state) {
        DenseGrid out = oracle::dense_sfm(dense, params);
        benchmark::DoNotOptimize(out.data().data());
    }
}
BENCHMARK(BM_DenseSfm);

static void BM_GatherNeighborhood(benchmark::State& state) {
    const SpsMap sps = bench_map(250);
    const auto offsets = conv_offsets(static_cast<int>(state.range(0)));
    const auto cells = active_positions(sps);
    std::vector<float> taps(offsets.size() * kFeat);
    std::size_t next = 0;
    for (auto _ : state) {
        gather_neighborhood(sps, cells[next % cells.size()], offsets, taps.data());
        benchmark::DoNotOptimize(taps.data());
        ++next;
    }
}
BENCHMARK(BM_GatherNeighborhood)->Arg(1)->Arg(3)->Arg(5);

static void BM_UpsampleSplit(benchmark::State& state) {
    const SpsMap sps = random_sps_map(99, 2, 28, 28, kFeat, 0.25);
    std::array<MlpParams, 4> child;
    Rng rng(11);
    for (int c = 0; c < 4; ++c) {
        child[c] = MlpParams::zeros2(kFeat, kFeat, kFeat);
        for (auto& layer : child[c].layers)
            for (float& w : layer.weight) w = rng.uniform_f(-0.5f, 0.5f);
    }
    for (auto _ : state) {
        SpsMap out = upsample_split(sps, child);
        benchmark::DoNotOptimize(out.index.data());
    }
}
BENCHMARK(BM_UpsampleSplit);

int main(int argc, char** argv) {
    benchmark::Initialize(&argc, argv);
    if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
    benchmark::RunSpecifiedBenchmarks();
    benchmark::Shutdown();
    return 0;
}
