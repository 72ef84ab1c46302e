#include <benchmark/benchmark.h>

#include "effseg/oracle.hpp"
#include "effseg/scene.hpp"

using namespace effseg;

namespace {

constexpr int kFeat0 = 64;

struct PipelineFixture {
    SyntheticScene scene = generate_scene(2718, 2, 160, 160);
    FeaturePyramid pyramid = scene.make_pyramid(kFeat0);
    std::vector<RoiDetection> rois = scene.detections(kFeat0);
    PipelineWeights weights = make_seeded_weights(3, kFeat0, kFeat0, true, Processing::Sfm);
};

const PipelineFixture& fixture() {
    static PipelineFixture f;
    return f;
}

} // namespace

// Whole sparse head at a given active budget per stage (permille of cells).
static void BM_PipelineSparse(benchmark::State& state) {
    const PipelineFixture& f = fixture();
    PipelineConfig config;
    config.feat0 = kFeat0;
    config.backbone_channels = kFeat0;

    const double frac = state.range(0) / 1000.0;
    RunOverrides overrides;
    const int sides[3] = {14, 28, 56};
    for (int s = 0; s < 3; ++s)
        overrides.k_stage[s] = static_cast<int>(frac * 2 * sides[s] * sides[s]) + 1;

    for (auto _ : state) {
        PipelineRun run = run_pipeline(f.pyramid, f.rois, f.weights, config, &overrides);
        benchmark::DoNotOptimize(run.stages[3].seg_logits.data());
    }
}
BENCHMARK(BM_PipelineSparse)->Arg(50)->Arg(100)->Arg(250)->Unit(benchmark::kMillisecond);

// Dense baseline head: every cell recomputed at every stage.
static void BM_PipelineDense(benchmark::State& state) {
    const PipelineFixture& f = fixture();
    for (auto _ : state) {
        oracle::DenseRun run = oracle::run_dense_pipeline(f.pyramid, f.rois, f.weights);
        benchmark::DoNotOptimize(run.stages[3].seg_logits.data());
    }
}
BENCHMARK(BM_PipelineDense)->Unit(benchmark::kMillisecond);

static void BM_MaskAssemblyAndPaste(benchmark::State& state) {
    const PipelineFixture& f = fixture();
    PipelineConfig config;
    config.feat0 = kFeat0;
    config.backbone_channels = kFeat0;
    config.k_budget = 300;
    const PipelineRun run = run_pipeline(f.pyramid, f.rois, f.weights, config);
    for (auto _ : state) {
        const std::vector<MaskStack> masks = assemble_masks(run.stages);
        const std::vector<double> pasted = paste_roi(masks[0].levels[3], 112, 112,
                                                     f.rois[0].box, 160, 160);
        benchmark::DoNotOptimize(pasted.data());
    }
}
BENCHMARK(BM_MaskAssemblyAndPaste)->Unit(benchmark::kMillisecond);

int main(int argc, char** argv) {
    benchmark::Initialize(&argc, argv);
    if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
    benchmark::RunSpecifiedBenchmarks();
    benchmark::Shutdown();
    return 0;
}
