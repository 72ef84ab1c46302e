#include <doctest.h>

#include <stdexcept>

#include <limits>
#include <sstream>

#include "effseg/flops.hpp"
#include "effseg/oracle.hpp"
#include "effseg/rng.hpp"
#include "effseg/scene.hpp"
#include "oracles.hpp"

using namespace effseg;
namespace oz = testing_oracles;

TEST_CASE("dense stage oracle equals the sparse stage when everything is active") {
    const int feat0 = 16;
    const SyntheticScene scene = generate_scene(1200, 2, 128, 128);
    const FeaturePyramid pyramid = scene.make_pyramid(feat0);
    const std::vector<RoiDetection> rois = scene.detections(feat0);
    const PipelineWeights weights = make_seeded_weights(77, feat0, feat0, true, Processing::Sfm);

    StageOutputs prev = stage0(pyramid, rois, weights);
    for (int s = 1; s <= 3; ++s) {
        const StageOutputs sparse = refine_stage(prev, s, pyramid, rois, weights,
                                                 std::numeric_limits<int>::max(),
                                                 prev.refine_scores);
        StageOutputs dense_prev = prev;
        if (s > 1) dense_prev.features = to_dense(prev.sps);
        const StageOutputs dense =
            oracle::dense_stage_oracle(dense_prev, s, pyramid, rois, weights);

        const DenseGrid got = to_dense(sparse.sps);
        for (std::size_t i = 0; i < got.data().size(); ++i)
            CHECK(oz::close(got.data()[i], dense.features.data()[i]));

        // All-active means the sparse logit of row a sits at cell a's position.
        const std::vector<CellRef> cells = active_positions(sparse.sps);
        for (int a = 0; a < sparse.sps.n_active; ++a) {
            const std::size_t flat =
                (static_cast<std::size_t>(cells[a].roi) * sparse.grid_h + cells[a].row) *
                    sparse.grid_w +
                cells[a].col;
            CHECK(oz::close(sparse.seg_logits[a], dense.seg_logits[flat]));
            CHECK(oz::close(sparse.refine_logits[a], dense.refine_logits[flat]));
        }
        prev = sparse;
    }
}

TEST_CASE("dense stage oracle keeps spatially constant inputs constant") {
    const int feat = 8;
    PipelineWeights weights = make_zero_weights(feat, feat, true, Processing::Sfm);
    for (int c = 0; c < 4; ++c) weights.stages[0].child[c] = MlpParams::identity2(feat);
    // halve sums pairs; fuse and processing stay zero-output
    for (int i = 0; i < feat / 2; ++i) weights.stages[0].halve.layers[0].w(i, 2 * i) = 1.0f;

    StageOutputs prev;
    prev.stage = 0;
    prev.n_rois = 1;
    prev.grid_h = prev.grid_w = 4;
    prev.features = DenseGrid(1, feat, 4, 4);
    for (int c = 0; c < feat; ++c)
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) prev.features.at(0, c, i, j) = 0.5f * (c + 1);
    prev.seg_logits.assign(16, 0.0f);
    prev.refine_logits.assign(16, 0.0f);
    prev.refine_scores.assign(16, 0.5f);

    const FeaturePyramid pyramid = FeaturePyramid::random(64, 64, feat, 5);
    std::vector<RoiDetection> rois(1);
    rois[0].box = {4, 4, 36, 36};
    rois[0].query.assign(feat, 0.0f);

    const StageOutputs out = oracle::dense_stage_oracle(prev, 1, pyramid, rois, weights);
    for (int c = 0; c < out.features.channels(); ++c) {
        const float v = out.features.at(0, c, 0, 0);
        for (int i = 0; i < 8; ++i)
            for (int j = 0; j < 8; ++j) CHECK(out.features.at(0, c, i, j) == v);
    }
}

TEST_CASE("dense stage oracle on a 2x2 grid with hand-sized weights") {
    // Children add their child index, fusion is zero, halving sums the two
    // channels, processing is the center-tap identity, the seg head computes
    // relu(2v) + 0.5.
    PipelineWeights weights = make_zero_weights(8, 8, true, Processing::Conv);
    StageWeights& sw = weights.stages[0];
    for (int c = 0; c < 4; ++c) {
        sw.child[c] = MlpParams::identity2(2);
        sw.child[c].layers[1].bias = {static_cast<float>(c), static_cast<float>(c)};
    }
    sw.fuse = MlpParams::zeros2(2, 2, 2 + 4);
    sw.halve = MlpParams::zeros1(1, 2);
    sw.halve.layers[0].weight = {1.0f, 1.0f};
    sw.processing = ConvKernel::identity(1);
    sw.heads.seg = MlpParams::zeros2(1, 1, 1);
    sw.heads.seg.layers[0].w(0, 0) = 2.0f;
    sw.heads.seg.layers[1].w(0, 0) = 1.0f;
    sw.heads.seg.layers[1].bias[0] = 0.5f;
    sw.heads.refine = MlpParams::zeros2(1, 1, 1);

    StageOutputs prev;
    prev.stage = 0;
    prev.n_rois = 1;
    prev.grid_h = prev.grid_w = 2;
    prev.features = DenseGrid(1, 2, 2, 2);
    prev.features.at(0, 0, 0, 0) = 1;
    prev.features.at(0, 0, 0, 1) = 2;
    prev.features.at(0, 0, 1, 0) = 3;
    prev.features.at(0, 0, 1, 1) = 4;
    prev.features.at(0, 1, 0, 0) = 5;
    prev.features.at(0, 1, 0, 1) = 6;
    prev.features.at(0, 1, 1, 0) = 7;
    prev.features.at(0, 1, 1, 1) = 8;
    prev.seg_logits.assign(4, 0.0f);
    prev.refine_logits.assign(4, 0.0f);
    prev.refine_scores.assign(4, 0.5f);

    const FeaturePyramid pyramid = FeaturePyramid::random(64, 64, 4, 6);
    std::vector<RoiDetection> rois(1);
    rois[0].box = {4, 4, 20, 20};
    rois[0].query.assign(2, 0.0f);

    const StageOutputs out = oracle::dense_stage_oracle(prev, 1, pyramid, rois, weights);
    // Halved features: parent value sum + 2*child index.
    const float expect_feat[4][4] = {{6, 8, 8, 10}, {10, 12, 12, 14}, {10, 12, 12, 14},
                                     {14, 16, 16, 18}};
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
            CHECK(out.features.at(0, 0, i, j) == expect_feat[i][j]);
            CHECK(out.seg_logits[static_cast<std::size_t>(i) * 4 + j] ==
                  2.0f * expect_feat[i][j] + 0.5f);
        }
}

TEST_CASE("sparse-on-dense oracle edge selections") {
    const int feat0 = 16;
    Rng rng(88);
    const PipelineWeights weights = make_seeded_weights(99, feat0, feat0, true, Processing::Sfm);
    const FeaturePyramid pyramid = FeaturePyramid::random(96, 96, feat0, 12);
    std::vector<RoiBox> boxes = {{5, 5, 60, 70}};
    std::vector<RoiDetection> rois(1);
    rois[0].box = boxes[0];
    rois[0].query.assign(feat0, 0.0f);

    DenseGrid prev = oz::random_grid(rng, 1, feat0, 6, 6);

    SUBCASE("empty selection degenerates to upsample plus shared halving") {
        const oracle::SparseOnDenseStage out = oracle::sparse_on_dense_oracle(
            prev, std::vector<std::uint8_t>(36, 0), 1, pyramid, boxes, weights);
        const DenseGrid want =
            oracle::dense_halve(oracle::nn_upsample2(prev), weights.stages[0].halve);
        CHECK(out.features.data() == want.data());
        for (std::uint8_t a : out.active) CHECK(a == 0);
    }
    SUBCASE("full selection equals the dense stage oracle exactly") {
        StageOutputs prev_stage;
        prev_stage.stage = 0;
        prev_stage.n_rois = 1;
        prev_stage.grid_h = prev_stage.grid_w = 6;
        prev_stage.features = prev;
        prev_stage.seg_logits.assign(36, 0.0f);
        prev_stage.refine_logits.assign(36, 0.0f);
        prev_stage.refine_scores.assign(36, 0.5f);

        const oracle::SparseOnDenseStage got = oracle::sparse_on_dense_oracle(
            prev, std::vector<std::uint8_t>(36, 1), 1, pyramid, boxes, weights);
        const StageOutputs want =
            oracle::dense_stage_oracle(prev_stage, 1, pyramid, rois, weights);
        CHECK(got.features.data() == want.features.data());
        CHECK(got.seg_logits == want.seg_logits);
    }
    SUBCASE("selection mask size is checked") {
        CHECK_THROWS_AS(oracle::sparse_on_dense_oracle(prev, std::vector<std::uint8_t>(35, 0), 1,
                                                       pyramid, boxes, weights),
                        std::invalid_argument);
    }
}

TEST_CASE("flop accounting formulas") {
    SUBCASE("one conv site at one channel costs nine MACs") {
        CHECK(record_macs({"conv3x3", "sparse", 1, 1, 1, 1, true, 0}) == 9);
    }
    SUBCASE("linear and bilinear records") {
        CHECK(record_macs({"linear", "dense", 0, 10, 32, 16, false, 0}) == 10 * 32 * 16);
        CHECK(record_macs({"bilinear", "sparse", 2, 9, 8, 1, true, 0}) == 9 * 4 * 8);
        CHECK(record_macs({"stage", "sparse", 1, 100, 0, 0, false, 400}) == 0);
    }
    SUBCASE("unknown ops are rejected") {
        FlopTrace trace = {{"fft", "sparse", 0, 1, 1, 1, false, 0}};
        CHECK_THROWS_AS(count_flops(trace), std::invalid_argument);
        FlopTrace bad_path = {{"linear", "gpu", 0, 1, 1, 1, false, 0}};
        CHECK_THROWS_AS(count_flops(bad_path), std::invalid_argument);
    }
    SUBCASE("conv-only stage ratio cancels to the site ratio") {
        FlopTrace trace;
        trace.push_back({"conv3x3", "sparse", 1, 25, 16, 16, true, 0});
        trace.push_back({"conv3x3", "dense", 1, 100, 16, 16, true, 0});
        trace.push_back({"stage", "sparse", 1, 25, 0, 0, false, 100});
        const FlopReport report = count_flops(trace);
        CHECK(report.processing_ratio == doctest::Approx(0.25).epsilon(1e-12));
        CHECK(report.stages[1].active_fraction_sparse == doctest::Approx(0.25).epsilon(1e-12));
    }
    SUBCASE("gather overhead is tracked but excluded from ratios") {
        FlopTrace trace;
        trace.push_back({"conv3x3", "sparse", 1, 10, 4, 4, true, 0});
        trace.push_back({"conv3x3", "dense", 1, 10, 4, 4, true, 0});
        trace.push_back({"gather", "sparse", 1, 10, 0, 0, true, 360});
        const FlopReport report = count_flops(trace);
        CHECK(report.gather_elements == 360);
        CHECK(report.total_ratio == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("report layout is stable") {
        FlopTrace trace;
        trace.push_back({"linear", "sparse", 0, 5, 4, 4, false, 0});
        trace.push_back({"linear", "dense", 0, 5, 4, 4, false, 0});
        const FlopReport report = count_flops(trace);
        std::stringstream a, b;
        report.write(a);
        report.write(b);
        CHECK(a.str() == b.str());
        CHECK(a.str().find("columns stage active_fraction sparse_proc_macs") != std::string::npos);
    }
}

TEST_CASE("pipeline traces account sparse and dense paths consistently") {
    const int feat0 = 16;
    const SyntheticScene scene = generate_scene(1300, 1, 96, 96);
    const FeaturePyramid pyramid = scene.make_pyramid(feat0);
    const std::vector<RoiDetection> rois = scene.detections(feat0);
    const PipelineWeights weights = make_seeded_weights(31, feat0, feat0, true, Processing::Sfm);
    PipelineConfig config;
    config.feat0 = feat0;
    config.backbone_channels = feat0;
    config.k_budget = std::numeric_limits<int>::max();

    FlopTrace trace;
    run_pipeline(pyramid, rois, weights, config, nullptr, &trace);
    oracle::run_dense_pipeline(pyramid, rois, weights, &trace);
    const FlopReport report = count_flops(trace);
    // Everything active: both paths do identical arithmetic.
    CHECK(report.sparse_total == report.dense_total);
    CHECK(report.total_ratio == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(report.processing_ratio == doctest::Approx(1.0).epsilon(1e-12));
    for (int s = 1; s <= 3; ++s)
        CHECK(report.stages[s].active_fraction_sparse == doctest::Approx(1.0).epsilon(1e-12));
}
