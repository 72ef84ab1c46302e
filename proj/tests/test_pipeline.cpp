#include <doctest.h>

#include <stdexcept>

#include <limits>
#include <set>

#include "effseg/oracle.hpp"
#include "effseg/pipeline.hpp"
#include "effseg/rng.hpp"
#include "effseg/scene.hpp"
#include "oracles.hpp"

using namespace effseg;
namespace oz = testing_oracles;

namespace {

struct HalfPlane final : InstanceMask {
    double boundary_x;
    explicit HalfPlane(double x) : boundary_x(x) {}
    bool contains(double x, double) const override { return x < boundary_x; }
};

struct Everywhere final : InstanceMask {
    bool contains(double, double) const override { return true; }
};

PipelineWeights small_weights(std::uint64_t seed, int feat0, Processing kind = Processing::Sfm) {
    return make_seeded_weights(seed, feat0, feat0, true, kind);
}

} // namespace

TEST_CASE("stage0 wiring") {
    const int feat0 = 16;
    const SyntheticScene scene = generate_scene(900, 2, 96, 96);
    const FeaturePyramid pyramid = scene.make_pyramid(feat0);
    const std::vector<RoiDetection> rois = scene.detections(feat0);

    SUBCASE("zero weights produce the head bias everywhere") {
        PipelineWeights weights = make_zero_weights(feat0, feat0, true, Processing::Sfm);
        weights.stage0_heads.seg.layers[1].bias[0] = 0.7f;
        weights.stage0_heads.refine.layers[1].bias[0] = -0.3f;
        const StageOutputs out = stage0(pyramid, rois, weights);
        CHECK(out.grid_h == 14);
        CHECK(out.grid_w == 14);
        CHECK(out.seg_logits.size() == 2 * 14 * 14);
        for (float v : out.seg_logits) CHECK(v == 0.7f);
        for (float v : out.refine_logits) CHECK(v == -0.3f);
        for (float s : out.refine_scores)
            CHECK(s == doctest::Approx(sigmoid(-0.3)).epsilon(1e-6));
    }
    SUBCASE("matches the straight-line composition of the public ops") {
        const PipelineWeights weights = small_weights(11, feat0);
        const StageOutputs out = stage0(pyramid, rois, weights);

        DenseGrid feats = roi_align_batch(pyramid, rois, 14, 14);
        std::vector<std::vector<float>> queries;
        for (const auto& roi : rois) queries.push_back(roi.query);
        feats = fuse_query(feats, queries, weights.query_fuse);
        for (int k = 0; k < 4; ++k) {
            feats = dense_conv2d(feats, weights.fcn[k]);
            for (float& v : feats.data()) v = v > 0.0f ? v : 0.0f;
        }
        CHECK(out.features.data() == feats.data());

        std::vector<float> cell(feat0);
        float logit = 0.0f;
        std::size_t n = 0;
        for (int r = 0; r < 2; ++r)
            for (int i = 0; i < 14; ++i)
                for (int j = 0; j < 14; ++j) {
                    feats.read_cell(r, i, j, cell.data());
                    weights.stage0_heads.seg.forward(cell.data(), &logit);
                    CHECK(out.seg_logits[n] == logit);
                    ++n;
                }
    }
    SUBCASE("query length mismatch is rejected with the RoI named") {
        const PipelineWeights weights = small_weights(11, feat0);
        std::vector<RoiDetection> bad = rois;
        bad[1].query.resize(feat0 - 1);
        CHECK_THROWS_WITH_AS(stage0(pyramid, bad, weights),
                             doctest::Contains("RoI 1"), std::invalid_argument);
    }
}

TEST_CASE("refine stages double the grid and halve the features") {
    const int feat0 = 32;
    const SyntheticScene scene = generate_scene(901, 1, 128, 128);
    const FeaturePyramid pyramid = scene.make_pyramid(feat0);
    const std::vector<RoiDetection> rois = scene.detections(feat0);
    const PipelineWeights weights = small_weights(12, feat0);
    PipelineConfig config;
    config.feat0 = feat0;
    config.backbone_channels = feat0;
    config.k_budget = 40;

    const PipelineRun run = run_pipeline(pyramid, rois, weights, config);
    const int grids[4] = {14, 28, 56, 112};
    for (int s = 0; s <= 3; ++s) {
        CHECK(run.stages[s].grid_h == grids[s]);
        CHECK(run.stages[s].grid_w == grids[s]);
    }
    for (int s = 1; s <= 3; ++s) {
        CHECK(run.stages[s].sps.feat == feat0 >> s);
        CHECK(!validate(run.stages[s].sps));
        CHECK(run.stages[s].sps.n_active == 4 * 40); // four children per selected parent
    }
    // The chain ends at the 112-grid; no further level exists anywhere.
    const std::vector<MaskStack> masks = assemble_masks(run.stages);
    CHECK(masks[0].levels[3].size() == 112u * 112u);
    CHECK(masks[0].levels.size() == 4);
}

TEST_CASE("default widths: stage0 emits 256-wide features, stages halve to 32") {
    const SyntheticScene scene = generate_scene(906, 1, 96, 96);
    const FeaturePyramid pyramid = scene.make_pyramid(256);
    const std::vector<RoiDetection> rois = scene.detections(256);
    const PipelineWeights weights = small_weights(15, 256);
    PipelineConfig config;
    config.k_budget = 8;

    const PipelineRun run = run_pipeline(pyramid, rois, weights, config);
    CHECK(run.stages[0].features.channels() == 256);
    CHECK(run.stages[0].features.height() == 14);
    CHECK(run.stages[0].features.width() == 14);
    CHECK(run.stages[0].seg_logits.size() == 14 * 14);
    CHECK(run.stages[1].sps.feat == 128);
    CHECK(run.stages[2].sps.feat == 64);
    CHECK(run.stages[3].sps.feat == 32);
}

TEST_CASE("refine stage with a zero budget still doubles the grid") {
    const int feat0 = 16;
    const SyntheticScene scene = generate_scene(902, 1, 96, 96);
    const FeaturePyramid pyramid = scene.make_pyramid(feat0);
    const std::vector<RoiDetection> rois = scene.detections(feat0);
    const PipelineWeights weights = small_weights(13, feat0);

    const StageOutputs s0 = stage0(pyramid, rois, weights);
    const StageOutputs s1 = refine_stage(s0, 1, pyramid, rois, weights, 0, s0.refine_scores);
    CHECK(s1.grid_h == 28);
    CHECK(s1.sps.n_active == 0);
    CHECK(s1.seg_logits.empty());
    CHECK(s1.refine_logits.empty());
    CHECK(s1.sps.feat == feat0 / 2); // halving still applies to passive rows
    CHECK(!validate(s1.sps));
}

TEST_CASE("mask assembly overwrites exactly the active children") {
    const int feat0 = 16;
    const SyntheticScene scene = generate_scene(903, 2, 128, 128);
    const FeaturePyramid pyramid = scene.make_pyramid(feat0);
    const std::vector<RoiDetection> rois = scene.detections(feat0);
    const PipelineWeights weights = small_weights(14, feat0);
    PipelineConfig config;
    config.feat0 = feat0;
    config.backbone_channels = feat0;
    config.k_budget = 25;

    const PipelineRun run = run_pipeline(pyramid, rois, weights, config);
    const std::vector<MaskStack> masks = assemble_masks(run.stages);

    for (int s = 1; s <= 3; ++s) {
        const StageOutputs& st = run.stages[s];
        std::set<std::pair<int, std::size_t>> overwritten;
        const std::vector<CellRef> cells = active_positions(st.sps);
        for (const CellRef& c : cells)
            overwritten.insert({c.roi, static_cast<std::size_t>(c.row) * st.grid_w + c.col});
        for (int r = 0; r < st.n_rois; ++r) {
            for (int i = 0; i < st.grid_h; ++i) {
                for (int j = 0; j < st.grid_w; ++j) {
                    const std::size_t flat = static_cast<std::size_t>(i) * st.grid_w + j;
                    const double parent =
                        masks[r].levels[s - 1][static_cast<std::size_t>(i / 2) * (st.grid_w / 2) +
                                               j / 2];
                    if (!overwritten.count({r, flat}))
                        CHECK(masks[r].levels[s][flat] == parent); // bit-identical copy
                }
            }
        }
    }

    SUBCASE("zero budget collapses to the upsampled coarse mask") {
        PipelineConfig none = config;
        none.k_budget = 0;
        const PipelineRun quiet = run_pipeline(pyramid, rois, weights, none);
        const std::vector<MaskStack> qmasks = assemble_masks(quiet.stages);
        for (int r = 0; r < 2; ++r)
            for (int i = 0; i < 112; ++i)
                for (int j = 0; j < 112; ++j)
                    CHECK(qmasks[r].levels[3][static_cast<std::size_t>(i) * 112 + j] ==
                          qmasks[r].levels[0][static_cast<std::size_t>(i / 8) * 14 + j / 8]);
    }
    SUBCASE("final-mask changes stay inside the selected-parent closure") {
        for (int r = 0; r < 2; ++r) {
            std::vector<std::uint8_t> allowed(112 * 112, 0);
            for (int s = 1; s <= 3; ++s) {
                const StageOutputs& st = run.stages[s];
                const int scale = 112 / st.grid_h;
                for (const CellRef& c : active_positions(st.sps)) {
                    if (c.roi != r) continue;
                    for (int di = 0; di < scale; ++di)
                        for (int dj = 0; dj < scale; ++dj)
                            allowed[static_cast<std::size_t>(c.row * scale + di) * 112 +
                                    c.col * scale + dj] = 1;
                }
            }
            for (int i = 0; i < 112; ++i)
                for (int j = 0; j < 112; ++j) {
                    const double base =
                        masks[r].levels[0][static_cast<std::size_t>(i / 8) * 14 + j / 8];
                    const std::size_t flat = static_cast<std::size_t>(i) * 112 + j;
                    if (masks[r].levels[3][flat] != base) CHECK(allowed[flat] == 1);
                }
        }
    }
}

TEST_CASE("paste_roi maps the mask into the box with bilinear resampling") {
    SUBCASE("constant mask fills the box interior, exterior stays zero") {
        const std::vector<double> mask(56 * 56, 1.0);
        const RoiBox box{20.25f, 30.5f, 70.25f, 80.5f};
        const std::vector<double> img = paste_roi(mask, 56, 56, box, 128, 128);
        for (int y = 0; y < 128; ++y)
            for (int x = 0; x < 128; ++x) {
                const double v = img[static_cast<std::size_t>(y) * 128 + x];
                const double cx = x + 0.5, cy = y + 0.5;
                if (cx < box.x1 || cx >= box.x2 || cy < box.y1 || cy >= box.y2) {
                    CHECK(v == 0.0);
                } else if (cx > box.x1 + 1 && cx < box.x2 - 1 && cy > box.y1 + 1 &&
                           cy < box.y2 - 1) {
                    CHECK(v == doctest::Approx(1.0).epsilon(1e-9));
                }
            }
    }
    SUBCASE("an aligned 112-pixel box copies the mask verbatim") {
        Rng rng(44);
        std::vector<double> mask(112 * 112);
        for (double& v : mask) v = rng.uniform();
        const RoiBox box{8.0f, 4.0f, 120.0f, 116.0f};
        const std::vector<double> img = paste_roi(mask, 112, 112, box, 160, 160);
        for (int i = 0; i < 112; ++i)
            for (int j = 0; j < 112; ++j)
                CHECK(img[static_cast<std::size_t>(i + 4) * 160 + (j + 8)] ==
                      doctest::Approx(mask[static_cast<std::size_t>(i) * 112 + j]).epsilon(1e-12));
    }
    SUBCASE("random mask and box match a per-pixel bilinear loop") {
        Rng rng(45);
        std::vector<double> mask(28 * 28);
        for (double& v : mask) v = rng.uniform();
        DenseGrid as_grid(1, 1, 28, 28);
        for (int i = 0; i < 28; ++i)
            for (int j = 0; j < 28; ++j)
                as_grid.at(0, 0, i, j) = static_cast<float>(mask[static_cast<std::size_t>(i) * 28 + j]);
        const RoiBox box{11.3f, 7.9f, 83.6f, 99.4f};
        const std::vector<double> img = paste_roi(mask, 28, 28, box, 120, 120);
        for (int y = 0; y < 120; ++y)
            for (int x = 0; x < 120; ++x) {
                const double cx = x + 0.5, cy = y + 0.5;
                if (cx < box.x1 || cx >= box.x2 || cy < box.y1 || cy >= box.y2) continue;
                const double u = (cx - box.x1) / box.width() * 28;
                const double v = (cy - box.y1) / box.height() * 28;
                CHECK(oz::close(img[static_cast<std::size_t>(y) * 120 + x],
                                oz::naive_bilinear_1ch(as_grid, 0, 0, v, u), 1e-5));
            }
    }
    SUBCASE("degenerate box is rejected") {
        CHECK_THROWS_AS(paste_roi(std::vector<double>(4, 0.0), 2, 2, {5, 5, 5, 9}, 32, 32),
                        std::invalid_argument);
    }
}

TEST_CASE("confidence scoring follows the foreground-mean rule") {
    SUBCASE("unit mask returns the classification score") {
        CHECK(score(std::vector<double>(112 * 112, 1.0), 0.8) == doctest::Approx(0.8).epsilon(1e-12));
    }
    SUBCASE("empty foreground scores zero") {
        CHECK(score(std::vector<double>(112 * 112, 0.0), 0.9) == 0.0);
        CHECK(score(std::vector<double>(16, 0.49), 0.9) == 0.0); // all below threshold
    }
    SUBCASE("half 0.9, half 0.1 scores 0.9 times s_cls") {
        std::vector<double> mask(12544);
        for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = i % 2 == 0 ? 0.9 : 0.1;
        CHECK(score(mask, 1.0) == doctest::Approx(0.9).epsilon(1e-12));
        CHECK(score(mask, 0.5) == doctest::Approx(0.45).epsilon(1e-12));
    }
    SUBCASE("scale equivariance in s_cls") {
        Rng rng(50);
        std::vector<double> mask(400);
        for (double& v : mask) v = rng.uniform();
        const double base = score(mask, 1.0);
        for (double a : {0.0, 0.25, 0.6, 1.0})
            CHECK(score(mask, a) == doctest::Approx(a * base).epsilon(1e-12));
    }
}

TEST_CASE("training targets") {
    SUBCASE("all-foreground ground truth: seg 1 everywhere, refine 0 everywhere") {
        const Everywhere gt;
        const CellTargets t = make_targets(gt, {10, 10, 66, 66}, 14, 14);
        for (std::uint8_t v : t.seg) CHECK(v == 1);
        for (std::uint8_t v : t.refine) CHECK(v == 0);
    }
    SUBCASE("vertical half-plane marks exactly the boundary column") {
        // Boundary through the middle of grid column 6 of a 14-wide box grid.
        const RoiBox box{0, 0, 14, 14};
        const HalfPlane gt(6.5);
        const CellTargets t = make_targets(gt, box, 14, 14);
        for (int i = 0; i < 14; ++i)
            for (int j = 0; j < 14; ++j) {
                CHECK(t.refine[static_cast<std::size_t>(i) * 14 + j] == (j == 6 ? 1 : 0));
                CHECK(t.seg[static_cast<std::size_t>(i) * 14 + j] == (j < 6 ? 1 : 0)); // j=6 center 6.5 not < 6.5
            }
    }
    SUBCASE("probed refine targets agree with a fine rasterization probe") {
        int agree = 0, total = 0;
        for (std::uint64_t s = 0; s < 6; ++s) {
            const SyntheticScene scene = generate_scene(1000 + s, 2, 160, 160);
            for (const auto& inst : scene.instances) {
                for (int grid : {14, 28}) {
                    const CellTargets t = make_targets(inst.mask(), inst.box, grid, grid);
                    for (int i = 0; i < grid; ++i)
                        for (int j = 0; j < grid; ++j) {
                            const bool fine = oz::refine_target_fine(inst.mask(), inst.box, grid,
                                                                     grid, i, j);
                            agree += (t.refine[static_cast<std::size_t>(i) * grid + j] == 1) == fine;
                            ++total;
                        }
                }
            }
        }
        CHECK(agree >= total * 99 / 100);
    }
}

TEST_CASE("loss evaluation") {
    const int feat0 = 16;
    const SyntheticScene scene = generate_scene(905, 2, 96, 96);
    const FeaturePyramid pyramid = scene.make_pyramid(feat0);
    const std::vector<RoiDetection> rois = scene.detections(feat0);

    SUBCASE("uniform zero logits cost ln2 per stage, weighted total 2.5*ln2") {
        const PipelineWeights weights = make_zero_weights(feat0, feat0, true, Processing::Sfm);
        PipelineConfig config;
        config.feat0 = feat0;
        config.backbone_channels = feat0;
        config.k_budget = 10;
        const PipelineRun run = run_pipeline(pyramid, rois, weights, config);
        const auto targets = targets_for_run(run.stages, scene.ground_truths(), scene.boxes());
        const LossReport report = eval_losses(run.stages, targets);
        for (int s = 0; s <= 3; ++s) {
            CHECK(report.seg_loss[s] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
            CHECK(report.refine_loss[s] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
        }
        CHECK(report.total == doctest::Approx(1.7328679513998633).epsilon(1e-12));
    }
    SUBCASE("confident correct predictions cost nearly nothing") {
        const PipelineWeights weights = small_weights(16, feat0);
        PipelineConfig config;
        config.feat0 = feat0;
        config.backbone_channels = feat0;
        config.k_budget = 12;
        PipelineRun run = run_pipeline(pyramid, rois, weights, config);
        auto targets = targets_for_run(run.stages, scene.ground_truths(), scene.boxes());
        for (int s = 0; s <= 3; ++s) {
            for (std::size_t i = 0; i < targets[s].seg.size(); ++i)
                run.stages[s].seg_logits[i] = targets[s].seg[i] > 0.5f ? 20.0f : -20.0f;
            for (std::size_t i = 0; i < targets[s].refine.size(); ++i)
                run.stages[s].refine_logits[i] = targets[s].refine[i] > 0.5f ? 20.0f : -20.0f;
        }
        const LossReport report = eval_losses(run.stages, targets);
        CHECK(report.total < 1e-6);
    }
    SUBCASE("single-prediction binary cross-entropy matches hand values") {
        CHECK(bce_with_logits(1.2, 1.0) == doctest::Approx(0.26328246733803123).epsilon(1e-12));
        CHECK(bce_with_logits(1.2, 0.0) == doctest::Approx(1.4632824673380311).epsilon(1e-12));
        CHECK(bce_with_logits(0.0, 0.5) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    }
    SUBCASE("misaligned targets are rejected") {
        const PipelineWeights weights = small_weights(16, feat0);
        PipelineConfig config;
        config.feat0 = feat0;
        config.backbone_channels = feat0;
        const PipelineRun run = run_pipeline(pyramid, rois, weights, config);
        auto targets = targets_for_run(run.stages, scene.ground_truths(), scene.boxes());
        targets[2].seg.pop_back();
        CHECK_THROWS_AS(eval_losses(run.stages, targets), std::invalid_argument);
    }
}
