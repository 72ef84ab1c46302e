#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "effseg/flops.hpp"
#include "effseg/sps.hpp"
#include "effseg/sparse_ops.hpp"
#include "effseg/tensor.hpp"
#include "effseg/weights.hpp"

namespace effseg {

inline double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// Numerically stable binary cross-entropy on a logit.
inline double bce_with_logits(double logit, double target) {
    return std::max(logit, 0.0) - logit * target + std::log1p(std::exp(-std::abs(logit)));
}

constexpr int kStage0Grid = 14;

struct PipelineConfig {
    int k_budget = 10000;                    // active-cell budget per stage, joint across RoIs
    Processing processing = Processing::Sfm;
    int feat0 = 256;
    int backbone_channels = 256;
    bool backbone_sample_full = true;        // false: sample only F_{s-1} backbone channels
    double mask_threshold = 0.5;             // foreground threshold for scoring and RLE output
    std::uint64_t seed = 1;                  // weight init seed when no weight file is given
};

struct StageOutputs {
    int stage = 0;
    int n_rois = 0;
    int grid_h = 0;
    int grid_w = 0;
    DenseGrid features;             // stage 0 feature map (empty at later stages)
    SpsMap sps;                     // stages 1..3 (empty at stage 0)
    std::vector<float> seg_logits;  // stage 0: one per cell; later: one per active row
    std::vector<float> refine_logits;
    RefinementScores refine_scores; // dense per-cell scores feeding the next partition
};

// Dense stage: RoIAlign -> query fusion -> 4-layer FCN -> per-cell heads.
StageOutputs stage0(const FeaturePyramid& pyramid, const std::vector<RoiDetection>& rois,
                    const PipelineWeights& weights, FlopTrace* trace = nullptr);

// Sparse refinement stage s in {1,2,3}: partition the previous grid by
// partition_scores (top-k cells activate), double the grid, fuse backbone
// samples, halve feature size, run the processing module, predict seg and
// refine logits at active rows.
StageOutputs refine_stage(const StageOutputs& prev, int stage, const FeaturePyramid& pyramid,
                          const std::vector<RoiDetection>& rois, const PipelineWeights& weights,
                          int k_budget, const RefinementScores& partition_scores,
                          FlopTrace* trace = nullptr);

struct RunOverrides {
    std::array<int, 3> k_stage{-1, -1, -1}; // per-stage budget; -1 keeps config.k_budget
    // Scores driving each partition, on the parent grids (14, 28, 56 cells per
    // side for the standard chain); nullptr uses the predicted refine scores.
    const std::array<RefinementScores, 3>* forced_scores = nullptr;
};

struct PipelineRun {
    std::array<StageOutputs, 4> stages;
};

PipelineRun run_pipeline(const FeaturePyramid& pyramid, const std::vector<RoiDetection>& rois,
                         const PipelineWeights& weights, const PipelineConfig& config,
                         const RunOverrides* overrides = nullptr, FlopTrace* trace = nullptr);

// Per-RoI mask pyramid. Level s holds a (base_h * 2^s) x (base_w * 2^s)
// probability grid; masks never grow past level 3 (112x112 for a 14x14 base).
struct MaskStack {
    int base_h = 0;
    int base_w = 0;
    std::array<std::vector<double>, 4> levels;
    std::vector<double> pasted; // image-space probabilities, row-major
    int image_w = 0;
    int image_h = 0;
    double s_seg = 0.0;
};

// Mask assembly by overwrite: level 0 = sigmoid of stage-0 logits; each later
// level is the nearest-neighbor x2 upsample of the previous one with sigmoid
// logits written at that stage's active cells.
std::vector<MaskStack> assemble_masks(const std::array<StageOutputs, 4>& stages);

// Resample a RoI mask into image space inside its box; zero outside the box.
std::vector<double> paste_roi(const std::vector<double>& mask, int mask_h, int mask_w,
                              const RoiBox& box, int image_w, int image_h);

// s_seg = s_cls * mean probability over cells above the threshold; 0 when none are.
double score(const std::vector<double>& mask, double s_cls, double threshold = 0.5);

// Continuous-coordinate binary region (image space).
class InstanceMask {
public:
    virtual ~InstanceMask() = default;
    virtual bool contains(double x, double y) const = 0;
};

struct GroundTruth {
    const InstanceMask* mask = nullptr;
    int label = 0;
};

// Per-cell training targets for one RoI grid: seg = mask value at the cell
// center; refine = 1 iff a fixed 7x7 probe lattice spanning the cell sees both
// foreground and background.
struct CellTargets {
    std::vector<std::uint8_t> seg;
    std::vector<std::uint8_t> refine;
};
CellTargets make_targets(const InstanceMask& gt, const RoiBox& box, int grid_h, int grid_w);

// Targets aligned to one stage's predictions (per cell at stage 0, per active
// row at stages 1..3).
struct StageTargets {
    std::vector<float> seg;
    std::vector<float> refine;
};
std::array<StageTargets, 4> targets_for_run(const std::array<StageOutputs, 4>& stages,
                                            const std::vector<GroundTruth>& gt,
                                            const std::vector<RoiBox>& boxes);

struct LossReport {
    std::array<double, 4> seg_loss{};
    std::array<double, 4> refine_loss{};
    double total = 0.0;
};

// Per-stage mean binary cross-entropy; total applies seg weights
// (0.25, 0.375, 0.375, 0.5) and refine weights (0.25, 0.25, 0.25, 0.25).
LossReport eval_losses(const std::array<StageOutputs, 4>& stages,
                       const std::array<StageTargets, 4>& targets);

} // namespace effseg
