#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "effseg/pipeline.hpp"

namespace effseg::oracle {

// Dense per-cell counterparts of the sparse ops. Same math at every cell,
// dense storage; the equivalence targets for the SPS path.

DenseGrid dense_pointwise(const DenseGrid& grid, const MlpParams& mlp);
DenseGrid dense_deform_conv(const DenseGrid& grid, const DeformConvParams& params);
DenseGrid dense_sfm(const DenseGrid& grid, const SfmParams& params);
DenseGrid dense_fuse_backbone(const DenseGrid& grid, const FeaturePyramid& pyramid,
                              const std::vector<RoiBox>& boxes, int stage, const MlpParams& mlp);
DenseGrid dense_halve(const DenseGrid& grid, const MlpParams& mlp);

DenseGrid nn_upsample2(const DenseGrid& grid);
DenseGrid upsample_children_dense(const DenseGrid& grid, const std::array<MlpParams, 4>& child);
DenseGrid apply_processing_dense(const DenseGrid& grid, const ProcessingParams& proc);

// One refinement stage executed at EVERY cell of the upsampled grid
// (the dense baseline head when the processing module is the fusion module).
StageOutputs dense_stage_oracle(const StageOutputs& prev, int stage, const FeaturePyramid& pyramid,
                                const std::vector<RoiDetection>& rois,
                                const PipelineWeights& weights, FlopTrace* trace = nullptr);

// One refinement stage computing updates only at the children of selected
// parent cells while storing everything densely; unchanged cells are copied.
// Logit grids are meaningful at active cells only (zero elsewhere).
struct SparseOnDenseStage {
    DenseGrid features;
    std::vector<float> seg_logits;
    std::vector<float> refine_logits;
    std::vector<std::uint8_t> active; // per cell of the upsampled grid
};
SparseOnDenseStage sparse_on_dense_oracle(const DenseGrid& prev_features,
                                          const std::vector<std::uint8_t>& selected_parents,
                                          int stage, const FeaturePyramid& pyramid,
                                          const std::vector<RoiBox>& boxes,
                                          const PipelineWeights& weights);

// Full dense pipeline: shared stage 0, then three dense_stage_oracle rounds.
struct DenseRun {
    std::array<StageOutputs, 4> stages;
};
DenseRun run_dense_pipeline(const FeaturePyramid& pyramid, const std::vector<RoiDetection>& rois,
                            const PipelineWeights& weights, FlopTrace* trace = nullptr);

// Mask pyramid of a dense run: every cell is overwritten at every stage.
std::vector<MaskStack> assemble_dense_masks(const std::array<StageOutputs, 4>& stages);

} // namespace effseg::oracle
