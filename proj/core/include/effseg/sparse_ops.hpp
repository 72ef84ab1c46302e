#pragma once

#include <vector>

#include "effseg/params.hpp"
#include "effseg/sps.hpp"
#include "effseg/tensor.hpp"

namespace effseg {

// 2D operations over the active set of an SpsMap. Every op reads its
// neighborhoods from the input map, computes all active outputs, then scatters
// them in one replacement of the active matrix; passive matrix and index map
// are untouched (halve_features excepted, which reprojects both matrices).

// active <- mlp(active), row by row.
SpsMap sparse_pointwise(const SpsMap& sps, const MlpParams& mlp);

// 3x3 convolution at the kernel's dilation, evaluated at active cells only.
SpsMap sparse_conv3x3(const SpsMap& sps, const ConvKernel& kernel);

// Deformable 3x3 convolution: per active cell, 18 offsets are predicted from
// the cell's own feature; the nine taps sample at (regular tap + offset) via
// bilinear interpolation over the index map.
SpsMap sparse_deform_conv(const SpsMap& sps, const DeformConvParams& params);

// Sum of three parallel 3x3 convolutions (dilations 1, 3, 5) over the same
// input, followed by ReLU.
SpsMap sfm(const SpsMap& sps, const SfmParams& params);

// Residual query fusion on a dense grid:
// out[r,:,i,j] = grid[r,:,i,j] + mlp(concat(grid[r,:,i,j], query[r])).
DenseGrid fuse_query(const DenseGrid& grid, const std::vector<std::vector<float>>& queries,
                     const MlpParams& mlp);

// Residual backbone fusion at active cells. Each active cell's center is
// mapped into image coordinates (box subdivided uniformly into the grid), the
// stage's pyramid level is sampled there, the first (mlp.input_dim - feat)
// backbone channels are concatenated with the active feature, and the MLP
// output is added to the active row.
SpsMap fuse_backbone(const SpsMap& sps, const FeaturePyramid& pyramid,
                     const std::vector<RoiBox>& boxes, int stage, const MlpParams& mlp);

// Shared one-layer projection of BOTH matrices to half the feature size.
SpsMap halve_features(const SpsMap& sps, const MlpParams& mlp);

// Regular tap offsets {-d, 0, +d}^2 in row-major order.
std::vector<std::pair<int, int>> conv_offsets(int dilation);

} // namespace effseg
