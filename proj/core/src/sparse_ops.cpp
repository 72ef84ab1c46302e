#include "effseg/sparse_ops.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace effseg {

std::vector<std::pair<int, int>> conv_offsets(int dilation) {
    std::vector<std::pair<int, int>> offsets;
    offsets.reserve(9);
    for (int u = -1; u <= 1; ++u)
        for (int v = -1; v <= 1; ++v) offsets.emplace_back(u * dilation, v * dilation);
    return offsets;
}

SpsMap sparse_pointwise(const SpsMap& sps, const MlpParams& mlp) {
    mlp.check_valid("sparse_pointwise mlp");
    if (mlp.input_dim() != sps.feat || mlp.output_dim() != sps.feat)
        throw std::invalid_argument("sparse_pointwise: mlp maps " +
                                    std::to_string(mlp.input_dim()) + " -> " +
                                    std::to_string(mlp.output_dim()) + " but feature size is " +
                                    std::to_string(sps.feat));
    std::vector<float> updated(static_cast<std::size_t>(sps.n_active) * sps.feat);
    for (int a = 0; a < sps.n_active; ++a)
        mlp.forward(sps.active_row(a), updated.data() + static_cast<std::size_t>(a) * sps.feat);
    return scatter_update(sps, std::move(updated));
}

namespace {

// Contract a gathered [9, f_in] neighborhood with a 3x3 kernel.
void contract_taps(const ConvKernel& kernel, const float* taps, float* out) {
    for (int co = 0; co < kernel.out_channels; ++co) {
        double acc = kernel.bias[co];
        for (int t = 0; t < 9; ++t) {
            const float* feat = taps + static_cast<std::size_t>(t) * kernel.in_channels;
            for (int ci = 0; ci < kernel.in_channels; ++ci)
                acc += static_cast<double>(kernel.w(co, ci, t / 3, t % 3)) *
                       static_cast<double>(feat[ci]);
        }
        out[co] = static_cast<float>(acc);
    }
}

std::vector<float> conv_active_rows(const SpsMap& sps, const ConvKernel& kernel) {
    const std::vector<CellRef> cells = active_positions(sps);
    const std::vector<std::pair<int, int>> offsets = conv_offsets(kernel.dilation);
    std::vector<float> taps(9 * static_cast<std::size_t>(sps.feat));
    std::vector<float> updated(static_cast<std::size_t>(sps.n_active) * kernel.out_channels);
    for (int a = 0; a < sps.n_active; ++a) {
        gather_neighborhood(sps, cells[a], offsets, taps.data());
        contract_taps(kernel, taps.data(),
                      updated.data() + static_cast<std::size_t>(a) * kernel.out_channels);
    }
    return updated;
}

void check_kernel(const SpsMap& sps, const ConvKernel& kernel, const char* where) {
    kernel.check_valid(where);
    if (kernel.in_channels != sps.feat || kernel.out_channels != sps.feat)
        throw std::invalid_argument(std::string(where) + ": kernel is " +
                                    std::to_string(kernel.in_channels) + " -> " +
                                    std::to_string(kernel.out_channels) +
                                    " but feature size is " + std::to_string(sps.feat));
}

} // namespace

SpsMap sparse_conv3x3(const SpsMap& sps, const ConvKernel& kernel) {
    check_kernel(sps, kernel, "sparse_conv3x3");
    return scatter_update(sps, conv_active_rows(sps, kernel));
}

SpsMap sparse_deform_conv(const SpsMap& sps, const DeformConvParams& params) {
    params.check_valid("sparse_deform_conv");
    check_kernel(sps, params.base, "sparse_deform_conv base");

    const std::vector<CellRef> cells = active_positions(sps);
    std::vector<float> offsets(18);
    std::vector<float> taps(9 * static_cast<std::size_t>(sps.feat));
    std::vector<float> updated(static_cast<std::size_t>(sps.n_active) * sps.feat);

    for (int a = 0; a < sps.n_active; ++a) {
        params.offset.apply(sps.active_row(a), offsets.data());
        const CellRef cell = cells[a];
        for (int t = 0; t < 9; ++t) {
            const double row = cell.row + 0.5 + (t / 3 - 1) + static_cast<double>(offsets[2 * t]);
            const double col =
                cell.col + 0.5 + (t % 3 - 1) + static_cast<double>(offsets[2 * t + 1]);
            gather_bilinear(sps, cell.roi, row, col,
                            taps.data() + static_cast<std::size_t>(t) * sps.feat);
        }
        contract_taps(params.base, taps.data(),
                      updated.data() + static_cast<std::size_t>(a) * sps.feat);
    }
    return scatter_update(sps, std::move(updated));
}

SpsMap sfm(const SpsMap& sps, const SfmParams& params) {
    params.check_valid("sfm");
    check_kernel(sps, params.conv_d1, "sfm conv_d1");

    const std::vector<float> out1 = conv_active_rows(sps, params.conv_d1);
    const std::vector<float> out3 = conv_active_rows(sps, params.conv_d3);
    const std::vector<float> out5 = conv_active_rows(sps, params.conv_d5);
    std::vector<float> updated(out1.size());
    for (std::size_t k = 0; k < updated.size(); ++k) {
        const float s = out1[k] + out3[k] + out5[k];
        updated[k] = s > 0.0f ? s : 0.0f;
    }
    return scatter_update(sps, std::move(updated));
}

DenseGrid fuse_query(const DenseGrid& grid, const std::vector<std::vector<float>>& queries,
                     const MlpParams& mlp) {
    mlp.check_valid("fuse_query mlp");
    const int f = grid.channels();
    if (static_cast<int>(queries.size()) != grid.rois())
        throw std::invalid_argument("fuse_query: " + std::to_string(queries.size()) +
                                    " queries for " + std::to_string(grid.rois()) + " RoIs");
    for (const auto& q : queries)
        if (static_cast<int>(q.size()) != f)
            throw std::invalid_argument("fuse_query: query dim " + std::to_string(q.size()) +
                                        " does not match channel count " + std::to_string(f));
    if (mlp.input_dim() != 2 * f || mlp.output_dim() != f)
        throw std::invalid_argument("fuse_query: mlp maps " + std::to_string(mlp.input_dim()) +
                                    " -> " + std::to_string(mlp.output_dim()) + ", expected " +
                                    std::to_string(2 * f) + " -> " + std::to_string(f));

    DenseGrid out = grid;
    std::vector<float> cat(2 * f);
    std::vector<float> delta(f);
    for (int r = 0; r < grid.rois(); ++r) {
        std::copy(queries[r].begin(), queries[r].end(), cat.begin() + f);
        for (int i = 0; i < grid.height(); ++i) {
            for (int j = 0; j < grid.width(); ++j) {
                grid.read_cell(r, i, j, cat.data());
                mlp.forward(cat.data(), delta.data());
                for (int c = 0; c < f; ++c) out.at(r, c, i, j) += delta[c];
            }
        }
    }
    return out;
}

SpsMap fuse_backbone(const SpsMap& sps, const FeaturePyramid& pyramid,
                     const std::vector<RoiBox>& boxes, int stage, const MlpParams& mlp) {
    mlp.check_valid("fuse_backbone mlp");
    if (static_cast<int>(boxes.size()) != sps.rois)
        throw std::invalid_argument("fuse_backbone: " + std::to_string(boxes.size()) +
                                    " boxes for " + std::to_string(sps.rois) + " RoIs");
    const int backbone_dim = mlp.input_dim() - sps.feat;
    if (backbone_dim < 1 || backbone_dim > pyramid.channels())
        throw std::invalid_argument(
            "fuse_backbone: mlp input dim " + std::to_string(mlp.input_dim()) +
            " implies backbone sample size " + std::to_string(backbone_dim) +
            ", outside [1, " + std::to_string(pyramid.channels()) + "]");
    if (mlp.output_dim() != sps.feat)
        throw std::invalid_argument("fuse_backbone: mlp output dim " +
                                    std::to_string(mlp.output_dim()) +
                                    " does not match feature size " + std::to_string(sps.feat));

    std::vector<int> level_of(sps.rois);
    for (int r = 0; r < sps.rois; ++r)
        level_of[r] = level_select_stage(level_select_initial(boxes[r]), stage);

    const std::vector<CellRef> cells = active_positions(sps);
    std::vector<float> cat(static_cast<std::size_t>(sps.feat) + backbone_dim);
    std::vector<float> delta(sps.feat);
    std::vector<float> updated = sps.active;

    for (int a = 0; a < sps.n_active; ++a) {
        const CellRef cell = cells[a];
        const RoiBox& box = boxes[cell.roi];
        const double cx = box.x1 + (cell.col + 0.5) / sps.width * box.width();
        const double cy = box.y1 + (cell.row + 0.5) / sps.height * box.height();
        const int level = level_of[cell.roi];
        const DenseGrid& feat = pyramid.level(level);
        const double s = FeaturePyramid::stride(level);

        // Blend only the channels that get fused.
        const BilinearTaps taps = bilinear_taps(cy / s, cx / s, feat.height(), feat.width());
        for (int c = 0; c < backbone_dim; ++c) {
            double acc = 0.0;
            for (int t = 0; t < 4; ++t)
                if (taps.in_bounds[t])
                    acc += taps.weight[t] *
                           static_cast<double>(feat.at(0, c, taps.row[t], taps.col[t]));
            cat[static_cast<std::size_t>(sps.feat) + c] = static_cast<float>(acc);
        }

        std::copy(sps.active_row(a), sps.active_row(a) + sps.feat, cat.begin());
        mlp.forward(cat.data(), delta.data());
        float* row = updated.data() + static_cast<std::size_t>(a) * sps.feat;
        for (int c = 0; c < sps.feat; ++c) row[c] += delta[c];
    }
    return scatter_update(sps, std::move(updated));
}

SpsMap halve_features(const SpsMap& sps, const MlpParams& mlp) {
    mlp.check_valid("halve_features mlp");
    if (sps.feat % 2 != 0)
        throw std::invalid_argument("halve_features: feature size " + std::to_string(sps.feat) +
                                    " is odd");
    if (mlp.layers.size() != 1)
        throw std::invalid_argument("halve_features: projection must be a one-layer MLP");
    if (mlp.input_dim() != sps.feat || mlp.output_dim() != sps.feat / 2)
        throw std::invalid_argument("halve_features: mlp maps " + std::to_string(mlp.input_dim()) +
                                    " -> " + std::to_string(mlp.output_dim()) + ", expected " +
                                    std::to_string(sps.feat) + " -> " +
                                    std::to_string(sps.feat / 2));

    SpsMap out = sps;
    out.feat = sps.feat / 2;
    out.active.assign(static_cast<std::size_t>(sps.n_active) * out.feat, 0.0f);
    out.passive.assign(static_cast<std::size_t>(sps.n_passive) * out.feat, 0.0f);
    for (int a = 0; a < sps.n_active; ++a) mlp.forward(sps.active_row(a), out.active_row(a));
    for (int p = 0; p < sps.n_passive; ++p) mlp.forward(sps.passive_row(p), out.passive_row(p));
    return out;
}

} // namespace effseg
