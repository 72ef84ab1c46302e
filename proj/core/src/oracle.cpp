#include "effseg/oracle.hpp"

#include <algorithm>
#include <stdexcept>

namespace effseg::oracle {

namespace {

void record(FlopTrace* trace, OpRecord rec) {
    if (trace) trace->push_back(std::move(rec));
}

void record_mlp(FlopTrace* trace, const MlpParams& mlp, int stage, long long sites,
                bool processing) {
    for (const MlpLayer& layer : mlp.layers)
        record(trace,
               {"linear", "dense", stage, sites, layer.in_dim, layer.out_dim, processing, 0});
}

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

} // namespace

DenseGrid dense_pointwise(const DenseGrid& grid, const MlpParams& mlp) {
    mlp.check_valid("dense_pointwise mlp");
    if (mlp.input_dim() != grid.channels())
        throw std::invalid_argument("dense_pointwise: mlp input dim " +
                                    std::to_string(mlp.input_dim()) + " != grid channels " +
                                    std::to_string(grid.channels()));
    DenseGrid out(grid.rois(), mlp.output_dim(), grid.height(), grid.width());
    std::vector<float> cell(grid.channels());
    std::vector<float> mapped(mlp.output_dim());
    for (int r = 0; r < grid.rois(); ++r)
        for (int i = 0; i < grid.height(); ++i)
            for (int j = 0; j < grid.width(); ++j) {
                grid.read_cell(r, i, j, cell.data());
                mlp.forward(cell.data(), mapped.data());
                out.write_cell(r, i, j, mapped.data());
            }
    return out;
}

DenseGrid dense_deform_conv(const DenseGrid& grid, const DeformConvParams& params) {
    params.check_valid("dense_deform_conv");
    if (params.base.in_channels != grid.channels() || params.base.out_channels != grid.channels())
        throw std::invalid_argument("dense_deform_conv: kernel channels do not match grid");

    DenseGrid out(grid.rois(), grid.channels(), grid.height(), grid.width());
    const int f = grid.channels();
    std::vector<float> cell(f);
    std::vector<float> offsets(18);
    std::vector<float> taps(static_cast<std::size_t>(9) * f);
    std::vector<float> result(f);
    for (int r = 0; r < grid.rois(); ++r) {
        for (int i = 0; i < grid.height(); ++i) {
            for (int j = 0; j < grid.width(); ++j) {
                grid.read_cell(r, i, j, cell.data());
                params.offset.apply(cell.data(), offsets.data());
                for (int t = 0; t < 9; ++t) {
                    const double row =
                        i + 0.5 + (t / 3 - 1) + static_cast<double>(offsets[2 * t]);
                    const double col =
                        j + 0.5 + (t % 3 - 1) + static_cast<double>(offsets[2 * t + 1]);
                    bilinear_sample(grid, r, row, col,
                                    taps.data() + static_cast<std::size_t>(t) * f);
                }
                contract_taps(params.base, taps.data(), result.data());
                out.write_cell(r, i, j, result.data());
            }
        }
    }
    return out;
}

DenseGrid dense_sfm(const DenseGrid& grid, const SfmParams& params) {
    params.check_valid("dense_sfm");
    const DenseGrid d1 = dense_conv2d(grid, params.conv_d1);
    const DenseGrid d3 = dense_conv2d(grid, params.conv_d3);
    const DenseGrid d5 = dense_conv2d(grid, params.conv_d5);
    DenseGrid out = d1;
    for (std::size_t k = 0; k < out.data().size(); ++k) {
        const float s = d1.data()[k] + d3.data()[k] + d5.data()[k];
        out.data()[k] = s > 0.0f ? s : 0.0f;
    }
    return out;
}

DenseGrid dense_fuse_backbone(const DenseGrid& grid, const FeaturePyramid& pyramid,
                              const std::vector<RoiBox>& boxes, int stage, const MlpParams& mlp) {
    mlp.check_valid("dense_fuse_backbone mlp");
    if (static_cast<int>(boxes.size()) != grid.rois())
        throw std::invalid_argument("dense_fuse_backbone: box count does not match RoIs");
    const int f = grid.channels();
    const int backbone_dim = mlp.input_dim() - f;
    if (backbone_dim < 1 || backbone_dim > pyramid.channels() || mlp.output_dim() != f)
        throw std::invalid_argument("dense_fuse_backbone: mlp dims do not chain");

    DenseGrid out = grid;
    std::vector<float> cat(static_cast<std::size_t>(f) + backbone_dim);
    std::vector<float> delta(f);
    for (int r = 0; r < grid.rois(); ++r) {
        const RoiBox& box = boxes[r];
        const int level = level_select_stage(level_select_initial(box), stage);
        const DenseGrid& feat = pyramid.level(level);
        const double s = FeaturePyramid::stride(level);
        for (int i = 0; i < grid.height(); ++i) {
            const double cy = box.y1 + (i + 0.5) / grid.height() * box.height();
            for (int j = 0; j < grid.width(); ++j) {
                const double cx = box.x1 + (j + 0.5) / grid.width() * box.width();
                const BilinearTaps taps =
                    bilinear_taps(cy / s, cx / s, feat.height(), feat.width());
                for (int c = 0; c < backbone_dim; ++c) {
                    double acc = 0.0;
                    for (int t = 0; t < 4; ++t)
                        if (taps.in_bounds[t])
                            acc += taps.weight[t] *
                                   static_cast<double>(feat.at(0, c, taps.row[t], taps.col[t]));
                    cat[static_cast<std::size_t>(f) + c] = static_cast<float>(acc);
                }
                grid.read_cell(r, i, j, cat.data());
                mlp.forward(cat.data(), delta.data());
                for (int c = 0; c < f; ++c) out.at(r, c, i, j) += delta[c];
            }
        }
    }
    return out;
}

DenseGrid dense_halve(const DenseGrid& grid, const MlpParams& mlp) {
    if (grid.channels() % 2 != 0)
        throw std::invalid_argument("dense_halve: channel count is odd");
    if (mlp.layers.size() != 1 || mlp.output_dim() != grid.channels() / 2)
        throw std::invalid_argument("dense_halve: projection must be one layer to half size");
    return dense_pointwise(grid, mlp);
}

DenseGrid nn_upsample2(const DenseGrid& grid) {
    DenseGrid out(grid.rois(), grid.channels(), grid.height() * 2, grid.width() * 2);
    for (int r = 0; r < grid.rois(); ++r)
        for (int c = 0; c < grid.channels(); ++c)
            for (int i = 0; i < out.height(); ++i)
                for (int j = 0; j < out.width(); ++j)
                    out.at(r, c, i, j) = grid.at(r, c, i / 2, j / 2);
    return out;
}

DenseGrid upsample_children_dense(const DenseGrid& grid, const std::array<MlpParams, 4>& child) {
    for (int c = 0; c < 4; ++c)
        if (child[c].input_dim() != grid.channels() || child[c].output_dim() != grid.channels())
            throw std::invalid_argument("upsample_children_dense: child MLP dims do not match");
    DenseGrid out(grid.rois(), grid.channels(), grid.height() * 2, grid.width() * 2);
    std::vector<float> cell(grid.channels());
    std::vector<float> mapped(grid.channels());
    for (int r = 0; r < grid.rois(); ++r)
        for (int i = 0; i < grid.height(); ++i)
            for (int j = 0; j < grid.width(); ++j) {
                grid.read_cell(r, i, j, cell.data());
                for (int dr = 0; dr < 2; ++dr)
                    for (int dc = 0; dc < 2; ++dc) {
                        child[dr * 2 + dc].forward(cell.data(), mapped.data());
                        out.write_cell(r, 2 * i + dr, 2 * j + dc, mapped.data());
                    }
            }
    return out;
}

DenseGrid apply_processing_dense(const DenseGrid& grid, const ProcessingParams& proc) {
    return std::visit(
        [&](const auto& p) -> DenseGrid {
            using T = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<T, MlpParams>) {
                return dense_pointwise(grid, p);
            } else if constexpr (std::is_same_v<T, ConvKernel>) {
                return dense_conv2d(grid, p);
            } else if constexpr (std::is_same_v<T, DeformConvParams>) {
                return dense_deform_conv(grid, p);
            } else {
                return dense_sfm(grid, p);
            }
        },
        proc);
}

namespace {

std::vector<float> head_logits_dense(const DenseGrid& grid, const MlpParams& head) {
    std::vector<float> logits(static_cast<std::size_t>(grid.rois()) * grid.height() *
                              grid.width());
    std::vector<float> cell(grid.channels());
    float out = 0.0f;
    std::size_t n = 0;
    for (int r = 0; r < grid.rois(); ++r)
        for (int i = 0; i < grid.height(); ++i)
            for (int j = 0; j < grid.width(); ++j) {
                grid.read_cell(r, i, j, cell.data());
                head.forward(cell.data(), &out);
                logits[n++] = out;
            }
    return logits;
}

void record_processing_dense(FlopTrace* trace, const ProcessingParams& proc, int stage,
                             long long cells, int feat) {
    std::visit(
        [&](const auto& p) {
            using T = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<T, MlpParams>) {
                record_mlp(trace, p, stage, cells, true);
            } else if constexpr (std::is_same_v<T, ConvKernel>) {
                record(trace, {"conv3x3", "dense", stage, cells, feat, feat, true, 0});
            } else if constexpr (std::is_same_v<T, DeformConvParams>) {
                record(trace, {"linear", "dense", stage, cells, feat, 18, true, 0});
                record(trace, {"bilinear", "dense", stage, cells * 9, feat, 1, true, 0});
                record(trace, {"conv3x3", "dense", stage, cells, feat, feat, true, 0});
            } else {
                for (int k = 0; k < 3; ++k)
                    record(trace, {"conv3x3", "dense", stage, cells, feat, feat, true, 0});
            }
        },
        proc);
}

} // namespace

StageOutputs dense_stage_oracle(const StageOutputs& prev, int stage, const FeaturePyramid& pyramid,
                                const std::vector<RoiDetection>& rois,
                                const PipelineWeights& weights, FlopTrace* trace) {
    if (stage < 1 || stage > 3)
        throw std::invalid_argument("dense_stage_oracle: stage must be in {1,2,3}");
    if (prev.features.empty())
        throw std::invalid_argument("dense_stage_oracle: previous stage carries no dense features");

    const StageWeights& sw = weights.stages[stage - 1];
    std::vector<RoiBox> boxes(rois.size());
    for (std::size_t r = 0; r < rois.size(); ++r) boxes[r] = rois[r].box;

    DenseGrid up = upsample_children_dense(prev.features, sw.child);
    const long long cells =
        static_cast<long long>(up.rois()) * up.height() * up.width();
    for (int c = 0; c < 4; ++c) record_mlp(trace, sw.child[c], stage, cells / 4, false);

    DenseGrid fused = dense_fuse_backbone(up, pyramid, boxes, stage, sw.fuse);
    record(trace, {"bilinear", "dense", stage, cells, sw.fuse.input_dim() - up.channels(), 1,
                   false, 0});
    record_mlp(trace, sw.fuse, stage, cells, false);

    DenseGrid halved = dense_halve(fused, sw.halve);
    record(trace, {"linear", "dense", stage, cells, fused.channels(), halved.channels(), false, 0});

    DenseGrid processed = apply_processing_dense(halved, sw.processing);
    record_processing_dense(trace, sw.processing, stage, cells, processed.channels());

    StageOutputs out;
    out.stage = stage;
    out.n_rois = prev.n_rois;
    out.grid_h = processed.height();
    out.grid_w = processed.width();
    out.seg_logits = head_logits_dense(processed, sw.heads.seg);
    out.refine_logits = head_logits_dense(processed, sw.heads.refine);
    record_mlp(trace, sw.heads.seg, stage, cells, false);
    record_mlp(trace, sw.heads.refine, stage, cells, false);

    out.refine_scores.resize(out.refine_logits.size());
    for (std::size_t i = 0; i < out.refine_logits.size(); ++i)
        out.refine_scores[i] = static_cast<float>(sigmoid(out.refine_logits[i]));

    record(trace, {"stage", "dense", stage, cells, 0, 0, false, cells});
    out.features = std::move(processed);
    return out;
}

SparseOnDenseStage sparse_on_dense_oracle(const DenseGrid& prev_features,
                                          const std::vector<std::uint8_t>& selected_parents,
                                          int stage, const FeaturePyramid& pyramid,
                                          const std::vector<RoiBox>& boxes,
                                          const PipelineWeights& weights) {
    if (stage < 1 || stage > 3)
        throw std::invalid_argument("sparse_on_dense_oracle: stage must be in {1,2,3}");
    const std::size_t parent_cells = static_cast<std::size_t>(prev_features.rois()) *
                                     prev_features.height() * prev_features.width();
    if (selected_parents.size() != parent_cells)
        throw std::invalid_argument("sparse_on_dense_oracle: selection mask size " +
                                    std::to_string(selected_parents.size()) +
                                    " does not match parent cells " +
                                    std::to_string(parent_cells));

    const StageWeights& sw = weights.stages[stage - 1];
    const int rois = prev_features.rois();
    const int ph = prev_features.height();
    const int pw = prev_features.width();
    const int h = 2 * ph, w = 2 * pw;

    SparseOnDenseStage out;
    out.active.assign(static_cast<std::size_t>(rois) * h * w, 0);
    auto parent_flat = [&](int r, int i, int j) { return (r * ph + i) * pw + j; };
    auto child_flat = [&](int r, int i, int j) { return (r * h + i) * w + j; };

    // Upsample: children of selected parents run the child MLPs, the rest copy.
    DenseGrid up(rois, prev_features.channels(), h, w);
    std::vector<float> cell(prev_features.channels());
    std::vector<float> mapped(prev_features.channels());
    for (int r = 0; r < rois; ++r) {
        for (int i = 0; i < ph; ++i) {
            for (int j = 0; j < pw; ++j) {
                prev_features.read_cell(r, i, j, cell.data());
                const bool sel = selected_parents[parent_flat(r, i, j)] != 0;
                for (int dr = 0; dr < 2; ++dr) {
                    for (int dc = 0; dc < 2; ++dc) {
                        if (sel) {
                            sw.child[dr * 2 + dc].forward(cell.data(), mapped.data());
                            up.write_cell(r, 2 * i + dr, 2 * j + dc, mapped.data());
                            out.active[child_flat(r, 2 * i + dr, 2 * j + dc)] = 1;
                        } else {
                            up.write_cell(r, 2 * i + dr, 2 * j + dc, cell.data());
                        }
                    }
                }
            }
        }
    }

    // Backbone fusion at active cells only.
    const int f = up.channels();
    const int backbone_dim = sw.fuse.input_dim() - f;
    if (backbone_dim < 1 || backbone_dim > pyramid.channels() || sw.fuse.output_dim() != f)
        throw std::invalid_argument("sparse_on_dense_oracle: fuse mlp dims do not chain");
    DenseGrid fused = up;
    {
        std::vector<float> cat(static_cast<std::size_t>(f) + backbone_dim);
        std::vector<float> delta(f);
        for (int r = 0; r < rois; ++r) {
            const RoiBox& box = boxes[r];
            const int level = level_select_stage(level_select_initial(box), stage);
            const DenseGrid& feat = pyramid.level(level);
            const double s = FeaturePyramid::stride(level);
            for (int i = 0; i < h; ++i) {
                for (int j = 0; j < w; ++j) {
                    if (!out.active[child_flat(r, i, j)]) continue;
                    const double cy = box.y1 + (i + 0.5) / h * box.height();
                    const double cx = box.x1 + (j + 0.5) / w * box.width();
                    const BilinearTaps taps =
                        bilinear_taps(cy / s, cx / s, feat.height(), feat.width());
                    for (int c = 0; c < backbone_dim; ++c) {
                        double acc = 0.0;
                        for (int t = 0; t < 4; ++t)
                            if (taps.in_bounds[t])
                                acc += taps.weight[t] * static_cast<double>(
                                                            feat.at(0, c, taps.row[t], taps.col[t]));
                        cat[static_cast<std::size_t>(f) + c] = static_cast<float>(acc);
                    }
                    up.read_cell(r, i, j, cat.data());
                    sw.fuse.forward(cat.data(), delta.data());
                    for (int c = 0; c < f; ++c) fused.at(r, c, i, j) += delta[c];
                }
            }
        }
    }

    // Halving is shared by every feature, active or not.
    DenseGrid halved = dense_halve(fused, sw.halve);

    // Processing module at active cells; passive cells copy through.
    DenseGrid processed_all = apply_processing_dense(halved, sw.processing);
    DenseGrid processed = halved;
    for (int r = 0; r < rois; ++r)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
                if (out.active[child_flat(r, i, j)])
                    for (int c = 0; c < processed.channels(); ++c)
                        processed.at(r, c, i, j) = processed_all.at(r, c, i, j);

    out.seg_logits.assign(out.active.size(), 0.0f);
    out.refine_logits.assign(out.active.size(), 0.0f);
    std::vector<float> pcell(processed.channels());
    float logit = 0.0f;
    for (int r = 0; r < rois; ++r) {
        for (int i = 0; i < h; ++i) {
            for (int j = 0; j < w; ++j) {
                if (!out.active[child_flat(r, i, j)]) continue;
                processed.read_cell(r, i, j, pcell.data());
                sw.heads.seg.forward(pcell.data(), &logit);
                out.seg_logits[child_flat(r, i, j)] = logit;
                sw.heads.refine.forward(pcell.data(), &logit);
                out.refine_logits[child_flat(r, i, j)] = logit;
            }
        }
    }
    out.features = std::move(processed);
    return out;
}

DenseRun run_dense_pipeline(const FeaturePyramid& pyramid, const std::vector<RoiDetection>& rois,
                            const PipelineWeights& weights, FlopTrace* trace) {
    DenseRun run;
    if (trace) {
        FlopTrace local;
        run.stages[0] = stage0(pyramid, rois, weights, &local);
        for (OpRecord& rec : local) {
            rec.path = "dense";
            trace->push_back(std::move(rec));
        }
    } else {
        run.stages[0] = stage0(pyramid, rois, weights, nullptr);
    }
    for (int s = 1; s <= 3; ++s)
        run.stages[s] = dense_stage_oracle(run.stages[s - 1], s, pyramid, rois, weights, trace);
    return run;
}

std::vector<MaskStack> assemble_dense_masks(const std::array<StageOutputs, 4>& stages) {
    const StageOutputs& s0 = stages[0];
    std::vector<MaskStack> out(s0.n_rois);
    for (int s = 0; s <= 3; ++s) {
        const StageOutputs& st = stages[s];
        if (st.seg_logits.size() !=
            static_cast<std::size_t>(st.n_rois) * st.grid_h * st.grid_w)
            throw std::invalid_argument("assemble_dense_masks: stage " + std::to_string(s) +
                                        " logits are not dense");
        for (int r = 0; r < s0.n_rois; ++r) {
            MaskStack& stack = out[r];
            if (s == 0) {
                stack.base_h = st.grid_h;
                stack.base_w = st.grid_w;
            }
            stack.levels[s].resize(static_cast<std::size_t>(st.grid_h) * st.grid_w);
            for (int i = 0; i < st.grid_h; ++i)
                for (int j = 0; j < st.grid_w; ++j)
                    stack.levels[s][static_cast<std::size_t>(i) * st.grid_w + j] = sigmoid(
                        st.seg_logits[(static_cast<std::size_t>(r) * st.grid_h + i) * st.grid_w +
                                      j]);
        }
    }
    return out;
}

} // namespace effseg::oracle
