#include "effseg/pipeline.hpp"

#include <algorithm>
#include <stdexcept>

namespace effseg {

namespace {

void record(FlopTrace* trace, OpRecord rec) {
    if (trace) trace->push_back(std::move(rec));
}

// One logit per cell of a dense grid.
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

// One logit per active row.
std::vector<float> head_logits_active(const SpsMap& sps, const MlpParams& head) {
    std::vector<float> logits(sps.n_active);
    float out = 0.0f;
    for (int a = 0; a < sps.n_active; ++a) {
        head.forward(sps.active_row(a), &out);
        logits[a] = out;
    }
    return logits;
}

void record_mlp(FlopTrace* trace, const MlpParams& mlp, const char* path, int stage,
                long long sites, bool processing) {
    for (const MlpLayer& layer : mlp.layers)
        record(trace, {"linear", path, stage, sites, layer.in_dim, layer.out_dim, processing, 0});
}

} // namespace

StageOutputs stage0(const FeaturePyramid& pyramid, const std::vector<RoiDetection>& rois,
                    const PipelineWeights& weights, FlopTrace* trace) {
    weights.validate(pyramid.channels());
    if (rois.empty()) throw std::invalid_argument("stage0: no RoIs");
    for (std::size_t r = 0; r < rois.size(); ++r)
        if (static_cast<int>(rois[r].query.size()) != weights.feat0)
            throw std::invalid_argument("stage0: RoI " + std::to_string(r) + " query size " +
                                        std::to_string(rois[r].query.size()) + " != feat0 = " +
                                        std::to_string(weights.feat0));

    const int n_rois = static_cast<int>(rois.size());
    const long long cells = static_cast<long long>(n_rois) * kStage0Grid * kStage0Grid;

    DenseGrid feats = roi_align_batch(pyramid, rois, kStage0Grid, kStage0Grid);
    record(trace, {"bilinear", "sparse", 0, cells * 4, pyramid.channels(), 1, false, 0});

    std::vector<std::vector<float>> queries(rois.size());
    for (std::size_t r = 0; r < rois.size(); ++r) queries[r] = rois[r].query;
    feats = fuse_query(feats, queries, weights.query_fuse);
    record_mlp(trace, weights.query_fuse, "sparse", 0, cells, false);

    for (int k = 0; k < 4; ++k) {
        feats = dense_conv2d(feats, weights.fcn[k]);
        for (float& v : feats.data()) v = v > 0.0f ? v : 0.0f;
        record(trace, {"conv3x3", "sparse", 0, cells, weights.feat0, weights.feat0, false, 0});
    }

    StageOutputs out;
    out.stage = 0;
    out.n_rois = n_rois;
    out.grid_h = kStage0Grid;
    out.grid_w = kStage0Grid;
    out.seg_logits = head_logits_dense(feats, weights.stage0_heads.seg);
    out.refine_logits = head_logits_dense(feats, weights.stage0_heads.refine);
    record_mlp(trace, weights.stage0_heads.seg, "sparse", 0, cells, false);
    record_mlp(trace, weights.stage0_heads.refine, "sparse", 0, cells, false);
    out.features = std::move(feats);

    out.refine_scores.resize(out.refine_logits.size());
    for (std::size_t i = 0; i < out.refine_logits.size(); ++i)
        out.refine_scores[i] = static_cast<float>(sigmoid(out.refine_logits[i]));

    record(trace, {"stage", "sparse", 0, cells, 0, 0, false, cells});
    return out;
}

namespace {

SpsMap apply_processing(const SpsMap& sps, const ProcessingParams& proc, int stage,
                        FlopTrace* trace) {
    const long long n = sps.n_active;
    return std::visit(
        [&](const auto& p) -> SpsMap {
            using T = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<T, MlpParams>) {
                record_mlp(trace, p, "sparse", stage, n, true);
                return sparse_pointwise(sps, p);
            } else if constexpr (std::is_same_v<T, ConvKernel>) {
                record(trace, {"conv3x3", "sparse", stage, n, sps.feat, sps.feat, true, 0});
                record(trace, {"gather", "sparse", stage, n, 0, 0, true, n * 9 * sps.feat});
                return sparse_conv3x3(sps, p);
            } else if constexpr (std::is_same_v<T, DeformConvParams>) {
                record(trace, {"linear", "sparse", stage, n, sps.feat, 18, true, 0});
                record(trace, {"bilinear", "sparse", stage, n * 9, sps.feat, 1, true, 0});
                record(trace, {"conv3x3", "sparse", stage, n, sps.feat, sps.feat, true, 0});
                return sparse_deform_conv(sps, p);
            } else {
                for (int k = 0; k < 3; ++k)
                    record(trace, {"conv3x3", "sparse", stage, n, sps.feat, sps.feat, true, 0});
                record(trace, {"gather", "sparse", stage, n, 0, 0, true, 3 * n * 9 * sps.feat});
                return sfm(sps, p);
            }
        },
        proc);
}

} // namespace

StageOutputs refine_stage(const StageOutputs& prev, int stage, const FeaturePyramid& pyramid,
                          const std::vector<RoiDetection>& rois, const PipelineWeights& weights,
                          int k_budget, const RefinementScores& partition_scores,
                          FlopTrace* trace) {
    if (stage < 1 || stage > 3)
        throw std::invalid_argument("refine_stage: stage must be in {1,2,3}, got " +
                                    std::to_string(stage));
    if (prev.stage != stage - 1)
        throw std::invalid_argument("refine_stage: previous outputs are stage " +
                                    std::to_string(prev.stage) + ", expected " +
                                    std::to_string(stage - 1));
    if (static_cast<int>(rois.size()) != prev.n_rois)
        throw std::invalid_argument("refine_stage: RoI count changed between stages");

    const StageWeights& sw = weights.stages[stage - 1];

    SpsMap part = stage == 1 ? build_from_dense(prev.features, partition_scores, k_budget)
                             : update_partition(prev.sps, partition_scores, k_budget);
    part.stage = stage;

    SpsMap up = upsample_split(part, sw.child);
    for (int c = 0; c < 4; ++c) record_mlp(trace, sw.child[c], "sparse", stage, part.n_active, false);

    std::vector<RoiBox> boxes(rois.size());
    for (std::size_t r = 0; r < rois.size(); ++r) boxes[r] = rois[r].box;
    SpsMap fused = fuse_backbone(up, pyramid, boxes, stage, sw.fuse);
    const int bdim = sw.fuse.input_dim() - up.feat;
    record(trace, {"bilinear", "sparse", stage, up.n_active, bdim, 1, false, 0});
    record_mlp(trace, sw.fuse, "sparse", stage, up.n_active, false);

    SpsMap halved = halve_features(fused, sw.halve);
    record(trace, {"linear", "sparse", stage, halved.n_active + halved.n_passive,
                   fused.feat, halved.feat, false, 0});

    SpsMap processed = apply_processing(halved, sw.processing, stage, trace);

    StageOutputs out;
    out.stage = stage;
    out.n_rois = prev.n_rois;
    out.grid_h = processed.height;
    out.grid_w = processed.width;
    out.seg_logits = head_logits_active(processed, sw.heads.seg);
    out.refine_logits = head_logits_active(processed, sw.heads.refine);
    record_mlp(trace, sw.heads.seg, "sparse", stage, processed.n_active, false);
    record_mlp(trace, sw.heads.refine, "sparse", stage, processed.n_active, false);

    // Scores for the next partition: parents hand their score to all four
    // children, then freshly predicted cells overwrite theirs.
    out.refine_scores.assign(static_cast<std::size_t>(processed.cells()), 0.0f);
    for (int r = 0; r < processed.rois; ++r)
        for (int i = 0; i < processed.height; ++i)
            for (int j = 0; j < processed.width; ++j)
                out.refine_scores[processed.flat(r, i, j)] =
                    partition_scores[(r * part.height + i / 2) * part.width + j / 2];
    const std::vector<CellRef> cells = active_positions(processed);
    for (int a = 0; a < processed.n_active; ++a)
        out.refine_scores[processed.flat(cells[a].roi, cells[a].row, cells[a].col)] =
            static_cast<float>(sigmoid(out.refine_logits[a]));

    record(trace, {"stage", "sparse", stage, processed.n_active, 0, 0, false,
                   static_cast<long long>(processed.cells())});
    out.sps = std::move(processed);
    return out;
}

PipelineRun run_pipeline(const FeaturePyramid& pyramid, const std::vector<RoiDetection>& rois,
                         const PipelineWeights& weights, const PipelineConfig& config,
                         const RunOverrides* overrides, FlopTrace* trace) {
    PipelineRun run;
    run.stages[0] = stage0(pyramid, rois, weights, trace);
    for (int s = 1; s <= 3; ++s) {
        int k = config.k_budget;
        const RefinementScores* scores = &run.stages[s - 1].refine_scores;
        if (overrides) {
            if (overrides->k_stage[s - 1] >= 0) k = overrides->k_stage[s - 1];
            if (overrides->forced_scores) scores = &(*overrides->forced_scores)[s - 1];
        }
        run.stages[s] = refine_stage(run.stages[s - 1], s, pyramid, rois, weights, k, *scores,
                                     trace);
    }
    return run;
}

namespace {

std::vector<double> upsample2_mask(const std::vector<double>& mask, int h, int w) {
    std::vector<double> out(static_cast<std::size_t>(4) * h * w);
    for (int i = 0; i < 2 * h; ++i)
        for (int j = 0; j < 2 * w; ++j)
            out[static_cast<std::size_t>(i) * 2 * w + j] =
                mask[static_cast<std::size_t>(i / 2) * w + j / 2];
    return out;
}

} // namespace

std::vector<MaskStack> assemble_masks(const std::array<StageOutputs, 4>& stages) {
    const StageOutputs& s0 = stages[0];
    if (s0.stage != 0 || s0.seg_logits.size() !=
                             static_cast<std::size_t>(s0.n_rois) * s0.grid_h * s0.grid_w)
        throw std::invalid_argument("assemble_masks: stage 0 outputs malformed");
    for (int s = 1; s <= 3; ++s) {
        const StageOutputs& st = stages[s];
        if (st.stage != s || st.n_rois != s0.n_rois ||
            st.grid_h != stages[s - 1].grid_h * 2 || st.grid_w != stages[s - 1].grid_w * 2)
            throw std::invalid_argument("assemble_masks: inconsistent stage chain at stage " +
                                        std::to_string(s));
        if (st.seg_logits.size() != static_cast<std::size_t>(st.sps.n_active))
            throw std::invalid_argument("assemble_masks: stage " + std::to_string(s) +
                                        " logits do not match its active set");
    }

    std::vector<MaskStack> out(s0.n_rois);
    for (int r = 0; r < s0.n_rois; ++r) {
        MaskStack& stack = out[r];
        stack.base_h = s0.grid_h;
        stack.base_w = s0.grid_w;
        stack.levels[0].resize(static_cast<std::size_t>(s0.grid_h) * s0.grid_w);
        for (int i = 0; i < s0.grid_h; ++i)
            for (int j = 0; j < s0.grid_w; ++j)
                stack.levels[0][static_cast<std::size_t>(i) * s0.grid_w + j] = sigmoid(
                    s0.seg_logits[(static_cast<std::size_t>(r) * s0.grid_h + i) * s0.grid_w + j]);
    }

    for (int s = 1; s <= 3; ++s) {
        const StageOutputs& st = stages[s];
        const int ph = stages[s - 1].grid_h;
        const int pw = stages[s - 1].grid_w;
        for (int r = 0; r < s0.n_rois; ++r)
            out[r].levels[s] = upsample2_mask(out[r].levels[s - 1], ph, pw);
        const std::vector<CellRef> cells = active_positions(st.sps);
        for (int a = 0; a < st.sps.n_active; ++a)
            out[cells[a].roi].levels[s][static_cast<std::size_t>(cells[a].row) * st.grid_w +
                                        cells[a].col] = sigmoid(st.seg_logits[a]);
    }
    return out;
}

std::vector<double> paste_roi(const std::vector<double>& mask, int mask_h, int mask_w,
                              const RoiBox& box, int image_w, int image_h) {
    if (!(box.width() > 0.0f) || !(box.height() > 0.0f))
        throw std::invalid_argument("paste_roi: degenerate box");
    if (mask.size() != static_cast<std::size_t>(mask_h) * mask_w)
        throw std::invalid_argument("paste_roi: mask storage does not match its shape");

    std::vector<double> out(static_cast<std::size_t>(image_w) * image_h, 0.0);
    const int px0 = std::max(0, static_cast<int>(std::floor(box.x1)));
    const int px1 = std::min(image_w, static_cast<int>(std::ceil(box.x2)));
    const int py0 = std::max(0, static_cast<int>(std::floor(box.y1)));
    const int py1 = std::min(image_h, static_cast<int>(std::ceil(box.y2)));

    for (int py = py0; py < py1; ++py) {
        const double y = py + 0.5;
        if (y < box.y1 || y >= box.y2) continue;
        const double v = (y - box.y1) / box.height() * mask_h;
        for (int px = px0; px < px1; ++px) {
            const double x = px + 0.5;
            if (x < box.x1 || x >= box.x2) continue;
            const double u = (x - box.x1) / box.width() * mask_w;
            const BilinearTaps taps = bilinear_taps(v, u, mask_h, mask_w);
            double acc = 0.0;
            for (int t = 0; t < 4; ++t)
                if (taps.in_bounds[t])
                    acc += taps.weight[t] *
                           mask[static_cast<std::size_t>(taps.row[t]) * mask_w + taps.col[t]];
            out[static_cast<std::size_t>(py) * image_w + px] = acc;
        }
    }
    return out;
}

double score(const std::vector<double>& mask, double s_cls, double threshold) {
    double sum = 0.0;
    long long count = 0;
    for (double p : mask) {
        if (p > threshold) {
            sum += p;
            ++count;
        }
    }
    if (count == 0) return 0.0;
    return s_cls * (sum / static_cast<double>(count));
}

namespace {

constexpr int kRefineProbe = 7;

// seg/refine target of a single cell of a box grid. The 7x7 probe lattice
// spans the full cell including its corners; boundary slivers hug cell edges,
// which interior-only probes miss.
void cell_targets(const InstanceMask& gt, const RoiBox& box, int grid_h, int grid_w, int i, int j,
                  std::uint8_t& seg, std::uint8_t& refine) {
    const double cw = box.width() / grid_w;
    const double ch = box.height() / grid_h;
    const double cx = box.x1 + (j + 0.5) * cw;
    const double cy = box.y1 + (i + 0.5) * ch;
    seg = gt.contains(cx, cy) ? 1 : 0;

    bool any_fg = false, any_bg = false;
    for (int p = 0; p < kRefineProbe && !(any_fg && any_bg); ++p) {
        const double y = box.y1 + (i + p / (kRefineProbe - 1.0)) * ch;
        for (int q = 0; q < kRefineProbe; ++q) {
            const double x = box.x1 + (j + q / (kRefineProbe - 1.0)) * cw;
            (gt.contains(x, y) ? any_fg : any_bg) = true;
            if (any_fg && any_bg) break;
        }
    }
    refine = (any_fg && any_bg) ? 1 : 0;
}

} // namespace

CellTargets make_targets(const InstanceMask& gt, const RoiBox& box, int grid_h, int grid_w) {
    if (!(box.width() > 0.0f) || !(box.height() > 0.0f))
        throw std::invalid_argument("make_targets: degenerate box");
    CellTargets t;
    t.seg.resize(static_cast<std::size_t>(grid_h) * grid_w);
    t.refine.resize(t.seg.size());
    for (int i = 0; i < grid_h; ++i)
        for (int j = 0; j < grid_w; ++j)
            cell_targets(gt, box, grid_h, grid_w, i, j,
                         t.seg[static_cast<std::size_t>(i) * grid_w + j],
                         t.refine[static_cast<std::size_t>(i) * grid_w + j]);
    return t;
}

std::array<StageTargets, 4> targets_for_run(const std::array<StageOutputs, 4>& stages,
                                            const std::vector<GroundTruth>& gt,
                                            const std::vector<RoiBox>& boxes) {
    if (gt.size() != boxes.size() || static_cast<int>(gt.size()) != stages[0].n_rois)
        throw std::invalid_argument("targets_for_run: gt/box/RoI counts disagree");

    std::array<StageTargets, 4> out;
    const StageOutputs& s0 = stages[0];
    out[0].seg.reserve(s0.seg_logits.size());
    out[0].refine.reserve(s0.seg_logits.size());
    for (int r = 0; r < s0.n_rois; ++r) {
        const CellTargets ct = make_targets(*gt[r].mask, boxes[r], s0.grid_h, s0.grid_w);
        for (std::size_t c = 0; c < ct.seg.size(); ++c) {
            out[0].seg.push_back(ct.seg[c]);
            out[0].refine.push_back(ct.refine[c]);
        }
    }

    // Later stages predict at active cells only, so targets exist only there.
    for (int s = 1; s <= 3; ++s) {
        const StageOutputs& st = stages[s];
        const std::vector<CellRef> cells = active_positions(st.sps);
        out[s].seg.resize(cells.size());
        out[s].refine.resize(cells.size());
        for (std::size_t a = 0; a < cells.size(); ++a) {
            std::uint8_t seg = 0, refine = 0;
            cell_targets(*gt[cells[a].roi].mask, boxes[cells[a].roi], st.grid_h, st.grid_w,
                         cells[a].row, cells[a].col, seg, refine);
            out[s].seg[a] = seg;
            out[s].refine[a] = refine;
        }
    }
    return out;
}

LossReport eval_losses(const std::array<StageOutputs, 4>& stages,
                       const std::array<StageTargets, 4>& targets) {
    static constexpr double kSegWeights[4] = {0.25, 0.375, 0.375, 0.5};
    static constexpr double kRefineWeights[4] = {0.25, 0.25, 0.25, 0.25};

    LossReport report;
    for (int s = 0; s <= 3; ++s) {
        const StageOutputs& st = stages[s];
        const StageTargets& tg = targets[s];
        if (tg.seg.size() != st.seg_logits.size() || tg.refine.size() != st.refine_logits.size())
            throw std::invalid_argument("eval_losses: stage " + std::to_string(s) +
                                        " targets not aligned with predictions (" +
                                        std::to_string(tg.seg.size()) + " targets, " +
                                        std::to_string(st.seg_logits.size()) + " predictions)");
        double seg_sum = 0.0, refine_sum = 0.0;
        for (std::size_t i = 0; i < tg.seg.size(); ++i)
            seg_sum += bce_with_logits(st.seg_logits[i], tg.seg[i]);
        for (std::size_t i = 0; i < tg.refine.size(); ++i)
            refine_sum += bce_with_logits(st.refine_logits[i], tg.refine[i]);
        report.seg_loss[s] = tg.seg.empty() ? 0.0 : seg_sum / tg.seg.size();
        report.refine_loss[s] = tg.refine.empty() ? 0.0 : refine_sum / tg.refine.size();
        report.total += kSegWeights[s] * report.seg_loss[s] +
                        kRefineWeights[s] * report.refine_loss[s];
    }
    return report;
}

} // namespace effseg
