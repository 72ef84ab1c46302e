#include "effseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "effseg/rng.hpp"

namespace effseg {

DenseGrid::DenseGrid(int rois, int channels, int height, int width, float fill)
    : rois_(rois), channels_(channels), height_(height), width_(width) {
    if (rois < 1 || channels < 1 || height < 1 || width < 1)
        throw std::invalid_argument("DenseGrid: all dims must be >= 1, got [" +
                                    std::to_string(rois) + "," + std::to_string(channels) + "," +
                                    std::to_string(height) + "," + std::to_string(width) + "]");
    data_.assign(static_cast<std::size_t>(rois) * channels * height * width, fill);
}

std::vector<float> DenseGrid::cell(int r, int i, int j) const {
    std::vector<float> out(channels_);
    read_cell(r, i, j, out.data());
    return out;
}

void DenseGrid::read_cell(int r, int i, int j, float* out) const {
    for (int c = 0; c < channels_; ++c) out[c] = at(r, c, i, j);
}

void DenseGrid::write_cell(int r, int i, int j, const float* values) {
    for (int c = 0; c < channels_; ++c) at(r, c, i, j) = values[c];
}

FeaturePyramid::FeaturePyramid(int image_w, int image_h, int channels)
    : image_w_(image_w), image_h_(image_h), channels_(channels) {
    if (image_w < 1 || image_h < 1 || channels < 1)
        throw std::invalid_argument("FeaturePyramid: image size and channels must be >= 1");
    for (int k = kMinLevel; k <= kMaxLevel; ++k) {
        const int s = stride(k);
        const int h = (image_h + s - 1) / s;
        const int w = (image_w + s - 1) / s;
        levels_.emplace_back(1, channels, std::max(h, 1), std::max(w, 1));
    }
}

FeaturePyramid FeaturePyramid::random(int image_w, int image_h, int channels, std::uint64_t seed) {
    FeaturePyramid pyr(image_w, image_h, channels);
    for (int k = kMinLevel; k <= kMaxLevel; ++k) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(k)));
        for (float& v : pyr.level(k).data()) v = rng.uniform_f(-1.0f, 1.0f);
    }
    return pyr;
}

const DenseGrid& FeaturePyramid::level(int k) const {
    if (k < kMinLevel || k > kMaxLevel)
        throw std::invalid_argument("FeaturePyramid: level " + std::to_string(k) +
                                    " outside [2,7]");
    return levels_[k - kMinLevel];
}

DenseGrid& FeaturePyramid::level(int k) {
    if (k < kMinLevel || k > kMaxLevel)
        throw std::invalid_argument("FeaturePyramid: level " + std::to_string(k) +
                                    " outside [2,7]");
    return levels_[k - kMinLevel];
}

int level_select_initial(const RoiBox& box) {
    const double w = box.width();
    const double h = box.height();
    if (!(w > 0.0) || !(h > 0.0))
        throw std::invalid_argument("level_select_initial: degenerate box (w=" +
                                    std::to_string(w) + ", h=" + std::to_string(h) + ")");
    const double scale = std::sqrt(w * h);
    const double raw = std::floor(std::log2(scale / 56.0));
    int k0 = 2 + static_cast<int>(std::min(raw, 3.0));
    return std::clamp(k0, FeaturePyramid::kMinLevel, FeaturePyramid::kMaxLevel);
}

int level_select_stage(int k0, int stage) {
    if (k0 < FeaturePyramid::kMinLevel || k0 > FeaturePyramid::kMaxLevel)
        throw std::invalid_argument("level_select_stage: k0=" + std::to_string(k0) +
                                    " outside [2,7]");
    if (stage < 0 || stage > 3)
        throw std::invalid_argument("level_select_stage: stage=" + std::to_string(stage) +
                                    " outside [0,3]");
    return std::max(k0 - stage, FeaturePyramid::kMinLevel);
}

BilinearTaps bilinear_taps(double row, double col, int height, int width) {
    const double r = row - 0.5;
    const double c = col - 0.5;
    const int i0 = static_cast<int>(std::floor(r));
    const int j0 = static_cast<int>(std::floor(c));
    const double dr = r - i0;
    const double dc = c - j0;

    BilinearTaps taps;
    const int rows[2] = {i0, i0 + 1};
    const int cols[2] = {j0, j0 + 1};
    const double wr[2] = {1.0 - dr, dr};
    const double wc[2] = {1.0 - dc, dc};
    int t = 0;
    for (int a = 0; a < 2; ++a) {
        for (int b = 0; b < 2; ++b, ++t) {
            taps.row[t] = rows[a];
            taps.col[t] = cols[b];
            taps.weight[t] = wr[a] * wc[b];
            taps.in_bounds[t] =
                rows[a] >= 0 && rows[a] < height && cols[b] >= 0 && cols[b] < width;
        }
    }
    return taps;
}

void bilinear_sample(const DenseGrid& grid, int roi, double row, double col, float* out) {
    const BilinearTaps taps = bilinear_taps(row, col, grid.height(), grid.width());
    for (int c = 0; c < grid.channels(); ++c) {
        double acc = 0.0;
        for (int t = 0; t < 4; ++t) {
            if (!taps.in_bounds[t]) continue; // zero padding
            acc += taps.weight[t] * static_cast<double>(grid.at(roi, c, taps.row[t], taps.col[t]));
        }
        out[c] = static_cast<float>(acc);
    }
}

std::vector<float> bilinear_sample(const DenseGrid& grid, int roi, double row, double col) {
    std::vector<float> out(grid.channels());
    bilinear_sample(grid, roi, row, col, out.data());
    return out;
}

DenseGrid roi_align(const FeaturePyramid& pyramid, const RoiDetection& roi, int out_h, int out_w) {
    const double w = roi.box.width();
    const double h = roi.box.height();
    if (!(w > 0.0) || !(h > 0.0))
        throw std::invalid_argument("roi_align: degenerate box");

    const int level = level_select_initial(roi.box);
    const DenseGrid& feat = pyramid.level(level);
    const double s = FeaturePyramid::stride(level);

    const double x1 = roi.box.x1 / s;
    const double y1 = roi.box.y1 / s;
    const double bin_w = (w / s) / out_w;
    const double bin_h = (h / s) / out_h;

    DenseGrid out(1, pyramid.channels(), out_h, out_w);
    std::vector<float> sample(pyramid.channels());
    std::vector<double> acc(pyramid.channels());
    constexpr int kSamplingRatio = 2;

    for (int i = 0; i < out_h; ++i) {
        for (int j = 0; j < out_w; ++j) {
            std::fill(acc.begin(), acc.end(), 0.0);
            for (int p = 0; p < kSamplingRatio; ++p) {
                const double y = y1 + (i + (p + 0.5) / kSamplingRatio) * bin_h;
                for (int q = 0; q < kSamplingRatio; ++q) {
                    const double x = x1 + (j + (q + 0.5) / kSamplingRatio) * bin_w;
                    bilinear_sample(feat, 0, y, x, sample.data());
                    for (int c = 0; c < pyramid.channels(); ++c) acc[c] += sample[c];
                }
            }
            for (int c = 0; c < pyramid.channels(); ++c)
                out.at(0, c, i, j) = static_cast<float>(acc[c] / (kSamplingRatio * kSamplingRatio));
        }
    }
    return out;
}

DenseGrid roi_align_batch(const FeaturePyramid& pyramid, const std::vector<RoiDetection>& rois,
                          int out_h, int out_w) {
    if (rois.empty()) throw std::invalid_argument("roi_align_batch: no RoIs");
    DenseGrid out(static_cast<int>(rois.size()), pyramid.channels(), out_h, out_w);
    for (std::size_t r = 0; r < rois.size(); ++r) {
        const DenseGrid one = roi_align(pyramid, rois[r], out_h, out_w);
        for (int c = 0; c < out.channels(); ++c)
            for (int i = 0; i < out_h; ++i)
                for (int j = 0; j < out_w; ++j)
                    out.at(static_cast<int>(r), c, i, j) = one.at(0, c, i, j);
    }
    return out;
}

DenseGrid dense_conv2d(const DenseGrid& grid, const ConvKernel& kernel) {
    kernel.check_valid("dense_conv2d kernel");
    if (kernel.in_channels != grid.channels())
        throw std::invalid_argument("dense_conv2d: kernel in_channels=" +
                                    std::to_string(kernel.in_channels) + " but grid has " +
                                    std::to_string(grid.channels()) + " channels");

    const int d = kernel.dilation;
    DenseGrid out(grid.rois(), kernel.out_channels, grid.height(), grid.width());
    for (int r = 0; r < grid.rois(); ++r) {
        for (int co = 0; co < kernel.out_channels; ++co) {
            for (int i = 0; i < grid.height(); ++i) {
                for (int j = 0; j < grid.width(); ++j) {
                    double acc = kernel.bias[co];
                    for (int ci = 0; ci < grid.channels(); ++ci) {
                        for (int u = 0; u < 3; ++u) {
                            const int ii = i + (u - 1) * d;
                            if (ii < 0 || ii >= grid.height()) continue;
                            for (int v = 0; v < 3; ++v) {
                                const int jj = j + (v - 1) * d;
                                if (jj < 0 || jj >= grid.width()) continue;
                                acc += static_cast<double>(kernel.w(co, ci, u, v)) *
                                       static_cast<double>(grid.at(r, ci, ii, jj));
                            }
                        }
                    }
                    out.at(r, co, i, j) = static_cast<float>(acc);
                }
            }
        }
    }
    return out;
}

} // namespace effseg
