#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <vector>

#include "effseg/params.hpp"

namespace effseg {

// Dense [rois, channels, height, width] float tensor, row-major.
class DenseGrid {
public:
    DenseGrid() = default;
    DenseGrid(int rois, int channels, int height, int width, float fill = 0.0f);

    int rois() const { return rois_; }
    int channels() const { return channels_; }
    int height() const { return height_; }
    int width() const { return width_; }
    bool empty() const { return data_.empty(); }
    std::size_t size() const { return data_.size(); }

    float at(int r, int c, int i, int j) const { return data_[offset(r, c, i, j)]; }
    float& at(int r, int c, int i, int j) { return data_[offset(r, c, i, j)]; }

    // Channel vector of one spatial cell (channels are strided in memory).
    std::vector<float> cell(int r, int i, int j) const;
    void read_cell(int r, int i, int j, float* out) const;
    void write_cell(int r, int i, int j, const float* values);

    bool same_shape(const DenseGrid& other) const {
        return rois_ == other.rois_ && channels_ == other.channels_ &&
               height_ == other.height_ && width_ == other.width_;
    }

    const std::vector<float>& data() const { return data_; }
    std::vector<float>& data() { return data_; }

private:
    std::size_t offset(int r, int c, int i, int j) const {
        return ((static_cast<std::size_t>(r) * channels_ + c) * height_ + i) * width_ + j;
    }

    int rois_ = 0, channels_ = 0, height_ = 0, width_ = 0;
    std::vector<float> data_;
};

struct RoiBox {
    float x1 = 0, y1 = 0, x2 = 0, y2 = 0;
    float width() const { return x2 - x1; }
    float height() const { return y2 - y1; }
};

// One detected object: box, classification score, query feature.
struct RoiDetection {
    RoiBox box;
    float s_cls = 0.0f;
    std::vector<float> query;
};

// Backbone levels 2..7, stride 2^k, all sharing one channel count.
class FeaturePyramid {
public:
    static constexpr int kMinLevel = 2;
    static constexpr int kMaxLevel = 7;

    FeaturePyramid() = default;
    FeaturePyramid(int image_w, int image_h, int channels);

    static FeaturePyramid random(int image_w, int image_h, int channels, std::uint64_t seed);

    const DenseGrid& level(int k) const;
    DenseGrid& level(int k);
    static int stride(int k) { return 1 << k; }

    int image_width() const { return image_w_; }
    int image_height() const { return image_h_; }
    int channels() const { return channels_; }

private:
    int image_w_ = 0, image_h_ = 0, channels_ = 0;
    std::vector<DenseGrid> levels_; // index 0 <-> level 2
};

// Initial pyramid level for a box: 2 + min(floor(log2(sqrt(w*h)/56)), 3), clamped to [2,7].
int level_select_initial(const RoiBox& box);

// Level for refinement stage s: max(k0 - s, 2).
int level_select_stage(int k0, int stage);

// Bilinear interpolation support, shared by every sampler in the project.
// Cell (i, j) has its center at continuous (i + 0.5, j + 0.5); out-of-bounds
// neighbors carry weight over the implicit zero padding.
struct BilinearTaps {
    int row[4];
    int col[4];
    double weight[4];
    bool in_bounds[4];
};
BilinearTaps bilinear_taps(double row, double col, int height, int width);

// Sample all channels of one RoI slice at a continuous point; zero padding outside.
void bilinear_sample(const DenseGrid& grid, int roi, double row, double col, float* out);
std::vector<float> bilinear_sample(const DenseGrid& grid, int roi, double row, double col);

// Pool one box into a fixed out_h x out_w grid from the pyramid level picked by
// level_select_initial. Each output cell averages a 2x2 grid of bilinear samples
// placed uniformly inside the cell's sub-box.
DenseGrid roi_align(const FeaturePyramid& pyramid, const RoiDetection& roi, int out_h, int out_w);
DenseGrid roi_align_batch(const FeaturePyramid& pyramid, const std::vector<RoiDetection>& rois,
                          int out_h, int out_w);

// 3x3 cross-correlation with zero padding, spatial size preserved.
DenseGrid dense_conv2d(const DenseGrid& grid, const ConvKernel& kernel);

} // namespace effseg
