#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <variant>
#include <vector>

#include "effseg/pipeline.hpp"
#include "effseg/sps.hpp"
#include "effseg/tensor.hpp"

namespace effseg {

// Analytic shapes standing in for detector outputs and ground-truth masks.

struct EllipseShape final : InstanceMask {
    double cx = 0, cy = 0, ax = 1, ay = 1; // axis-aligned semi-axes
    bool contains(double x, double y) const override;
};

struct PolygonShape final : InstanceMask {
    std::vector<double> xs, ys; // closed polygon, even-odd rule
    bool contains(double x, double y) const override;
};

struct SceneInstance {
    std::variant<EllipseShape, PolygonShape> shape;
    RoiBox box; // tight box of the rasterized mask, in whole pixels
    float s_cls = 0.0f;
    int label = 0;
    std::uint64_t query_seed = 0;

    const InstanceMask& mask() const;
};

// A reproducible scene: analytic instances plus a seeded backbone pyramid.
struct SyntheticScene {
    std::uint64_t seed = 0;
    int image_w = 0;
    int image_h = 0;
    int pyramid_channels = 256;
    std::uint64_t pyramid_seed = 0;
    std::vector<SceneInstance> instances;

    // channels == 0 uses the stored default.
    FeaturePyramid make_pyramid(int channels = 0) const;
    std::vector<RoiDetection> detections(int query_dim) const;
    std::vector<RoiBox> boxes() const;
    std::vector<GroundTruth> ground_truths() const;

    void save(std::ostream& out) const;
    void save_file(const std::string& path) const;
    static SyntheticScene load(std::istream& in);
    static SyntheticScene load_file(const std::string& path);
};

SyntheticScene generate_scene(std::uint64_t seed, int n_instances, int image_w, int image_h);

// Pixel-center rasterization of a region: out[y * w + x] = contains(x+0.5, y+0.5).
std::vector<std::uint8_t> rasterize(const InstanceMask& region, int image_w, int image_h);

// Benchmark score forcing: cells whose sub-box mixes foreground and background
// score near 1, pure cells near 0, so budgets concentrate at mask boundaries.
RefinementScores boundary_scores(const InstanceMask& region, const RoiBox& box, int grid_h,
                                 int grid_w);
RefinementScores boundary_scores_all(const SyntheticScene& scene, int grid_h, int grid_w);

// Randomized SPS map with genuine duplicated passive references, for
// verification sweeps: build at half resolution, split once with seeded child
// MLPs, then re-partition at the target fraction.
SpsMap random_sps_map(std::uint64_t seed, int rois, int grid_h, int grid_w, int feat,
                      double active_fraction);

} // namespace effseg
