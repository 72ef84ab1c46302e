#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "effseg/params.hpp"
#include "effseg/tensor.hpp"

namespace effseg {

// Structure-preserving sparse map over a [rois, height, width] grid:
// an active feature matrix, a deduplicated passive feature matrix, and a
// dense integer index grid referencing rows of the two.
//
// Index values in [0, n_active) point into the active matrix; values in
// [n_active, n_active + n_passive) point at passive row (value - n_active).
// Every active row is referenced by exactly one cell; passive rows may be
// referenced any number of times >= 1. Out-of-grid reads use an implicit
// zero padding feature.
struct SpsMap {
    int rois = 0;
    int height = 0;
    int width = 0;
    int feat = 0;
    int stage = 0;

    int n_active = 0;
    int n_passive = 0;
    std::vector<float> active;    // [n_active, feat], row-major
    std::vector<float> passive;   // [n_passive, feat], row-major
    std::vector<std::int32_t> index; // [rois, height, width], row-major

    int cells() const { return rois * height * width; }
    int flat(int r, int i, int j) const { return (r * height + i) * width + j; }

    std::int32_t idx(int r, int i, int j) const { return index[flat(r, i, j)]; }
    std::int32_t& idx(int r, int i, int j) { return index[flat(r, i, j)]; }

    const float* active_row(int a) const { return active.data() + static_cast<std::size_t>(a) * feat; }
    float* active_row(int a) { return active.data() + static_cast<std::size_t>(a) * feat; }
    const float* passive_row(int p) const { return passive.data() + static_cast<std::size_t>(p) * feat; }
    float* passive_row(int p) { return passive.data() + static_cast<std::size_t>(p) * feat; }

    // Row behind any feature id (active or passive).
    const float* feature(std::int32_t fid) const {
        return fid < n_active ? active_row(fid) : passive_row(fid - n_active);
    }
};

struct CellRef {
    int roi = 0;
    int row = 0;
    int col = 0;
};

// Per-cell scores on the current grid, used to rank cells for activation.
// Layout matches the index grid: [rois, height, width] row-major, values finite.
using RefinementScores = std::vector<float>;

// Partition a dense grid: the k_budget cells with the highest scores become
// active (ties broken by ascending flat index), every remaining cell's feature
// becomes one passive row. Active rows are ordered by descending score then
// flat index; passive rows by flat index.
SpsMap build_from_dense(const DenseGrid& dense, const RefinementScores& scores, int k_budget);

// Re-partition an existing map by the same top-k rule. Each selected cell gets
// its own active copy of the feature it currently references (a duplicated
// passive row is materialized per selected cell); unselected cells keep
// sharing deduplicated passive rows.
SpsMap update_partition(const SpsMap& sps, const RefinementScores& scores, int k_budget);

// Double the grid. Each active parent's 4 children get fresh active features
// from the 4 child MLPs (child order: row-major over the 2x2 block); each
// passive parent's children all reference the parent's passive row.
SpsMap upsample_split(const SpsMap& sps, const std::array<MlpParams, 4>& child_mlps);

// Features referenced at cell + offsets, in offset order; zero rows outside the grid.
void gather_neighborhood(const SpsMap& sps, CellRef cell,
                         const std::vector<std::pair<int, int>>& offsets, float* out);
std::vector<float> gather_neighborhood(const SpsMap& sps, CellRef cell,
                                       const std::vector<std::pair<int, int>>& offsets);

// Bilinear blend of the 4 features referenced around a continuous point
// (same center convention as bilinear_sample), zero padding outside.
void gather_bilinear(const SpsMap& sps, int roi, double row, double col, float* out);
std::vector<float> gather_bilinear(const SpsMap& sps, int roi, double row, double col);

// Replace the active matrix; index map and passive matrix stay untouched.
SpsMap scatter_update(const SpsMap& sps, std::vector<float> new_active);

// Materialize the dense grid; duplicated passive references expand by copy.
DenseGrid to_dense(const SpsMap& sps);

// Cell of each active row (inverse of the index map restricted to actives),
// indexed by active row id.
std::vector<CellRef> active_positions(const SpsMap& sps);

// Check every structural invariant; returns a message naming the first
// violated invariant, or nullopt when the map is sound.
std::optional<std::string> validate(const SpsMap& sps);

// Debug serialization: index grid as integer CSV per RoI, feature matrices as
// float CSV rows. Stable across runs; see docs/FORMATS.md.
void dump_sps(const SpsMap& sps, std::ostream& out);
SpsMap parse_sps(std::istream& in);

} // namespace effseg
