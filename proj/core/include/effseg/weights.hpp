#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "effseg/params.hpp"

namespace effseg {

enum class Processing { Mlp, Conv, Deform, Sfm };

const char* to_string(Processing kind);
Processing processing_from_string(const std::string& name);

// Flat named-tensor store backing the text weight format
// (name -> shape -> row-major values); see docs/FORMATS.md.
struct NamedTensor {
    std::vector<int> shape;
    std::vector<float> values;
};

class WeightStore {
public:
    void put(const std::string& name, std::vector<int> shape, std::vector<float> values);
    const NamedTensor& get(const std::string& name) const;
    const NamedTensor& get(const std::string& name, const std::vector<int>& expect_shape) const;
    bool has(const std::string& name) const;

    void save(std::ostream& out) const;
    void save_file(const std::string& path) const;
    static WeightStore load(std::istream& in);
    static WeightStore load_file(const std::string& path);

    const std::vector<std::pair<std::string, NamedTensor>>& entries() const { return entries_; }

private:
    std::vector<std::pair<std::string, NamedTensor>> entries_; // insertion order kept for stable files
};

struct HeadWeights {
    MlpParams seg;
    MlpParams refine;
};

// Parameters of one refinement stage (feature size F_prev on entry, F_prev/2
// after the halving projection).
struct StageWeights {
    std::array<MlpParams, 4> child; // one per 2x2 child position, row-major
    MlpParams fuse;                 // (F_prev + backbone_dim) -> F_prev
    MlpParams halve;                // one layer, F_prev -> F_prev/2
    ProcessingParams processing;
    HeadWeights heads;              // at F_prev/2
};

struct PipelineWeights {
    int feat0 = 256;
    MlpParams query_fuse;               // 2*F0 -> F0
    std::array<ConvKernel, 4> fcn;      // dilation 1, F0 -> F0
    HeadWeights stage0_heads;           // at F0
    std::array<StageWeights, 3> stages; // index s-1 holds stage s

    int feat_at(int stage) const { return feat0 >> stage; }
    Processing processing_kind() const;

    // Full dimension-chain check; throws naming the failing dimension.
    void validate(int pyramid_channels) const;
};

// Demo initialization: every parameter uniform(-0.05, 0.05) from the seed.
PipelineWeights make_seeded_weights(std::uint64_t seed, int feat0, int backbone_channels,
                                    bool backbone_sample_full, Processing kind);

// All-zero weights of the right shapes (test scaffolding for constructed cases).
PipelineWeights make_zero_weights(int feat0, int backbone_channels, bool backbone_sample_full,
                                  Processing kind);

WeightStore weights_to_store(const PipelineWeights& weights);
PipelineWeights weights_from_store(const WeightStore& store);

} // namespace effseg
