#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "effseg/pipeline.hpp"

namespace effseg::cli {

// Parse the key/value pipeline config file; empty path gives defaults.
PipelineConfig parse_config(const std::string& path);

// Load weights from a file, or build seeded weights from the config.
PipelineWeights resolve_weights(const std::string& path, const PipelineConfig& config);

// Subcommand bodies. All return a process exit code
// (0 success, 1 verification failure, 2 usage/input error).
int cmd_generate(std::uint64_t seed, int n_instances, int image_size, const std::string& out_dir,
                 std::ostream& log);
int cmd_demo(const std::string& scene_path, const std::string& config_path,
             const std::string& weights_path, const std::string& out_dir, bool dump_masks,
             std::ostream& log);
int cmd_verify(std::uint64_t seed, int trials, bool inject_fault, std::ostream& log);
int cmd_bench(const std::string& scene_path, const std::string& config_path,
              const std::string& weights_path, const std::vector<double>& fractions,
              const std::string& out_dir, std::ostream& log);

// Run-length encoding of a thresholded mask, row-major, zero-runs first.
std::vector<long long> encode_rle(const std::vector<double>& mask, double threshold);

} // namespace effseg::cli
