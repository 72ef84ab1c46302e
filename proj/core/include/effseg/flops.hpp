#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace effseg {

// One arithmetic op executed during a run, described by shape, not by values.
// Multiply-add counts are derived analytically by count_flops; gathers and
// index bookkeeping do no arithmetic and are tracked as moved elements only.
struct OpRecord {
    std::string op;    // conv3x3 | linear | bilinear | stage | gather
    std::string path;  // sparse | dense
    int stage = 0;     // 0..3
    long long sites = 0;
    int f_in = 0;
    int f_out = 0;
    bool processing = false; // belongs to the stage's processing module
    long long extra = 0;     // stage: total grid cells; gather: elements moved
};

using FlopTrace = std::vector<OpRecord>;

struct FlopStageRow {
    int stage = 0;
    long long sparse_processing = 0;
    long long dense_processing = 0;
    long long sparse_other = 0;
    long long dense_other = 0;
    double active_fraction_sparse = 0.0;
    long long sparse_total() const { return sparse_processing + sparse_other; }
    long long dense_total() const { return dense_processing + dense_other; }
};

struct FlopReport {
    std::vector<FlopStageRow> stages;
    long long sparse_total = 0;
    long long dense_total = 0;
    long long sparse_processing = 0;
    long long dense_processing = 0;
    double total_ratio = 0.0;      // sparse_total / dense_total
    double processing_ratio = 0.0; // sparse_processing / dense_processing
    long long gather_elements = 0; // overhead, excluded from the ratios

    // Stable column order for golden comparison; counts are MACs.
    void write(std::ostream& out) const;
};

// Aggregate a trace into per-stage MAC counts and sparse/dense ratios.
// Throws on an op kind the accountant does not know.
FlopReport count_flops(const FlopTrace& trace);

// MACs of a single record (0 for stage/gather bookkeeping records).
long long record_macs(const OpRecord& rec);

} // namespace effseg
