#include "effseg/flops.hpp"

#include <algorithm>
#include <cstdio>
#include <ostream>
#include <stdexcept>

namespace effseg {

long long record_macs(const OpRecord& rec) {
    if (rec.op == "conv3x3") return rec.sites * 9ll * rec.f_in * rec.f_out;
    if (rec.op == "linear") return rec.sites * static_cast<long long>(rec.f_in) * rec.f_out;
    if (rec.op == "bilinear") return rec.sites * 4ll * rec.f_in; // 4 taps per sample point
    if (rec.op == "stage" || rec.op == "gather") return 0;
    throw std::invalid_argument("count_flops: unknown op '" + rec.op + "' in trace");
}

FlopReport count_flops(const FlopTrace& trace) {
    FlopReport report;
    int max_stage = -1;
    for (const OpRecord& rec : trace) max_stage = std::max(max_stage, rec.stage);
    report.stages.resize(max_stage + 1);
    for (int s = 0; s <= max_stage; ++s) report.stages[s].stage = s;

    std::vector<long long> active_cells(max_stage + 1, 0);
    std::vector<long long> total_cells(max_stage + 1, 0);

    for (const OpRecord& rec : trace) {
        if (rec.path != "sparse" && rec.path != "dense")
            throw std::invalid_argument("count_flops: unknown path '" + rec.path + "' in trace");
        const long long macs = record_macs(rec);
        FlopStageRow& row = report.stages[rec.stage];
        if (rec.op == "gather") {
            report.gather_elements += rec.extra;
            continue;
        }
        if (rec.op == "stage") {
            if (rec.path == "sparse") {
                active_cells[rec.stage] = rec.sites;
                total_cells[rec.stage] = rec.extra;
            }
            continue;
        }
        if (rec.path == "sparse") {
            (rec.processing ? row.sparse_processing : row.sparse_other) += macs;
        } else {
            (rec.processing ? row.dense_processing : row.dense_other) += macs;
        }
    }

    for (int s = 0; s <= max_stage; ++s) {
        FlopStageRow& row = report.stages[s];
        row.active_fraction_sparse =
            total_cells[s] > 0 ? static_cast<double>(active_cells[s]) / total_cells[s] : 0.0;
        report.sparse_total += row.sparse_total();
        report.dense_total += row.dense_total();
        report.sparse_processing += row.sparse_processing;
        report.dense_processing += row.dense_processing;
    }
    report.total_ratio = report.dense_total > 0
                             ? static_cast<double>(report.sparse_total) / report.dense_total
                             : 0.0;
    report.processing_ratio =
        report.dense_processing > 0
            ? static_cast<double>(report.sparse_processing) / report.dense_processing
            : 0.0;
    return report;
}

void FlopReport::write(std::ostream& out) const {
    char buf[64];
    out << "effseg-flops v1\n";
    out << "columns stage active_fraction sparse_proc_macs dense_proc_macs proc_ratio "
           "sparse_total_macs dense_total_macs total_ratio\n";
    for (const FlopStageRow& row : stages) {
        const double pr = row.dense_processing > 0
                              ? static_cast<double>(row.sparse_processing) / row.dense_processing
                              : 0.0;
        const double tr = row.dense_total() > 0
                              ? static_cast<double>(row.sparse_total()) / row.dense_total()
                              : 0.0;
        std::snprintf(buf, sizeof(buf), "%.6f", row.active_fraction_sparse);
        out << "stage " << row.stage << ' ' << buf << ' ' << row.sparse_processing << ' '
            << row.dense_processing << ' ';
        std::snprintf(buf, sizeof(buf), "%.6f", pr);
        out << buf << ' ' << row.sparse_total() << ' ' << row.dense_total() << ' ';
        std::snprintf(buf, sizeof(buf), "%.6f", tr);
        out << buf << '\n';
    }
    std::snprintf(buf, sizeof(buf), "%.6f", processing_ratio);
    out << "totals proc " << sparse_processing << ' ' << dense_processing << ' ' << buf;
    std::snprintf(buf, sizeof(buf), "%.6f", total_ratio);
    out << " all " << sparse_total << ' ' << dense_total << ' ' << buf << '\n';
    out << "overhead gather_elements " << gather_elements << " (no arithmetic, excluded from ratios)\n";
}

} // namespace effseg
