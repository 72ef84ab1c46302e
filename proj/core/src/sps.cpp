#include "effseg/sps.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace effseg {

namespace {

void check_scores(const RefinementScores& scores, int cells, const char* where) {
    if (static_cast<int>(scores.size()) != cells)
        throw std::invalid_argument(std::string(where) + ": scores length " +
                                    std::to_string(scores.size()) + " does not match grid cells " +
                                    std::to_string(cells));
    for (float s : scores)
        if (!std::isfinite(s))
            throw std::invalid_argument(std::string(where) + ": non-finite score");
}

// Flat cell indices of the top-k cells, ordered by descending score then
// ascending flat index.
std::vector<int> select_top_cells(const RefinementScores& scores, int cells, int k_budget) {
    if (k_budget < 0) throw std::invalid_argument("top-k selection: negative budget");
    std::vector<int> order(cells);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    order.resize(std::min(k_budget, cells));
    return order;
}

void copy_row(const float* src, std::vector<float>& dst, int row, int feat) {
    std::copy(src, src + feat, dst.begin() + static_cast<std::size_t>(row) * feat);
}

} // namespace

SpsMap build_from_dense(const DenseGrid& dense, const RefinementScores& scores, int k_budget) {
    const int cells = dense.rois() * dense.height() * dense.width();
    check_scores(scores, cells, "build_from_dense");

    SpsMap sps;
    sps.rois = dense.rois();
    sps.height = dense.height();
    sps.width = dense.width();
    sps.feat = dense.channels();

    const std::vector<int> selected = select_top_cells(scores, cells, k_budget);
    sps.n_active = static_cast<int>(selected.size());
    sps.n_passive = cells - sps.n_active;
    sps.active.assign(static_cast<std::size_t>(sps.n_active) * sps.feat, 0.0f);
    sps.passive.assign(static_cast<std::size_t>(sps.n_passive) * sps.feat, 0.0f);
    sps.index.assign(cells, -1);

    std::vector<float> buf(sps.feat);
    for (int rank = 0; rank < sps.n_active; ++rank) {
        const int cell = selected[rank];
        const int r = cell / (sps.height * sps.width);
        const int i = (cell / sps.width) % sps.height;
        const int j = cell % sps.width;
        dense.read_cell(r, i, j, buf.data());
        copy_row(buf.data(), sps.active, rank, sps.feat);
        sps.index[cell] = rank;
    }

    int next_passive = 0;
    for (int cell = 0; cell < cells; ++cell) {
        if (sps.index[cell] >= 0) continue;
        const int r = cell / (sps.height * sps.width);
        const int i = (cell / sps.width) % sps.height;
        const int j = cell % sps.width;
        dense.read_cell(r, i, j, buf.data());
        copy_row(buf.data(), sps.passive, next_passive, sps.feat);
        sps.index[cell] = sps.n_active + next_passive;
        ++next_passive;
    }
    return sps;
}

SpsMap update_partition(const SpsMap& sps, const RefinementScores& scores, int k_budget) {
    check_scores(scores, sps.cells(), "update_partition");

    SpsMap out;
    out.rois = sps.rois;
    out.height = sps.height;
    out.width = sps.width;
    out.feat = sps.feat;
    out.stage = sps.stage;

    const std::vector<int> selected = select_top_cells(scores, sps.cells(), k_budget);
    out.n_active = static_cast<int>(selected.size());
    out.active.assign(static_cast<std::size_t>(out.n_active) * out.feat, 0.0f);
    out.index.assign(sps.cells(), -1);

    // Each selected cell gets its own copy of whatever it referenced before,
    // even when several selected cells shared one passive row.
    for (int rank = 0; rank < out.n_active; ++rank) {
        const int cell = selected[rank];
        copy_row(sps.feature(sps.index[cell]), out.active, rank, out.feat);
        out.index[cell] = rank;
    }

    // Unselected cells keep sharing: one new passive row per distinct old
    // feature id, numbered in first-occurrence order of a flat scan.
    std::vector<std::int32_t> remap(static_cast<std::size_t>(sps.n_active) + sps.n_passive, -1);
    std::vector<std::int32_t> kept_old_ids;
    for (int cell = 0; cell < sps.cells(); ++cell) {
        if (out.index[cell] >= 0) continue;
        const std::int32_t old_id = sps.index[cell];
        if (remap[old_id] < 0) {
            remap[old_id] = static_cast<std::int32_t>(kept_old_ids.size());
            kept_old_ids.push_back(old_id);
        }
        out.index[cell] = out.n_active + remap[old_id];
    }
    out.n_passive = static_cast<int>(kept_old_ids.size());
    out.passive.assign(static_cast<std::size_t>(out.n_passive) * out.feat, 0.0f);
    for (int p = 0; p < out.n_passive; ++p)
        copy_row(sps.feature(kept_old_ids[p]), out.passive, p, out.feat);
    return out;
}

SpsMap upsample_split(const SpsMap& sps, const std::array<MlpParams, 4>& child_mlps) {
    for (int c = 0; c < 4; ++c) {
        child_mlps[c].check_valid("upsample_split child " + std::to_string(c));
        if (child_mlps[c].input_dim() != sps.feat || child_mlps[c].output_dim() != sps.feat)
            throw std::invalid_argument("upsample_split: child " + std::to_string(c) + " maps " +
                                        std::to_string(child_mlps[c].input_dim()) + " -> " +
                                        std::to_string(child_mlps[c].output_dim()) +
                                        " but features have size " + std::to_string(sps.feat));
    }

    SpsMap out;
    out.rois = sps.rois;
    out.height = sps.height * 2;
    out.width = sps.width * 2;
    out.feat = sps.feat;
    out.stage = sps.stage;
    out.n_active = sps.n_active * 4;
    out.n_passive = sps.n_passive;
    out.active.assign(static_cast<std::size_t>(out.n_active) * out.feat, 0.0f);
    out.passive = sps.passive;
    out.index.assign(out.cells(), -1);

    // New active ids: 4 * parent_row + child, child row-major over the 2x2 block.
    for (int p = 0; p < sps.n_active; ++p) {
        for (int c = 0; c < 4; ++c)
            child_mlps[c].forward(sps.active_row(p), out.active_row(4 * p + c));
    }

    for (int r = 0; r < sps.rois; ++r) {
        for (int i = 0; i < sps.height; ++i) {
            for (int j = 0; j < sps.width; ++j) {
                const std::int32_t fid = sps.idx(r, i, j);
                for (int dr = 0; dr < 2; ++dr) {
                    for (int dc = 0; dc < 2; ++dc) {
                        std::int32_t child_id;
                        if (fid < sps.n_active)
                            child_id = 4 * fid + dr * 2 + dc;
                        else
                            child_id = out.n_active + (fid - sps.n_active);
                        out.idx(r, 2 * i + dr, 2 * j + dc) = child_id;
                    }
                }
            }
        }
    }
    return out;
}

void gather_neighborhood(const SpsMap& sps, CellRef cell,
                         const std::vector<std::pair<int, int>>& offsets, float* out) {
    if (cell.roi < 0 || cell.roi >= sps.rois || cell.row < 0 || cell.row >= sps.height ||
        cell.col < 0 || cell.col >= sps.width)
        throw std::invalid_argument("gather_neighborhood: cell outside grid");
    for (std::size_t o = 0; o < offsets.size(); ++o) {
        const int i = cell.row + offsets[o].first;
        const int j = cell.col + offsets[o].second;
        float* dst = out + o * sps.feat;
        if (i < 0 || i >= sps.height || j < 0 || j >= sps.width) {
            std::fill(dst, dst + sps.feat, 0.0f); // padding feature
            continue;
        }
        const float* src = sps.feature(sps.idx(cell.roi, i, j));
        std::copy(src, src + sps.feat, dst);
    }
}

std::vector<float> gather_neighborhood(const SpsMap& sps, CellRef cell,
                                       const std::vector<std::pair<int, int>>& offsets) {
    std::vector<float> out(offsets.size() * sps.feat);
    gather_neighborhood(sps, cell, offsets, out.data());
    return out;
}

void gather_bilinear(const SpsMap& sps, int roi, double row, double col, float* out) {
    const BilinearTaps taps = bilinear_taps(row, col, sps.height, sps.width);
    const float* rows[4] = {nullptr, nullptr, nullptr, nullptr};
    for (int t = 0; t < 4; ++t)
        if (taps.in_bounds[t]) rows[t] = sps.feature(sps.idx(roi, taps.row[t], taps.col[t]));
    for (int c = 0; c < sps.feat; ++c) {
        double acc = 0.0;
        for (int t = 0; t < 4; ++t)
            if (rows[t]) acc += taps.weight[t] * static_cast<double>(rows[t][c]);
        out[c] = static_cast<float>(acc);
    }
}

std::vector<float> gather_bilinear(const SpsMap& sps, int roi, double row, double col) {
    std::vector<float> out(sps.feat);
    gather_bilinear(sps, roi, row, col, out.data());
    return out;
}

SpsMap scatter_update(const SpsMap& sps, std::vector<float> new_active) {
    if (new_active.size() != static_cast<std::size_t>(sps.n_active) * sps.feat)
        throw std::invalid_argument("scatter_update: expected " + std::to_string(sps.n_active) +
                                    " rows of " + std::to_string(sps.feat) + " values, got " +
                                    std::to_string(new_active.size()) + " values");
    SpsMap out = sps;
    out.active = std::move(new_active);
    return out;
}

DenseGrid to_dense(const SpsMap& sps) {
    DenseGrid out(sps.rois, sps.feat, sps.height, sps.width);
    for (int r = 0; r < sps.rois; ++r)
        for (int i = 0; i < sps.height; ++i)
            for (int j = 0; j < sps.width; ++j)
                out.write_cell(r, i, j, sps.feature(sps.idx(r, i, j)));
    return out;
}

std::vector<CellRef> active_positions(const SpsMap& sps) {
    std::vector<CellRef> pos(sps.n_active);
    std::vector<bool> seen(sps.n_active, false);
    for (int r = 0; r < sps.rois; ++r) {
        for (int i = 0; i < sps.height; ++i) {
            for (int j = 0; j < sps.width; ++j) {
                const std::int32_t fid = sps.idx(r, i, j);
                if (fid >= sps.n_active) continue;
                if (seen[fid])
                    throw std::invalid_argument("active_positions: active index " +
                                                std::to_string(fid) + " appears more than once");
                seen[fid] = true;
                pos[fid] = CellRef{r, i, j};
            }
        }
    }
    for (int a = 0; a < sps.n_active; ++a)
        if (!seen[a])
            throw std::invalid_argument("active_positions: active index " + std::to_string(a) +
                                        " never appears in the index grid");
    return pos;
}

std::optional<std::string> validate(const SpsMap& sps) {
    if (sps.rois < 0 || sps.height < 0 || sps.width < 0 || sps.feat < 0 || sps.n_active < 0 ||
        sps.n_passive < 0)
        return "negative shape metadata";
    if (sps.index.size() != static_cast<std::size_t>(sps.cells()))
        return "index grid size " + std::to_string(sps.index.size()) +
               " does not match rois*height*width = " + std::to_string(sps.cells());
    if (sps.active.size() != static_cast<std::size_t>(sps.n_active) * sps.feat)
        return "active matrix storage does not match n_active x feat";
    if (sps.passive.size() != static_cast<std::size_t>(sps.n_passive) * sps.feat)
        return "passive matrix storage does not match n_passive x feat";

    const int total = sps.n_active + sps.n_passive;
    std::vector<int> refs(total, 0);
    for (std::int32_t fid : sps.index) {
        if (fid < 0 || fid >= total)
            return "index value " + std::to_string(fid) + " outside [0, " + std::to_string(total) +
                   ")";
        ++refs[fid];
    }
    for (int a = 0; a < sps.n_active; ++a)
        if (refs[a] != 1)
            return "active index " + std::to_string(a) + " referenced " +
                   std::to_string(refs[a]) + " times (must be exactly 1)";
    bool any_duplicate = false;
    for (int p = 0; p < sps.n_passive; ++p) {
        const int r = refs[sps.n_active + p];
        if (r < 1)
            return "orphan passive row " + std::to_string(p) + " (never referenced)";
        if (r > 1) any_duplicate = true;
    }
    if (total > sps.cells())
        return "storage bound violated: n_active + n_passive = " + std::to_string(total) +
               " exceeds cells = " + std::to_string(sps.cells());
    if (any_duplicate && total >= sps.cells())
        return "storage bound not strict despite duplicated passive references";

    for (float v : sps.active)
        if (!std::isfinite(v)) return "non-finite active feature value";
    for (float v : sps.passive)
        if (!std::isfinite(v)) return "non-finite passive feature value";
    return std::nullopt;
}

namespace {

void write_float_csv(std::ostream& out, const float* row, int n) {
    char buf[32];
    for (int c = 0; c < n; ++c) {
        std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(row[c]));
        if (c) out << ',';
        out << buf;
    }
    out << '\n';
}

} // namespace

void dump_sps(const SpsMap& sps, std::ostream& out) {
    out << "effseg-sps v1\n";
    out << "shape " << sps.rois << ' ' << sps.height << ' ' << sps.width << ' ' << sps.feat
        << '\n';
    out << "stage " << sps.stage << '\n';
    out << "counts " << sps.n_active << ' ' << sps.n_passive << '\n';
    for (int r = 0; r < sps.rois; ++r) {
        out << "index roi " << r << '\n';
        for (int i = 0; i < sps.height; ++i) {
            for (int j = 0; j < sps.width; ++j) {
                if (j) out << ',';
                out << sps.idx(r, i, j);
            }
            out << '\n';
        }
    }
    out << "active\n";
    for (int a = 0; a < sps.n_active; ++a) write_float_csv(out, sps.active_row(a), sps.feat);
    out << "passive\n";
    for (int p = 0; p < sps.n_passive; ++p) write_float_csv(out, sps.passive_row(p), sps.feat);
    out << "end\n";
}

namespace {

std::vector<float> parse_float_csv(const std::string& line, int expected, const char* what) {
    std::vector<float> vals;
    vals.reserve(expected);
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) vals.push_back(std::stof(tok));
    if (static_cast<int>(vals.size()) != expected)
        throw std::invalid_argument(std::string("parse_sps: ") + what + " row has " +
                                    std::to_string(vals.size()) + " values, expected " +
                                    std::to_string(expected));
    return vals;
}

} // namespace

SpsMap parse_sps(std::istream& in) {
    std::string line;
    auto next_line = [&](const char* what) {
        if (!std::getline(in, line))
            throw std::invalid_argument(std::string("parse_sps: truncated file at ") + what);
        return line;
    };

    if (next_line("header") != "effseg-sps v1")
        throw std::invalid_argument("parse_sps: bad header '" + line + "'");

    SpsMap sps;
    {
        std::stringstream ss(next_line("shape"));
        std::string tag;
        ss >> tag >> sps.rois >> sps.height >> sps.width >> sps.feat;
        if (tag != "shape" || !ss) throw std::invalid_argument("parse_sps: bad shape line");
    }
    {
        std::stringstream ss(next_line("stage"));
        std::string tag;
        ss >> tag >> sps.stage;
        if (tag != "stage" || !ss) throw std::invalid_argument("parse_sps: bad stage line");
    }
    {
        std::stringstream ss(next_line("counts"));
        std::string tag;
        ss >> tag >> sps.n_active >> sps.n_passive;
        if (tag != "counts" || !ss) throw std::invalid_argument("parse_sps: bad counts line");
    }

    sps.index.assign(sps.cells(), 0);
    for (int r = 0; r < sps.rois; ++r) {
        const std::string expect = "index roi " + std::to_string(r);
        if (next_line("index header") != expect)
            throw std::invalid_argument("parse_sps: expected '" + expect + "', got '" + line + "'");
        for (int i = 0; i < sps.height; ++i) {
            std::stringstream ss(next_line("index row"));
            std::string tok;
            for (int j = 0; j < sps.width; ++j) {
                if (!std::getline(ss, tok, ','))
                    throw std::invalid_argument("parse_sps: short index row");
                sps.idx(r, i, j) = std::stoi(tok);
            }
        }
    }

    if (next_line("active header") != "active")
        throw std::invalid_argument("parse_sps: expected 'active'");
    sps.active.reserve(static_cast<std::size_t>(sps.n_active) * sps.feat);
    for (int a = 0; a < sps.n_active; ++a) {
        const std::vector<float> row = parse_float_csv(next_line("active row"), sps.feat, "active");
        sps.active.insert(sps.active.end(), row.begin(), row.end());
    }
    if (next_line("passive header") != "passive")
        throw std::invalid_argument("parse_sps: expected 'passive'");
    sps.passive.reserve(static_cast<std::size_t>(sps.n_passive) * sps.feat);
    for (int p = 0; p < sps.n_passive; ++p) {
        const std::vector<float> row =
            parse_float_csv(next_line("passive row"), sps.feat, "passive");
        sps.passive.insert(sps.passive.end(), row.begin(), row.end());
    }
    if (next_line("trailer") != "end") throw std::invalid_argument("parse_sps: missing 'end'");
    return sps;
}

} // namespace effseg
