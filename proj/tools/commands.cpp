#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>

#include "effseg/flops.hpp"
#include "effseg/oracle.hpp"
#include "effseg/rng.hpp"
#include "effseg/scene.hpp"
#include "effseg/weights.hpp"

namespace effseg::cli {

namespace fs = std::filesystem;

PipelineConfig parse_config(const std::string& path) {
    PipelineConfig config;
    if (path.empty()) return config;

    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::stringstream ss(line);
        std::string key;
        ss >> key;
        auto bad = [&](const std::string& why) {
            return std::invalid_argument("config " + path + ":" + std::to_string(line_no) + ": " +
                                         why);
        };
        if (key == "k_budget") {
            if (!(ss >> config.k_budget) || config.k_budget < 0) throw bad("k_budget must be >= 0");
        } else if (key == "processing") {
            std::string kind;
            ss >> kind;
            config.processing = processing_from_string(kind);
        } else if (key == "feat0") {
            if (!(ss >> config.feat0)) throw bad("feat0 must be an integer");
        } else if (key == "backbone_channels") {
            if (!(ss >> config.backbone_channels)) throw bad("backbone_channels must be an integer");
        } else if (key == "backbone_sample_full") {
            std::string v;
            ss >> v;
            if (v == "true") config.backbone_sample_full = true;
            else if (v == "false") config.backbone_sample_full = false;
            else throw bad("backbone_sample_full must be true or false");
        } else if (key == "mask_threshold") {
            if (!(ss >> config.mask_threshold)) throw bad("mask_threshold must be a number");
        } else if (key == "seed") {
            if (!(ss >> config.seed)) throw bad("seed must be an integer");
        } else {
            throw bad("unknown key '" + key + "'");
        }
    }
    return config;
}

PipelineWeights resolve_weights(const std::string& path, const PipelineConfig& config) {
    if (path.empty())
        return make_seeded_weights(config.seed, config.feat0, config.backbone_channels,
                                   config.backbone_sample_full, config.processing);
    return weights_from_store(WeightStore::load_file(path));
}

std::vector<long long> encode_rle(const std::vector<double>& mask, double threshold) {
    std::vector<long long> runs;
    bool value = false; // runs start counting zeros
    long long count = 0;
    for (double p : mask) {
        const bool v = p > threshold;
        if (v == value) {
            ++count;
        } else {
            runs.push_back(count);
            value = v;
            count = 1;
        }
    }
    runs.push_back(count);
    return runs;
}

namespace {

void ensure_dir(const std::string& out_dir) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw std::runtime_error("cannot create output directory " + out_dir + ": " +
                                     ec.message());
}

void write_pgm(const std::string& path, const std::vector<double>& mask, int w, int h) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write mask dump: " + path);
    out << "P2\n" << w << ' ' << h << "\n255\n";
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            const double p = std::clamp(mask[static_cast<std::size_t>(i) * w + j], 0.0, 1.0);
            out << static_cast<int>(std::lround(p * 255.0)) << (j + 1 == w ? '\n' : ' ');
        }
    }
}

std::string fmt(double v, const char* spec = "%.9g") {
    char buf[40];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

} // namespace

int cmd_generate(std::uint64_t seed, int n_instances, int image_size, const std::string& out_dir,
                 std::ostream& log) {
    const SyntheticScene scene = generate_scene(seed, n_instances, image_size, image_size);
    ensure_dir(out_dir);
    const std::string path = (fs::path(out_dir) / "scene.txt").string();
    scene.save_file(path);
    log << "generate: wrote " << path << " (" << scene.instances.size() << " instances, image "
        << scene.image_w << "x" << scene.image_h << ")\n";
    return 0;
}

int cmd_demo(const std::string& scene_path, const std::string& config_path,
             const std::string& weights_path, const std::string& out_dir, bool dump_masks,
             std::ostream& log) {
    const SyntheticScene scene = SyntheticScene::load_file(scene_path);
    const PipelineConfig config = parse_config(config_path);
    const PipelineWeights weights = resolve_weights(weights_path, config);

    const FeaturePyramid pyramid = scene.make_pyramid(config.backbone_channels);
    const std::vector<RoiDetection> rois = scene.detections(weights.feat0);

    const PipelineRun run = run_pipeline(pyramid, rois, weights, config);
    const std::vector<MaskStack> masks = assemble_masks(run.stages);

    ensure_dir(out_dir);
    const std::string path = (fs::path(out_dir) / "masks.txt").string();
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open output file for writing: " + path);
    out << "effseg-masks v1\n";
    out << "image " << scene.image_w << ' ' << scene.image_h << '\n';
    for (std::size_t r = 0; r < masks.size(); ++r) {
        const std::vector<double>& final_mask = masks[r].levels[3];
        const std::vector<double> pasted =
            paste_roi(final_mask, masks[r].base_h * 8, masks[r].base_w * 8, rois[r].box,
                      scene.image_w, scene.image_h);
        const double s_seg = score(final_mask, rois[r].s_cls, config.mask_threshold);
        const std::vector<long long> runs = encode_rle(pasted, config.mask_threshold);
        out << "mask " << r << ' ' << scene.instances[r].label << ' ' << fmt(s_seg) << ' '
            << runs.size();
        for (long long v : runs) out << ' ' << v;
        out << '\n';

        if (dump_masks) {
            for (int s = 0; s <= 3; ++s) {
                const int side_h = masks[r].base_h << s;
                const int side_w = masks[r].base_w << s;
                write_pgm((fs::path(out_dir) / ("roi" + std::to_string(r) + "_stage" +
                                                std::to_string(s) + ".pgm"))
                              .string(),
                          masks[r].levels[s], side_w, side_h);
            }
        }
    }
    out << "end\n";
    log << "demo: wrote " << path << " (" << masks.size() << " masks)\n";
    return 0;
}

// ---------------------------------------------------------------------------
// verify: randomized oracle-equivalence and invariant sweeps
// ---------------------------------------------------------------------------

namespace {

constexpr double kTol = 1e-6;

bool close(double a, double b) {
    return std::abs(a - b) <= kTol * std::max({1.0, std::abs(a), std::abs(b)});
}

// Dense grids equal under tolerance at masked cells; exact elsewhere when
// `exact_rest` is set.
std::optional<std::string> compare_at(const DenseGrid& got, const DenseGrid& want,
                                      const std::vector<std::uint8_t>* active_cells,
                                      const DenseGrid* unchanged_ref) {
    if (!got.same_shape(want)) return "shape mismatch";
    for (int r = 0; r < got.rois(); ++r) {
        for (int i = 0; i < got.height(); ++i) {
            for (int j = 0; j < got.width(); ++j) {
                const bool is_active =
                    !active_cells ||
                    (*active_cells)[(static_cast<std::size_t>(r) * got.height() + i) *
                                        got.width() +
                                    j] != 0;
                for (int c = 0; c < got.channels(); ++c) {
                    const double g = got.at(r, c, i, j);
                    if (is_active) {
                        if (!close(g, want.at(r, c, i, j)))
                            return "active cell (" + std::to_string(r) + "," + std::to_string(i) +
                                   "," + std::to_string(j) + ") ch " + std::to_string(c) +
                                   ": got " + std::to_string(g) + ", want " +
                                   std::to_string(want.at(r, c, i, j));
                    } else if (unchanged_ref && g != unchanged_ref->at(r, c, i, j)) {
                        return "passive cell (" + std::to_string(r) + "," + std::to_string(i) +
                               "," + std::to_string(j) + ") changed";
                    }
                }
            }
        }
    }
    return std::nullopt;
}

std::vector<std::uint8_t> active_mask_of(const SpsMap& sps) {
    std::vector<std::uint8_t> mask(sps.cells(), 0);
    for (int c = 0; c < sps.cells(); ++c) mask[c] = sps.index[c] < sps.n_active ? 1 : 0;
    return mask;
}

ConvKernel random_kernel(Rng& rng, int channels, int dilation) {
    ConvKernel k(channels, channels, dilation);
    for (float& w : k.weights) w = rng.uniform_f(-0.5f, 0.5f);
    for (float& b : k.bias) b = rng.uniform_f(-0.5f, 0.5f);
    return k;
}

MlpParams random_mlp(Rng& rng, int out_dim, int hidden, int in_dim) {
    MlpParams mlp = MlpParams::zeros2(out_dim, hidden, in_dim);
    for (MlpLayer& layer : mlp.layers) {
        for (float& w : layer.weight) w = rng.uniform_f(-0.5f, 0.5f);
        for (float& b : layer.bias) b = rng.uniform_f(-0.5f, 0.5f);
    }
    return mlp;
}

MlpParams random_mlp1(Rng& rng, int out_dim, int in_dim) {
    MlpParams mlp = MlpParams::zeros1(out_dim, in_dim);
    for (float& w : mlp.layers[0].weight) w = rng.uniform_f(-0.5f, 0.5f);
    for (float& b : mlp.layers[0].bias) b = rng.uniform_f(-0.5f, 0.5f);
    return mlp;
}

SpsMap trial_sps(std::uint64_t seed, Rng& rng, int max_grid = 12, int max_feat = 16) {
    const int rois = rng.uniform_int(1, 3);
    const int h = 2 * rng.uniform_int(2, max_grid / 2);
    const int w = 2 * rng.uniform_int(2, max_grid / 2);
    const int feat = 2 * rng.uniform_int(2, max_feat / 2);
    const double frac = rng.uniform(0.1, 0.6);
    return random_sps_map(seed, rois, h, w, feat, frac);
}

using PropertyFn = std::function<std::optional<std::string>(std::uint64_t trial_seed)>;

struct Property {
    std::string name;
    PropertyFn fn;
    int divisor = 1; // run trials/divisor iterations (min 1) for expensive checks
};

std::optional<std::string> expect_valid(const SpsMap& sps, const char* when) {
    if (auto err = validate(sps))
        return std::string(when) + ": " + *err;
    return std::nullopt;
}

} // namespace

int cmd_verify(std::uint64_t seed, int trials, bool inject_fault, std::ostream& log) {
    if (trials < 1) throw std::invalid_argument("verify: trials must be >= 1");

    std::vector<Property> properties;

    properties.push_back({"sps-invariants-random-ops", [&](std::uint64_t s) -> std::optional<std::string> {
        Rng rng(derive_seed(s, 1));
        SpsMap sps = trial_sps(s, rng);
        if (inject_fault) {
            sps.index[0] = sps.n_active + sps.n_passive + 7;
            return expect_valid(sps, "after fault injection");
        }
        if (auto err = expect_valid(sps, "after construction")) return err;
        for (int step = 0; step < 5; ++step) {
            switch (rng.uniform_int(0, 6)) {
                case 0: sps = sparse_pointwise(sps, random_mlp(rng, sps.feat, sps.feat, sps.feat)); break;
                case 1: sps = sparse_conv3x3(sps, random_kernel(rng, sps.feat, rng.coin() ? 1 : 3)); break;
                case 2: {
                    SfmParams p{random_kernel(rng, sps.feat, 1), random_kernel(rng, sps.feat, 3),
                                random_kernel(rng, sps.feat, 5)};
                    sps = sfm(sps, p);
                    break;
                }
                case 3:
                    if (sps.feat % 2 == 0 && sps.feat >= 4)
                        sps = halve_features(sps, random_mlp1(rng, sps.feat / 2, sps.feat));
                    break;
                case 4: {
                    std::vector<float> fresh(static_cast<std::size_t>(sps.n_active) * sps.feat);
                    for (float& v : fresh) v = rng.uniform_f(-1.0f, 1.0f);
                    sps = scatter_update(sps, std::move(fresh));
                    break;
                }
                case 5: {
                    RefinementScores scores(sps.cells());
                    for (float& v : scores) v = rng.uniform_f(0.0f, 1.0f);
                    sps = update_partition(sps, scores, rng.uniform_int(0, sps.cells()));
                    break;
                }
                case 6:
                    if (sps.height <= 16 && sps.width <= 16) {
                        std::array<MlpParams, 4> child;
                        for (int c = 0; c < 4; ++c)
                            child[c] = random_mlp(rng, sps.feat, sps.feat, sps.feat);
                        sps = upsample_split(sps, child);
                    }
                    break;
            }
            if (auto err = expect_valid(sps, "after op")) return err;
        }
        return std::nullopt;
    }});

    properties.push_back({"build-roundtrip", [](std::uint64_t s) -> std::optional<std::string> {
        Rng rng(derive_seed(s, 2));
        DenseGrid dense(rng.uniform_int(1, 3), rng.uniform_int(1, 8), rng.uniform_int(1, 10),
                        rng.uniform_int(1, 10));
        for (float& v : dense.data()) v = rng.uniform_f(-2.0f, 2.0f);
        const int cells = dense.rois() * dense.height() * dense.width();
        RefinementScores scores(cells);
        for (float& v : scores) v = rng.uniform_f(0.0f, 1.0f);
        for (int k : {0, rng.uniform_int(1, cells), cells + 5}) {
            const SpsMap sps = build_from_dense(dense, scores, k);
            if (auto err = validate(sps)) return "k=" + std::to_string(k) + ": " + *err;
            const DenseGrid back = to_dense(sps);
            if (back.data() != dense.data())
                return "round-trip mismatch at k=" + std::to_string(k);
        }
        return std::nullopt;
    }});

    properties.push_back({"pointwise-vs-dense", [](std::uint64_t s) -> std::optional<std::string> {
        Rng rng(derive_seed(s, 3));
        const SpsMap sps = trial_sps(s, rng);
        const MlpParams mlp = random_mlp(rng, sps.feat, sps.feat, sps.feat);
        const DenseGrid before = to_dense(sps);
        const auto mask = active_mask_of(sps);
        return compare_at(to_dense(sparse_pointwise(sps, mlp)),
                          oracle::dense_pointwise(before, mlp), &mask, &before);
    }});

    properties.push_back({"conv3x3-vs-dense", [](std::uint64_t s) -> std::optional<std::string> {
        Rng rng(derive_seed(s, 4));
        const SpsMap sps = trial_sps(s, rng);
        const int dil = std::array<int, 3>{1, 3, 5}[s % 3];
        const ConvKernel kernel = random_kernel(rng, sps.feat, dil);
        const DenseGrid before = to_dense(sps);
        const auto mask = active_mask_of(sps);
        return compare_at(to_dense(sparse_conv3x3(sps, kernel)), dense_conv2d(before, kernel),
                          &mask, &before);
    }});

    properties.push_back({"deform-vs-dense", [](std::uint64_t s) -> std::optional<std::string> {
        Rng rng(derive_seed(s, 5));
        const SpsMap sps = trial_sps(s, rng);
        DeformConvParams params;
        params.base = random_kernel(rng, sps.feat, 1);
        params.offset = MlpLayer(18, sps.feat);
        for (float& w : params.offset.weight) w = rng.uniform_f(-0.2f, 0.2f);
        for (float& b : params.offset.bias) b = rng.uniform_f(-1.0f, 1.0f);
        const DenseGrid before = to_dense(sps);
        const auto mask = active_mask_of(sps);
        return compare_at(to_dense(sparse_deform_conv(sps, params)),
                          oracle::dense_deform_conv(before, params), &mask, &before);
    }});

    properties.push_back({"sfm-vs-dense", [](std::uint64_t s) -> std::optional<std::string> {
        Rng rng(derive_seed(s, 6));
        const SpsMap sps = trial_sps(s, rng);
        const SfmParams params{random_kernel(rng, sps.feat, 1), random_kernel(rng, sps.feat, 3),
                               random_kernel(rng, sps.feat, 5)};
        const DenseGrid before = to_dense(sps);
        const auto mask = active_mask_of(sps);
        return compare_at(to_dense(sfm(sps, params)), oracle::dense_sfm(before, params), &mask,
                          &before);
    }});

    properties.push_back({"halve-vs-dense", [](std::uint64_t s) -> std::optional<std::string> {
        Rng rng(derive_seed(s, 7));
        const SpsMap sps = trial_sps(s, rng);
        const MlpParams mlp = random_mlp1(rng, sps.feat / 2, sps.feat);
        return compare_at(to_dense(halve_features(sps, mlp)),
                          oracle::dense_halve(to_dense(sps), mlp), nullptr, nullptr);
    }});

    properties.push_back({"fuse-backbone-vs-dense", [](std::uint64_t s) -> std::optional<std::string> {
        Rng rng(derive_seed(s, 8));
        const SpsMap sps = trial_sps(s, rng);
        const int channels = 8;
        const FeaturePyramid pyramid =
            FeaturePyramid::random(96, 96, channels, derive_seed(s, 0xBB));
        std::vector<RoiBox> boxes(sps.rois);
        for (RoiBox& b : boxes) {
            b.x1 = rng.uniform_f(0.0f, 40.0f);
            b.y1 = rng.uniform_f(0.0f, 40.0f);
            b.x2 = b.x1 + rng.uniform_f(8.0f, 50.0f);
            b.y2 = b.y1 + rng.uniform_f(8.0f, 50.0f);
        }
        const int stage = rng.uniform_int(1, 3);
        const int bdim = rng.coin() ? channels : channels / 2;
        const MlpParams mlp = random_mlp(rng, sps.feat, sps.feat, sps.feat + bdim);
        const DenseGrid before = to_dense(sps);
        const auto mask = active_mask_of(sps);
        return compare_at(to_dense(fuse_backbone(sps, pyramid, boxes, stage, mlp)),
                          oracle::dense_fuse_backbone(before, pyramid, boxes, stage, mlp), &mask,
                          &before);
    }});

    properties.push_back({"gather-vs-dense", [](std::uint64_t s) -> std::optional<std::string> {
        Rng rng(derive_seed(s, 9));
        const SpsMap sps = trial_sps(s, rng);
        const DenseGrid dense = to_dense(sps);
        for (int probe = 0; probe < 8; ++probe) {
            const CellRef cell{rng.uniform_int(0, sps.rois - 1), rng.uniform_int(0, sps.height - 1),
                               rng.uniform_int(0, sps.width - 1)};
            std::vector<std::pair<int, int>> offsets;
            for (int o = 0; o < 5; ++o)
                offsets.emplace_back(rng.uniform_int(-4, 4), rng.uniform_int(-4, 4));
            const std::vector<float> got = gather_neighborhood(sps, cell, offsets);
            for (std::size_t o = 0; o < offsets.size(); ++o) {
                const int i = cell.row + offsets[o].first;
                const int j = cell.col + offsets[o].second;
                for (int c = 0; c < sps.feat; ++c) {
                    const float want = (i >= 0 && i < sps.height && j >= 0 && j < sps.width)
                                           ? dense.at(cell.roi, c, i, j)
                                           : 0.0f;
                    if (got[o * sps.feat + c] != want) return "neighborhood gather mismatch";
                }
            }
            const double row = rng.uniform(-2.0, sps.height + 2.0);
            const double col = rng.uniform(-2.0, sps.width + 2.0);
            const std::vector<float> gb = gather_bilinear(sps, cell.roi, row, col);
            const std::vector<float> bs = bilinear_sample(dense, cell.roi, row, col);
            for (int c = 0; c < sps.feat; ++c)
                if (!close(gb[c], bs[c])) return "bilinear gather mismatch";
        }
        return std::nullopt;
    }});

    properties.push_back({"scatter-locality", [](std::uint64_t s) -> std::optional<std::string> {
        Rng rng(derive_seed(s, 10));
        const SpsMap sps = trial_sps(s, rng);
        std::vector<float> fresh(static_cast<std::size_t>(sps.n_active) * sps.feat);
        for (float& v : fresh) v = rng.uniform_f(2.0f, 3.0f); // disjoint from U(-1,1) inputs
        const DenseGrid before = to_dense(sps);
        const SpsMap updated = scatter_update(sps, fresh);
        if (updated.index != sps.index || updated.passive != sps.passive)
            return "scatter touched index map or passive matrix";
        const DenseGrid after = to_dense(updated);
        const auto mask = active_mask_of(sps);
        for (int cell = 0; cell < sps.cells(); ++cell) {
            const int r = cell / (sps.height * sps.width);
            const int i = (cell / sps.width) % sps.height;
            const int j = cell % sps.width;
            for (int c = 0; c < sps.feat; ++c) {
                const bool changed = after.at(r, c, i, j) != before.at(r, c, i, j);
                if (!mask[cell] && changed) return "passive cell changed by scatter";
            }
        }
        return std::nullopt;
    }});

    properties.push_back({"upsample-identity-children", [](std::uint64_t s) -> std::optional<std::string> {
        Rng rng(derive_seed(s, 11));
        const SpsMap sps = trial_sps(s, rng);
        std::array<MlpParams, 4> child;
        for (int c = 0; c < 4; ++c) child[c] = MlpParams::identity2(sps.feat);
        const SpsMap up = upsample_split(sps, child);
        if (auto err = expect_valid(up, "after upsample")) return err;
        const DenseGrid got = to_dense(up);
        const DenseGrid want = oracle::nn_upsample2(to_dense(sps));
        if (got.data() != want.data()) return "identity-children upsample != nearest neighbor";
        return std::nullopt;
    }});

    properties.push_back({"update-partition-idempotent", [](std::uint64_t s) -> std::optional<std::string> {
        Rng rng(derive_seed(s, 12));
        DenseGrid dense(rng.uniform_int(1, 2), 4, 6, 6);
        for (float& v : dense.data()) v = rng.uniform_f(-1.0f, 1.0f);
        RefinementScores scores(dense.rois() * 36);
        for (float& v : scores) v = rng.uniform_f(0.0f, 1.0f);
        const int k = rng.uniform_int(0, static_cast<int>(scores.size()));
        const SpsMap sps = build_from_dense(dense, scores, k);
        const SpsMap again = update_partition(sps, scores, k);
        if (again.n_active != sps.n_active) return "active count changed";
        if (to_dense(again).data() != to_dense(sps).data()) return "to_dense changed";
        return std::nullopt;
    }});

    properties.push_back({"stage-vs-sparse-on-dense", [](std::uint64_t s) -> std::optional<std::string> {
        Rng rng(derive_seed(s, 13));
        const int feat0 = 16;
        const Processing kind =
            std::array<Processing, 4>{Processing::Mlp, Processing::Conv, Processing::Deform,
                                      Processing::Sfm}[s % 4];
        const PipelineWeights weights =
            make_seeded_weights(derive_seed(s, 14), feat0, feat0, true, kind);
        const FeaturePyramid pyramid = FeaturePyramid::random(64, 64, feat0, derive_seed(s, 15));

        const int n_rois = rng.uniform_int(1, 2);
        std::vector<RoiDetection> rois(n_rois);
        for (RoiDetection& det : rois) {
            det.box.x1 = rng.uniform_f(0.0f, 20.0f);
            det.box.y1 = rng.uniform_f(0.0f, 20.0f);
            det.box.x2 = det.box.x1 + rng.uniform_f(10.0f, 40.0f);
            det.box.y2 = det.box.y1 + rng.uniform_f(10.0f, 40.0f);
            det.s_cls = rng.uniform_f(0.5f, 1.0f);
            det.query.assign(feat0, 0.0f);
        }

        StageOutputs prev;
        prev.stage = 0;
        prev.n_rois = n_rois;
        prev.grid_h = prev.grid_w = 6;
        prev.features = DenseGrid(n_rois, feat0, 6, 6);
        Rng frng(derive_seed(s, 16));
        for (float& v : prev.features.data()) v = frng.uniform_f(-1.0f, 1.0f);
        prev.seg_logits.assign(static_cast<std::size_t>(n_rois) * 36, 0.0f);
        prev.refine_logits = prev.seg_logits;
        prev.refine_scores.assign(static_cast<std::size_t>(n_rois) * 36, 0.0f);
        for (float& v : prev.refine_scores) v = frng.uniform_f(0.0f, 1.0f);

        const int k = rng.uniform_int(1, n_rois * 36);
        const StageOutputs sparse =
            refine_stage(prev, 1, pyramid, rois, weights, k, prev.refine_scores);

        // The oracle consumes the same parent selection the SPS path made.
        const SpsMap part = build_from_dense(prev.features, prev.refine_scores, k);
        const std::vector<std::uint8_t> selected = active_mask_of(part);
        std::vector<RoiBox> boxes(rois.size());
        for (std::size_t r = 0; r < rois.size(); ++r) boxes[r] = rois[r].box;
        const oracle::SparseOnDenseStage dense_stage = oracle::sparse_on_dense_oracle(
            prev.features, selected, 1, pyramid, boxes, weights);

        if (auto err = compare_at(to_dense(sparse.sps), dense_stage.features, nullptr, nullptr))
            return "features: " + *err;

        const std::vector<CellRef> cells = active_positions(sparse.sps);
        for (int a = 0; a < sparse.sps.n_active; ++a) {
            const std::size_t flat =
                (static_cast<std::size_t>(cells[a].roi) * sparse.grid_h + cells[a].row) *
                    sparse.grid_w +
                cells[a].col;
            if (!dense_stage.active[flat]) return "active sets disagree";
            if (!close(sparse.seg_logits[a], dense_stage.seg_logits[flat]) ||
                !close(sparse.refine_logits[a], dense_stage.refine_logits[flat]))
                return "logits disagree at an active cell";
        }
        return std::nullopt;
    }});

    properties.push_back({"pipeline-all-active-equivalence", [](std::uint64_t s) -> std::optional<std::string> {
        const int feat0 = 16;
        const SyntheticScene scene = generate_scene(derive_seed(s, 17), 1, 64, 64);
        const FeaturePyramid pyramid = scene.make_pyramid(feat0);
        const std::vector<RoiDetection> rois = scene.detections(feat0);
        const PipelineWeights weights =
            make_seeded_weights(derive_seed(s, 18), feat0, feat0, true, Processing::Sfm);
        PipelineConfig config;
        config.feat0 = feat0;
        config.backbone_channels = feat0;
        config.k_budget = std::numeric_limits<int>::max();

        const PipelineRun sparse = run_pipeline(pyramid, rois, weights, config);
        const oracle::DenseRun dense = oracle::run_dense_pipeline(pyramid, rois, weights);
        const std::vector<MaskStack> sm = assemble_masks(sparse.stages);
        const std::vector<MaskStack> dm = oracle::assemble_dense_masks(dense.stages);
        for (std::size_t r = 0; r < sm.size(); ++r)
            for (int lvl = 0; lvl <= 3; ++lvl)
                for (std::size_t c = 0; c < sm[r].levels[lvl].size(); ++c)
                    if (!close(sm[r].levels[lvl][c], dm[r].levels[lvl][c]))
                        return "mask level " + std::to_string(lvl) + " differs at cell " +
                               std::to_string(c);
        return std::nullopt;
    }, 10});

    // Run the battery.
    log << "verify: seed=" << seed << " trials=" << trials << (inject_fault ? " (fault injection on)" : "")
        << "\n";
    bool all_pass = true;
    for (const Property& prop : properties) {
        const int n = std::max(1, trials / prop.divisor);
        int passes = 0;
        std::optional<std::string> first_failure;
        std::uint64_t first_seed = 0;
        for (int t = 0; t < n; ++t) {
            const std::uint64_t trial_seed = seed + static_cast<std::uint64_t>(t);
            std::optional<std::string> failure;
            try {
                failure = prop.fn(trial_seed);
            } catch (const std::exception& e) {
                failure = std::string("exception: ") + e.what();
            }
            if (!failure) {
                ++passes;
            } else if (!first_failure) {
                first_failure = failure;
                first_seed = trial_seed;
            }
        }
        log << "property " << prop.name << ": " << passes << "/" << n;
        if (first_failure)
            log << "  FAIL (first failing seed " << first_seed << ": " << *first_failure << ")";
        log << "\n";
        if (passes != n) all_pass = false;
    }
    log << (all_pass ? "verify: PASS\n" : "verify: FAIL\n");
    return all_pass ? 0 : 1;
}

// ---------------------------------------------------------------------------
// bench: sparse vs dense FLOP accounting across forced active fractions
// ---------------------------------------------------------------------------

int cmd_bench(const std::string& scene_path, const std::string& config_path,
              const std::string& weights_path, const std::vector<double>& fractions,
              const std::string& out_dir, std::ostream& log) {
    if (fractions.empty()) throw std::invalid_argument("bench: no active fractions given");
    for (double f : fractions)
        if (!(f > 0.0) || f > 1.0)
            throw std::invalid_argument("bench: fraction " + std::to_string(f) +
                                        " outside (0, 1]");

    const SyntheticScene scene = SyntheticScene::load_file(scene_path);
    const PipelineConfig config = parse_config(config_path);
    const PipelineWeights weights = resolve_weights(weights_path, config);
    const FeaturePyramid pyramid = scene.make_pyramid(config.backbone_channels);
    const std::vector<RoiDetection> rois = scene.detections(weights.feat0);
    const int n_rois = static_cast<int>(rois.size());

    // Budgets concentrate where masks have boundaries, on each parent grid.
    std::array<RefinementScores, 3> forced;
    const int parent_side[3] = {kStage0Grid, 2 * kStage0Grid, 4 * kStage0Grid};
    for (int s = 0; s < 3; ++s)
        forced[s] = boundary_scores_all(scene, parent_side[s], parent_side[s]);

    ensure_dir(out_dir);
    const std::string path = (fs::path(out_dir) / "flops.txt").string();
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open output file for writing: " + path);

    log << "bench: " << n_rois << " RoIs, processing=" << to_string(weights.processing_kind())
        << "\n";
    log << "timing (non-normative, excluded from " << path << "):\n";
    log << "  fraction   sparse_ms    dense_ms\n";

    using clock = std::chrono::steady_clock;
    for (double f : fractions) {
        RunOverrides overrides;
        overrides.forced_scores = &forced;
        for (int s = 0; s < 3; ++s) {
            const long long parent_cells =
                static_cast<long long>(n_rois) * parent_side[s] * parent_side[s];
            overrides.k_stage[s] = static_cast<int>(std::ceil(f * parent_cells));
        }

        FlopTrace trace;
        const auto t0 = clock::now();
        const PipelineRun sparse = run_pipeline(pyramid, rois, weights, config, &overrides, &trace);
        const auto t1 = clock::now();
        const oracle::DenseRun dense = oracle::run_dense_pipeline(pyramid, rois, weights, &trace);
        const auto t2 = clock::now();
        (void)sparse;
        (void)dense;

        const FlopReport report = count_flops(trace);
        out << "fraction " << fmt(f, "%.6g") << '\n';
        report.write(out);
        out << '\n';

        const double sparse_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        const double dense_ms = std::chrono::duration<double, std::milli>(t2 - t1).count();
        char line[128];
        std::snprintf(line, sizeof(line), "  %8.4f %10.2f %11.2f\n", f, sparse_ms, dense_ms);
        log << line;
    }
    out << "end\n";
    log << "bench: wrote " << path << "\n";
    return 0;
}

} // namespace effseg::cli
