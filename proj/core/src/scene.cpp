#include "effseg/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "effseg/rng.hpp"
#include "effseg/sparse_ops.hpp"

namespace effseg {

bool EllipseShape::contains(double x, double y) const {
    const double dx = (x - cx) / ax;
    const double dy = (y - cy) / ay;
    return dx * dx + dy * dy <= 1.0;
}

bool PolygonShape::contains(double x, double y) const {
    bool inside = false;
    const std::size_t n = xs.size();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
        if ((ys[i] > y) != (ys[j] > y)) {
            const double t = (y - ys[j]) / (ys[i] - ys[j]);
            if (x < xs[j] + t * (xs[i] - xs[j])) inside = !inside;
        }
    }
    return inside;
}

const InstanceMask& SceneInstance::mask() const {
    return std::visit([](const auto& s) -> const InstanceMask& { return s; }, shape);
}

FeaturePyramid SyntheticScene::make_pyramid(int channels) const {
    return FeaturePyramid::random(image_w, image_h, channels > 0 ? channels : pyramid_channels,
                                  pyramid_seed);
}

std::vector<RoiDetection> SyntheticScene::detections(int query_dim) const {
    std::vector<RoiDetection> out;
    out.reserve(instances.size());
    for (const SceneInstance& inst : instances) {
        RoiDetection det;
        det.box = inst.box;
        det.s_cls = inst.s_cls;
        det.query.resize(query_dim);
        Rng rng(inst.query_seed);
        for (float& v : det.query) v = rng.uniform_f(-1.0f, 1.0f);
        out.push_back(std::move(det));
    }
    return out;
}

std::vector<RoiBox> SyntheticScene::boxes() const {
    std::vector<RoiBox> out;
    out.reserve(instances.size());
    for (const SceneInstance& inst : instances) out.push_back(inst.box);
    return out;
}

std::vector<GroundTruth> SyntheticScene::ground_truths() const {
    std::vector<GroundTruth> out;
    out.reserve(instances.size());
    for (const SceneInstance& inst : instances) out.push_back({&inst.mask(), inst.label});
    return out;
}

std::vector<std::uint8_t> rasterize(const InstanceMask& region, int image_w, int image_h) {
    std::vector<std::uint8_t> out(static_cast<std::size_t>(image_w) * image_h, 0);
    for (int y = 0; y < image_h; ++y)
        for (int x = 0; x < image_w; ++x)
            out[static_cast<std::size_t>(y) * image_w + x] =
                region.contains(x + 0.5, y + 0.5) ? 1 : 0;
    return out;
}

namespace {

// Tight box of the rasterized mask; empty optional when no pixel center is inside.
bool raster_tight_box(const InstanceMask& region, int image_w, int image_h, RoiBox& out) {
    int min_x = image_w, max_x = -1, min_y = image_h, max_y = -1;
    for (int y = 0; y < image_h; ++y) {
        for (int x = 0; x < image_w; ++x) {
            if (!region.contains(x + 0.5, y + 0.5)) continue;
            min_x = std::min(min_x, x);
            max_x = std::max(max_x, x);
            min_y = std::min(min_y, y);
            max_y = std::max(max_y, y);
        }
    }
    if (max_x < 0) return false;
    out = RoiBox{static_cast<float>(min_x), static_cast<float>(min_y),
                 static_cast<float>(max_x + 1), static_cast<float>(max_y + 1)};
    return true;
}

} // namespace

SyntheticScene generate_scene(std::uint64_t seed, int n_instances, int image_w, int image_h) {
    if (n_instances < 1) throw std::invalid_argument("generate_scene: n_instances must be >= 1");
    if (image_w < 32 || image_h < 32)
        throw std::invalid_argument("generate_scene: image must be at least 32x32");

    SyntheticScene scene;
    scene.seed = seed;
    scene.image_w = image_w;
    scene.image_h = image_h;
    scene.pyramid_seed = derive_seed(seed, 0x9F7A);

    Rng rng(derive_seed(seed, 0x5CE4E));
    const double dim = std::min(image_w, image_h);
    for (int n = 0; n < n_instances; ++n) {
        SceneInstance inst;
        for (int attempt = 0; attempt < 64; ++attempt) {
            if (rng.coin()) {
                EllipseShape e;
                e.ax = rng.uniform(dim / 16.0, dim / 3.2);
                e.ay = rng.uniform(dim / 16.0, dim / 3.2);
                e.cx = rng.uniform(e.ax + 1.0, image_w - e.ax - 1.0);
                e.cy = rng.uniform(e.ay + 1.0, image_h - e.ay - 1.0);
                inst.shape = e;
            } else {
                PolygonShape p;
                const double radius = rng.uniform(dim / 12.0, dim / 3.2);
                const double cx = rng.uniform(radius + 1.0, image_w - radius - 1.0);
                const double cy = rng.uniform(radius + 1.0, image_h - radius - 1.0);
                const int verts = rng.uniform_int(5, 9);
                for (int v = 0; v < verts; ++v) {
                    const double angle =
                        2.0 * std::numbers::pi * (v + rng.uniform(-0.3, 0.3)) / verts;
                    const double r = rng.uniform(0.55 * radius, radius);
                    p.xs.push_back(cx + r * std::cos(angle));
                    p.ys.push_back(cy + r * std::sin(angle));
                }
                inst.shape = p;
            }
            if (raster_tight_box(inst.mask(), image_w, image_h, inst.box) &&
                inst.box.width() >= 4.0f && inst.box.height() >= 4.0f)
                break;
            if (attempt == 63)
                throw std::runtime_error("generate_scene: could not place instance " +
                                         std::to_string(n));
        }
        inst.s_cls = rng.uniform_f(0.5f, 1.0f);
        inst.label = rng.uniform_int(1, 80);
        inst.query_seed = rng.raw();
        scene.instances.push_back(std::move(inst));
    }
    return scene;
}

namespace {

void put_double(std::ostream& out, double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out << buf;
}

void put_float(std::ostream& out, float v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
    out << buf;
}

} // namespace

void SyntheticScene::save(std::ostream& out) const {
    out << "effseg-scene v1\n";
    out << "seed " << seed << '\n';
    out << "image " << image_w << ' ' << image_h << '\n';
    out << "pyramid_channels " << pyramid_channels << '\n';
    out << "pyramid_seed " << pyramid_seed << '\n';
    out << "instances " << instances.size() << '\n';
    for (std::size_t n = 0; n < instances.size(); ++n) {
        const SceneInstance& inst = instances[n];
        out << "instance " << n << '\n';
        if (const auto* e = std::get_if<EllipseShape>(&inst.shape)) {
            out << "shape ellipse ";
            put_double(out, e->cx);
            out << ' ';
            put_double(out, e->cy);
            out << ' ';
            put_double(out, e->ax);
            out << ' ';
            put_double(out, e->ay);
            out << '\n';
        } else {
            const auto& p = std::get<PolygonShape>(inst.shape);
            out << "shape polygon " << p.xs.size();
            for (std::size_t v = 0; v < p.xs.size(); ++v) {
                out << ' ';
                put_double(out, p.xs[v]);
                out << ' ';
                put_double(out, p.ys[v]);
            }
            out << '\n';
        }
        out << "box ";
        put_float(out, inst.box.x1);
        out << ' ';
        put_float(out, inst.box.y1);
        out << ' ';
        put_float(out, inst.box.x2);
        out << ' ';
        put_float(out, inst.box.y2);
        out << '\n';
        out << "s_cls ";
        put_float(out, inst.s_cls);
        out << '\n';
        out << "label " << inst.label << '\n';
        out << "query_seed " << inst.query_seed << '\n';
    }
    out << "end\n";
}

void SyntheticScene::save_file(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open scene file for writing: " + path);
    save(out);
}

SyntheticScene SyntheticScene::load(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != "effseg-scene v1")
        throw std::invalid_argument("scene file: bad header '" + line + "'");

    SyntheticScene scene;
    std::size_t n_instances = 0;
    auto read_kv = [&](const char* key, auto& value) {
        if (!std::getline(in, line))
            throw std::invalid_argument(std::string("scene file: truncated before '") + key + "'");
        std::stringstream ss(line);
        std::string tag;
        ss >> tag >> value;
        if (tag != key || ss.fail())
            throw std::invalid_argument(std::string("scene file: expected '") + key + "', got '" +
                                        line + "'");
    };

    read_kv("seed", scene.seed);
    {
        if (!std::getline(in, line)) throw std::invalid_argument("scene file: truncated");
        std::stringstream ss(line);
        std::string tag;
        ss >> tag >> scene.image_w >> scene.image_h;
        if (tag != "image" || ss.fail())
            throw std::invalid_argument("scene file: bad image line '" + line + "'");
    }
    read_kv("pyramid_channels", scene.pyramid_channels);
    read_kv("pyramid_seed", scene.pyramid_seed);
    read_kv("instances", n_instances);

    for (std::size_t n = 0; n < n_instances; ++n) {
        std::size_t idx = 0;
        read_kv("instance", idx);
        SceneInstance inst;
        if (!std::getline(in, line)) throw std::invalid_argument("scene file: truncated shape");
        {
            std::stringstream ss(line);
            std::string tag, kind;
            ss >> tag >> kind;
            if (tag != "shape")
                throw std::invalid_argument("scene file: expected shape line, got '" + line + "'");
            if (kind == "ellipse") {
                EllipseShape e;
                ss >> e.cx >> e.cy >> e.ax >> e.ay;
                if (ss.fail()) throw std::invalid_argument("scene file: bad ellipse params");
                inst.shape = e;
            } else if (kind == "polygon") {
                PolygonShape p;
                std::size_t verts = 0;
                ss >> verts;
                p.xs.resize(verts);
                p.ys.resize(verts);
                for (std::size_t v = 0; v < verts; ++v) ss >> p.xs[v] >> p.ys[v];
                if (ss.fail()) throw std::invalid_argument("scene file: bad polygon params");
                inst.shape = p;
            } else {
                throw std::invalid_argument("scene file: unknown shape kind '" + kind + "'");
            }
        }
        {
            if (!std::getline(in, line)) throw std::invalid_argument("scene file: truncated box");
            std::stringstream ss(line);
            std::string tag;
            ss >> tag >> inst.box.x1 >> inst.box.y1 >> inst.box.x2 >> inst.box.y2;
            if (tag != "box" || ss.fail())
                throw std::invalid_argument("scene file: bad box line '" + line + "'");
        }
        read_kv("s_cls", inst.s_cls);
        read_kv("label", inst.label);
        read_kv("query_seed", inst.query_seed);
        scene.instances.push_back(std::move(inst));
    }
    if (!std::getline(in, line) || line != "end")
        throw std::invalid_argument("scene file: missing 'end' trailer");
    return scene;
}

SyntheticScene SyntheticScene::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open scene file: " + path);
    return load(in);
}

RefinementScores boundary_scores(const InstanceMask& region, const RoiBox& box, int grid_h,
                                 int grid_w) {
    constexpr int kProbe = 7;
    RefinementScores scores(static_cast<std::size_t>(grid_h) * grid_w, 0.0f);
    for (int i = 0; i < grid_h; ++i) {
        for (int j = 0; j < grid_w; ++j) {
            int inside = 0;
            for (int p = 0; p < kProbe; ++p) {
                const double y = box.y1 + (i + (p + 0.5) / kProbe) / grid_h * box.height();
                for (int q = 0; q < kProbe; ++q) {
                    const double x = box.x1 + (j + (q + 0.5) / kProbe) / grid_w * box.width();
                    if (region.contains(x, y)) ++inside;
                }
            }
            const double frac = inside / static_cast<double>(kProbe * kProbe);
            scores[static_cast<std::size_t>(i) * grid_w + j] =
                static_cast<float>(1.0 - std::abs(2.0 * frac - 1.0));
        }
    }
    return scores;
}

RefinementScores boundary_scores_all(const SyntheticScene& scene, int grid_h, int grid_w) {
    RefinementScores all;
    all.reserve(scene.instances.size() * grid_h * grid_w);
    for (const SceneInstance& inst : scene.instances) {
        const RefinementScores one = boundary_scores(inst.mask(), inst.box, grid_h, grid_w);
        all.insert(all.end(), one.begin(), one.end());
    }
    return all;
}

SpsMap random_sps_map(std::uint64_t seed, int rois, int grid_h, int grid_w, int feat,
                      double active_fraction) {
    if (grid_h % 2 != 0 || grid_w % 2 != 0)
        throw std::invalid_argument("random_sps_map: grid dims must be even");
    Rng rng(derive_seed(seed, 0x5125));

    DenseGrid dense(rois, feat, grid_h / 2, grid_w / 2);
    for (float& v : dense.data()) v = rng.uniform_f(-1.0f, 1.0f);
    const int half_cells = rois * (grid_h / 2) * (grid_w / 2);
    RefinementScores scores(half_cells);
    for (float& s : scores) s = rng.uniform_f(0.0f, 1.0f);

    const int k_half = std::max(1, static_cast<int>(active_fraction * half_cells));
    SpsMap sps = build_from_dense(dense, scores, k_half);

    std::array<MlpParams, 4> child;
    for (int c = 0; c < 4; ++c) {
        child[c] = MlpParams::zeros2(feat, feat, feat);
        for (MlpLayer& layer : child[c].layers) {
            for (float& w : layer.weight) w = rng.uniform_f(-0.5f, 0.5f);
            for (float& b : layer.bias) b = rng.uniform_f(-0.5f, 0.5f);
        }
    }
    sps = upsample_split(sps, child);

    RefinementScores scores2(sps.cells());
    for (float& s : scores2) s = rng.uniform_f(0.0f, 1.0f);
    const int k = std::max(1, static_cast<int>(active_fraction * sps.cells()));
    return update_partition(sps, scores2, k);
}

} // namespace effseg
