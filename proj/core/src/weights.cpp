#include "effseg/weights.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

#include "effseg/rng.hpp"

namespace effseg {

const char* to_string(Processing kind) {
    switch (kind) {
        case Processing::Mlp: return "mlp";
        case Processing::Conv: return "conv";
        case Processing::Deform: return "deform";
        case Processing::Sfm: return "sfm";
    }
    return "?";
}

Processing processing_from_string(const std::string& name) {
    if (name == "mlp") return Processing::Mlp;
    if (name == "conv") return Processing::Conv;
    if (name == "deform") return Processing::Deform;
    if (name == "sfm") return Processing::Sfm;
    throw std::invalid_argument("unknown processing module '" + name +
                                "' (expected mlp|conv|deform|sfm)");
}

void WeightStore::put(const std::string& name, std::vector<int> shape,
                      std::vector<float> values) {
    std::size_t count = 1;
    for (int d : shape) count *= static_cast<std::size_t>(d);
    if (count != values.size())
        throw std::invalid_argument("WeightStore: tensor '" + name + "' shape implies " +
                                    std::to_string(count) + " values, got " +
                                    std::to_string(values.size()));
    for (auto& [n, t] : entries_) {
        if (n == name) {
            t = NamedTensor{std::move(shape), std::move(values)};
            return;
        }
    }
    entries_.emplace_back(name, NamedTensor{std::move(shape), std::move(values)});
}

const NamedTensor& WeightStore::get(const std::string& name) const {
    for (const auto& [n, t] : entries_)
        if (n == name) return t;
    throw std::invalid_argument("WeightStore: missing tensor '" + name + "'");
}

const NamedTensor& WeightStore::get(const std::string& name,
                                    const std::vector<int>& expect_shape) const {
    const NamedTensor& t = get(name);
    if (t.shape != expect_shape) {
        auto fmt = [](const std::vector<int>& s) {
            std::string out = "[";
            for (std::size_t i = 0; i < s.size(); ++i)
                out += (i ? "," : "") + std::to_string(s[i]);
            return out + "]";
        };
        throw std::invalid_argument("WeightStore: tensor '" + name + "' has shape " +
                                    fmt(t.shape) + ", expected " + fmt(expect_shape));
    }
    return t;
}

bool WeightStore::has(const std::string& name) const {
    for (const auto& [n, t] : entries_)
        if (n == name) return true;
    return false;
}

void WeightStore::save(std::ostream& out) const {
    out << "effseg-weights v1\n";
    char buf[32];
    for (const auto& [name, tensor] : entries_) {
        out << "tensor " << name << ' ' << tensor.shape.size();
        for (int d : tensor.shape) out << ' ' << d;
        out << '\n';
        for (std::size_t i = 0; i < tensor.values.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(tensor.values[i]));
            out << buf << ((i + 1) % 8 == 0 || i + 1 == tensor.values.size() ? '\n' : ' ');
        }
    }
    out << "end\n";
}

void WeightStore::save_file(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open weight file for writing: " + path);
    save(out);
}

WeightStore WeightStore::load(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != "effseg-weights v1")
        throw std::invalid_argument("weight file: bad header '" + line + "'");

    WeightStore store;
    std::string tok;
    while (in >> tok) {
        if (tok == "end") return store;
        if (tok != "tensor")
            throw std::invalid_argument("weight file: expected 'tensor' or 'end', got '" + tok +
                                        "'");
        std::string name;
        std::size_t ndim = 0;
        if (!(in >> name >> ndim))
            throw std::invalid_argument("weight file: truncated tensor header");
        std::vector<int> shape(ndim);
        std::size_t count = 1;
        for (std::size_t d = 0; d < ndim; ++d) {
            if (!(in >> shape[d]) || shape[d] < 1)
                throw std::invalid_argument("weight file: bad shape for tensor '" + name + "'");
            count *= static_cast<std::size_t>(shape[d]);
        }
        std::vector<float> values(count);
        for (std::size_t i = 0; i < count; ++i)
            if (!(in >> values[i]))
                throw std::invalid_argument("weight file: truncated values for tensor '" + name +
                                            "'");
        store.put(name, std::move(shape), std::move(values));
    }
    throw std::invalid_argument("weight file: missing 'end' trailer");
}

WeightStore WeightStore::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open weight file: " + path);
    return load(in);
}

Processing PipelineWeights::processing_kind() const {
    const ProcessingParams& p = stages[0].processing;
    if (std::holds_alternative<MlpParams>(p)) return Processing::Mlp;
    if (std::holds_alternative<ConvKernel>(p)) return Processing::Conv;
    if (std::holds_alternative<DeformConvParams>(p)) return Processing::Deform;
    return Processing::Sfm;
}

namespace {

void require_dims(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument("pipeline weights: " + msg);
}

void check_mlp(const MlpParams& mlp, const std::string& name, int in_dim, int out_dim,
               std::size_t n_layers) {
    mlp.check_valid(name);
    require_dims(mlp.layers.size() == n_layers,
                 name + " must have " + std::to_string(n_layers) + " layers");
    require_dims(mlp.input_dim() == in_dim, name + " input dim " +
                                                std::to_string(mlp.input_dim()) + " != " +
                                                std::to_string(in_dim));
    require_dims(mlp.output_dim() == out_dim, name + " output dim " +
                                                  std::to_string(mlp.output_dim()) + " != " +
                                                  std::to_string(out_dim));
}

} // namespace

void PipelineWeights::validate(int pyramid_channels) const {
    require_dims(feat0 >= 8 && feat0 % 8 == 0,
                 "feat0 = " + std::to_string(feat0) + " must be a positive multiple of 8 so it "
                 "can halve across three stages");
    require_dims(pyramid_channels == feat0,
                 "pyramid channel count " + std::to_string(pyramid_channels) +
                     " must equal feat0 = " + std::to_string(feat0));

    check_mlp(query_fuse, "query_fuse", 2 * feat0, feat0, 2);
    for (int k = 0; k < 4; ++k) {
        const std::string name = "fcn." + std::to_string(k + 1);
        fcn[k].check_valid(name);
        require_dims(fcn[k].in_channels == feat0 && fcn[k].out_channels == feat0,
                     name + " must map feat0 -> feat0");
        require_dims(fcn[k].dilation == 1, name + " must have dilation 1");
    }
    check_mlp(stage0_heads.seg, "stage0.seg", feat0, 1, 2);
    check_mlp(stage0_heads.refine, "stage0.refine", feat0, 1, 2);

    for (int s = 1; s <= 3; ++s) {
        const StageWeights& st = stages[s - 1];
        const int f_prev = feat_at(s - 1);
        const int f_new = feat_at(s);
        const std::string pre = "stage" + std::to_string(s) + ".";
        for (int c = 0; c < 4; ++c)
            check_mlp(st.child[c], pre + "child" + std::to_string(c), f_prev, f_prev, 2);
        st.fuse.check_valid(pre + "fuse");
        require_dims(st.fuse.layers.size() == 2, pre + "fuse must have 2 layers");
        require_dims(st.fuse.output_dim() == f_prev, pre + "fuse output dim " +
                                                         std::to_string(st.fuse.output_dim()) +
                                                         " != " + std::to_string(f_prev));
        const int bdim = st.fuse.input_dim() - f_prev;
        require_dims(bdim >= 1 && bdim <= pyramid_channels,
                     pre + "fuse implies backbone sample size " + std::to_string(bdim) +
                         ", outside [1, " + std::to_string(pyramid_channels) + "]");
        check_mlp(st.halve, pre + "halve", f_prev, f_new, 1);

        std::visit(
            [&](const auto& proc) {
                using T = std::decay_t<decltype(proc)>;
                if constexpr (std::is_same_v<T, MlpParams>) {
                    check_mlp(proc, pre + "proc", f_new, f_new, 2);
                } else if constexpr (std::is_same_v<T, ConvKernel>) {
                    proc.check_valid(pre + "proc.conv");
                    require_dims(proc.in_channels == f_new && proc.out_channels == f_new,
                                 pre + "proc.conv must map " + std::to_string(f_new) + " -> " +
                                     std::to_string(f_new));
                } else if constexpr (std::is_same_v<T, DeformConvParams>) {
                    proc.check_valid(pre + "proc");
                    require_dims(proc.base.in_channels == f_new && proc.base.out_channels == f_new,
                                 pre + "proc.conv must map " + std::to_string(f_new) + " -> " +
                                     std::to_string(f_new));
                } else {
                    proc.check_valid(pre + "proc");
                    require_dims(proc.conv_d1.in_channels == f_new &&
                                     proc.conv_d1.out_channels == f_new,
                                 pre + "proc kernels must map " + std::to_string(f_new) + " -> " +
                                     std::to_string(f_new));
                }
            },
            st.processing);

        check_mlp(st.heads.seg, pre + "seg", f_new, 1, 2);
        check_mlp(st.heads.refine, pre + "refine", f_new, 1, 2);
    }

    for (int s = 1; s < 3; ++s)
        require_dims(processing_kind() == [&] {
                         const ProcessingParams& p = stages[s].processing;
                         if (std::holds_alternative<MlpParams>(p)) return Processing::Mlp;
                         if (std::holds_alternative<ConvKernel>(p)) return Processing::Conv;
                         if (std::holds_alternative<DeformConvParams>(p))
                             return Processing::Deform;
                         return Processing::Sfm;
                     }(),
                     "all stages must use the same processing module kind");
}

namespace {

using FillFn = std::function<void(std::vector<float>&)>;

MlpParams make_mlp1(int out_dim, int in_dim, const FillFn& fill) {
    MlpParams mlp = MlpParams::zeros1(out_dim, in_dim);
    fill(mlp.layers[0].weight);
    fill(mlp.layers[0].bias);
    return mlp;
}

MlpParams make_mlp2(int out_dim, int hidden, int in_dim, const FillFn& fill) {
    MlpParams mlp = MlpParams::zeros2(out_dim, hidden, in_dim);
    for (MlpLayer& layer : mlp.layers) {
        fill(layer.weight);
        fill(layer.bias);
    }
    return mlp;
}

ConvKernel make_conv(int out_ch, int in_ch, int dilation, const FillFn& fill) {
    ConvKernel k(out_ch, in_ch, dilation);
    fill(k.weights);
    fill(k.bias);
    return k;
}

PipelineWeights build_weights(int feat0, int backbone_channels, bool backbone_sample_full,
                              Processing kind, const FillFn& fill) {
    PipelineWeights w;
    w.feat0 = feat0;
    w.query_fuse = make_mlp2(feat0, feat0, 2 * feat0, fill);
    for (int k = 0; k < 4; ++k) w.fcn[k] = make_conv(feat0, feat0, 1, fill);
    w.stage0_heads.seg = make_mlp2(1, feat0, feat0, fill);
    w.stage0_heads.refine = make_mlp2(1, feat0, feat0, fill);

    for (int s = 1; s <= 3; ++s) {
        StageWeights& st = w.stages[s - 1];
        const int f_prev = feat0 >> (s - 1);
        const int f_new = feat0 >> s;
        const int bdim = backbone_sample_full ? backbone_channels : f_prev;
        for (int c = 0; c < 4; ++c) st.child[c] = make_mlp2(f_prev, f_prev, f_prev, fill);
        st.fuse = make_mlp2(f_prev, f_prev, f_prev + bdim, fill);
        st.halve = make_mlp1(f_new, f_prev, fill);
        switch (kind) {
            case Processing::Mlp:
                st.processing = make_mlp2(f_new, f_new, f_new, fill);
                break;
            case Processing::Conv:
                st.processing = make_conv(f_new, f_new, 1, fill);
                break;
            case Processing::Deform: {
                DeformConvParams d;
                d.base = make_conv(f_new, f_new, 1, fill);
                d.offset = MlpLayer(18, f_new);
                fill(d.offset.weight);
                fill(d.offset.bias);
                st.processing = std::move(d);
                break;
            }
            case Processing::Sfm: {
                SfmParams sfm;
                sfm.conv_d1 = make_conv(f_new, f_new, 1, fill);
                sfm.conv_d3 = make_conv(f_new, f_new, 3, fill);
                sfm.conv_d5 = make_conv(f_new, f_new, 5, fill);
                st.processing = std::move(sfm);
                break;
            }
        }
        st.heads.seg = make_mlp2(1, f_new, f_new, fill);
        st.heads.refine = make_mlp2(1, f_new, f_new, fill);
    }
    return w;
}

} // namespace

PipelineWeights make_seeded_weights(std::uint64_t seed, int feat0, int backbone_channels,
                                    bool backbone_sample_full, Processing kind) {
    Rng rng(derive_seed(seed, 0xEFF5E6));
    FillFn fill = [&rng](std::vector<float>& v) {
        for (float& x : v) x = rng.uniform_f(-0.05f, 0.05f);
    };
    return build_weights(feat0, backbone_channels, backbone_sample_full, kind, fill);
}

PipelineWeights make_zero_weights(int feat0, int backbone_channels, bool backbone_sample_full,
                                  Processing kind) {
    return build_weights(feat0, backbone_channels, backbone_sample_full, kind,
                         [](std::vector<float>&) {});
}

namespace {

void put_layer(WeightStore& store, const std::string& name, const MlpLayer& layer) {
    store.put(name + ".weight", {layer.out_dim, layer.in_dim}, layer.weight);
    store.put(name + ".bias", {layer.out_dim}, layer.bias);
}

void put_mlp(WeightStore& store, const std::string& name, const MlpParams& mlp) {
    for (std::size_t l = 0; l < mlp.layers.size(); ++l)
        put_layer(store, name + ".l" + std::to_string(l + 1), mlp.layers[l]);
}

void put_conv(WeightStore& store, const std::string& name, const ConvKernel& k) {
    store.put(name + ".weight", {k.out_channels, k.in_channels, 3, 3}, k.weights);
    store.put(name + ".bias", {k.out_channels}, k.bias);
}

MlpLayer get_layer(const WeightStore& store, const std::string& name) {
    const NamedTensor& w = store.get(name + ".weight");
    if (w.shape.size() != 2)
        throw std::invalid_argument("weight file: '" + name + ".weight' must be 2-D");
    MlpLayer layer(w.shape[0], w.shape[1]);
    layer.weight = w.values;
    layer.bias = store.get(name + ".bias", {w.shape[0]}).values;
    return layer;
}

MlpParams get_mlp(const WeightStore& store, const std::string& name) {
    MlpParams mlp;
    mlp.layers.push_back(get_layer(store, name + ".l1"));
    if (store.has(name + ".l2.weight")) mlp.layers.push_back(get_layer(store, name + ".l2"));
    return mlp;
}

ConvKernel get_conv(const WeightStore& store, const std::string& name, int dilation) {
    const NamedTensor& w = store.get(name + ".weight");
    if (w.shape.size() != 4 || w.shape[2] != 3 || w.shape[3] != 3)
        throw std::invalid_argument("weight file: '" + name + ".weight' must be [out,in,3,3]");
    ConvKernel k(w.shape[0], w.shape[1], dilation);
    k.weights = w.values;
    k.bias = store.get(name + ".bias", {w.shape[0]}).values;
    return k;
}

} // namespace

WeightStore weights_to_store(const PipelineWeights& weights) {
    WeightStore store;
    put_mlp(store, "query_fuse", weights.query_fuse);
    for (int k = 0; k < 4; ++k) put_conv(store, "fcn." + std::to_string(k + 1), weights.fcn[k]);
    put_mlp(store, "stage0.seg", weights.stage0_heads.seg);
    put_mlp(store, "stage0.refine", weights.stage0_heads.refine);
    for (int s = 1; s <= 3; ++s) {
        const StageWeights& st = weights.stages[s - 1];
        const std::string pre = "stage" + std::to_string(s) + ".";
        for (int c = 0; c < 4; ++c) put_mlp(store, pre + "child" + std::to_string(c), st.child[c]);
        put_mlp(store, pre + "fuse", st.fuse);
        put_mlp(store, pre + "halve", st.halve);
        std::visit(
            [&](const auto& proc) {
                using T = std::decay_t<decltype(proc)>;
                if constexpr (std::is_same_v<T, MlpParams>) {
                    put_mlp(store, pre + "proc", proc);
                } else if constexpr (std::is_same_v<T, ConvKernel>) {
                    put_conv(store, pre + "proc.conv", proc);
                } else if constexpr (std::is_same_v<T, DeformConvParams>) {
                    put_conv(store, pre + "proc.conv", proc.base);
                    put_layer(store, pre + "proc.offset", proc.offset);
                } else {
                    put_conv(store, pre + "proc.conv_d1", proc.conv_d1);
                    put_conv(store, pre + "proc.conv_d3", proc.conv_d3);
                    put_conv(store, pre + "proc.conv_d5", proc.conv_d5);
                }
            },
            st.processing);
        put_mlp(store, pre + "seg", st.heads.seg);
        put_mlp(store, pre + "refine", st.heads.refine);
    }
    return store;
}

PipelineWeights weights_from_store(const WeightStore& store) {
    PipelineWeights w;
    w.query_fuse = get_mlp(store, "query_fuse");
    w.feat0 = w.query_fuse.output_dim();
    for (int k = 0; k < 4; ++k) w.fcn[k] = get_conv(store, "fcn." + std::to_string(k + 1), 1);
    w.stage0_heads.seg = get_mlp(store, "stage0.seg");
    w.stage0_heads.refine = get_mlp(store, "stage0.refine");
    for (int s = 1; s <= 3; ++s) {
        StageWeights& st = w.stages[s - 1];
        const std::string pre = "stage" + std::to_string(s) + ".";
        for (int c = 0; c < 4; ++c) st.child[c] = get_mlp(store, pre + "child" + std::to_string(c));
        st.fuse = get_mlp(store, pre + "fuse");
        st.halve = get_mlp(store, pre + "halve");
        if (store.has(pre + "proc.conv_d1.weight")) {
            SfmParams sfm;
            sfm.conv_d1 = get_conv(store, pre + "proc.conv_d1", 1);
            sfm.conv_d3 = get_conv(store, pre + "proc.conv_d3", 3);
            sfm.conv_d5 = get_conv(store, pre + "proc.conv_d5", 5);
            st.processing = std::move(sfm);
        } else if (store.has(pre + "proc.offset.weight")) {
            DeformConvParams d;
            d.base = get_conv(store, pre + "proc.conv", 1);
            d.offset = get_layer(store, pre + "proc.offset");
            st.processing = std::move(d);
        } else if (store.has(pre + "proc.conv.weight")) {
            st.processing = get_conv(store, pre + "proc.conv", 1);
        } else {
            st.processing = get_mlp(store, pre + "proc");
        }
        st.heads.seg = get_mlp(store, pre + "seg");
        st.heads.refine = get_mlp(store, pre + "refine");
    }
    return w;
}

} // namespace effseg
