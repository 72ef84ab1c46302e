#include "effseg/params.hpp"

#include <cmath>
#include <stdexcept>

namespace effseg {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

bool all_finite(const std::vector<float>& v) {
    for (float x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

} // namespace

ConvKernel::ConvKernel(int out_ch, int in_ch, int dil)
    : out_channels(out_ch),
      in_channels(in_ch),
      dilation(dil),
      weights(static_cast<std::size_t>(out_ch) * in_ch * 9, 0.0f),
      bias(out_ch, 0.0f) {}

ConvKernel ConvKernel::identity(int channels, int dil) {
    ConvKernel k(channels, channels, dil);
    for (int c = 0; c < channels; ++c) k.w(c, c, 1, 1) = 1.0f;
    return k;
}

ConvKernel ConvKernel::zeros(int out_ch, int in_ch, int dil) {
    return ConvKernel(out_ch, in_ch, dil);
}

void ConvKernel::check_valid(const std::string& name) const {
    require(out_channels > 0 && in_channels > 0,
            name + ": kernel channels must be positive, got out=" + std::to_string(out_channels) +
                " in=" + std::to_string(in_channels));
    require(dilation >= 1, name + ": dilation must be >= 1, got " + std::to_string(dilation));
    require(weights.size() == static_cast<std::size_t>(out_channels) * in_channels * 9,
            name + ": weight count does not match [out,in,3,3] shape");
    require(bias.size() == static_cast<std::size_t>(out_channels),
            name + ": bias length does not match out_channels");
    require(all_finite(weights) && all_finite(bias), name + ": non-finite kernel parameter");
}

MlpLayer::MlpLayer(int out_d, int in_d)
    : out_dim(out_d),
      in_dim(in_d),
      weight(static_cast<std::size_t>(out_d) * in_d, 0.0f),
      bias(out_d, 0.0f) {}

void MlpLayer::apply(const float* in, float* out) const {
    for (int o = 0; o < out_dim; ++o) {
        double acc = bias[o];
        const float* wrow = weight.data() + static_cast<std::size_t>(o) * in_dim;
        for (int i = 0; i < in_dim; ++i) acc += static_cast<double>(wrow[i]) * in[i];
        out[o] = static_cast<float>(acc);
    }
}

void MlpParams::forward(const float* in, float* out) const {
    if (layers.size() == 1) {
        layers[0].apply(in, out);
        return;
    }
    std::vector<float> hidden(layers[0].out_dim);
    layers[0].apply(in, hidden.data());
    for (float& h : hidden) h = h > 0.0f ? h : 0.0f;
    layers[1].apply(hidden.data(), out);
}

std::vector<float> MlpParams::forward(const std::vector<float>& in) const {
    std::vector<float> out(output_dim());
    forward(in.data(), out.data());
    return out;
}

MlpParams MlpParams::identity(int dim) {
    MlpParams mlp;
    mlp.layers.emplace_back(dim, dim);
    for (int i = 0; i < dim; ++i) mlp.layers[0].w(i, i) = 1.0f;
    return mlp;
}

MlpParams MlpParams::identity2(int dim) {
    MlpParams mlp;
    mlp.layers.emplace_back(2 * dim, dim);
    mlp.layers.emplace_back(dim, 2 * dim);
    for (int i = 0; i < dim; ++i) {
        mlp.layers[0].w(i, i) = 1.0f;
        mlp.layers[0].w(dim + i, i) = -1.0f;
        mlp.layers[1].w(i, i) = 1.0f;
        mlp.layers[1].w(i, dim + i) = -1.0f;
    }
    return mlp;
}

MlpParams MlpParams::zeros1(int out_dim, int in_dim) {
    MlpParams mlp;
    mlp.layers.emplace_back(out_dim, in_dim);
    return mlp;
}

MlpParams MlpParams::zeros2(int out_dim, int hidden_dim, int in_dim) {
    MlpParams mlp;
    mlp.layers.emplace_back(hidden_dim, in_dim);
    mlp.layers.emplace_back(out_dim, hidden_dim);
    return mlp;
}

void MlpParams::check_valid(const std::string& name) const {
    require(layers.size() == 1 || layers.size() == 2,
            name + ": MLP must have 1 or 2 layers, got " + std::to_string(layers.size()));
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const MlpLayer& layer = layers[l];
        const std::string where = name + " layer " + std::to_string(l + 1);
        require(layer.in_dim > 0 && layer.out_dim > 0, where + ": dims must be positive");
        require(layer.weight.size() == static_cast<std::size_t>(layer.out_dim) * layer.in_dim,
                where + ": weight count does not match [out,in] shape");
        require(layer.bias.size() == static_cast<std::size_t>(layer.out_dim),
                where + ": bias length does not match out_dim");
        require(all_finite(layer.weight) && all_finite(layer.bias), where + ": non-finite parameter");
    }
    if (layers.size() == 2)
        require(layers[0].out_dim == layers[1].in_dim,
                name + ": layer dims do not chain (" + std::to_string(layers[0].out_dim) +
                    " -> " + std::to_string(layers[1].in_dim) + ")");
}

void SfmParams::check_valid(const std::string& name) const {
    conv_d1.check_valid(name + ".conv_d1");
    conv_d3.check_valid(name + ".conv_d3");
    conv_d5.check_valid(name + ".conv_d5");
    require(conv_d1.dilation == 1 && conv_d3.dilation == 3 && conv_d5.dilation == 5,
            name + ": dilations must be exactly (1, 3, 5)");
    require(conv_d1.in_channels == conv_d3.in_channels && conv_d3.in_channels == conv_d5.in_channels &&
                conv_d1.out_channels == conv_d3.out_channels &&
                conv_d3.out_channels == conv_d5.out_channels,
            name + ": the three kernels must share in/out channel counts");
}

void DeformConvParams::check_valid(const std::string& name) const {
    base.check_valid(name + ".base");
    require(base.dilation == 1, name + ": base kernel must have dilation 1");
    require(offset.out_dim == 18,
            name + ": offset predictor must emit 18 values (2 per tap), got " +
                std::to_string(offset.out_dim));
    require(offset.in_dim == base.in_channels,
            name + ": offset predictor input dim must equal kernel in_channels");
    require(offset.weight.size() == static_cast<std::size_t>(offset.out_dim) * offset.in_dim &&
                offset.bias.size() == static_cast<std::size_t>(offset.out_dim),
            name + ": offset predictor parameter shape mismatch");
}

} // namespace effseg
