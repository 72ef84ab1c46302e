#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <variant>
#include <vector>

namespace effseg {

// 3x3 convolution weights at a configurable dilation.
struct ConvKernel {
    int out_channels = 0;
    int in_channels = 0;
    int dilation = 1;
    std::vector<float> weights; // [out][in][3][3], row-major
    std::vector<float> bias;    // [out]

    ConvKernel() = default;
    ConvKernel(int out_ch, int in_ch, int dil);

    float w(int co, int ci, int u, int v) const {
        return weights[((static_cast<std::size_t>(co) * in_channels + ci) * 3 + u) * 3 + v];
    }
    float& w(int co, int ci, int u, int v) {
        return weights[((static_cast<std::size_t>(co) * in_channels + ci) * 3 + u) * 3 + v];
    }

    // Center tap 1 on the matching channel, everything else 0.
    static ConvKernel identity(int channels, int dil = 1);
    static ConvKernel zeros(int out_ch, int in_ch, int dil = 1);

    void check_valid(const std::string& name) const;
};

struct MlpLayer {
    int out_dim = 0;
    int in_dim = 0;
    std::vector<float> weight; // [out][in], row-major
    std::vector<float> bias;   // [out]

    MlpLayer() = default;
    MlpLayer(int out_d, int in_d);

    float w(int o, int i) const { return weight[static_cast<std::size_t>(o) * in_dim + i]; }
    float& w(int o, int i) { return weight[static_cast<std::size_t>(o) * in_dim + i]; }

    // y = W x + b, accumulated in double
    void apply(const float* in, float* out) const;
};

// One- or two-layer perceptron with a ReLU between layers.
struct MlpParams {
    std::vector<MlpLayer> layers;

    int input_dim() const { return layers.empty() ? 0 : layers.front().in_dim; }
    int output_dim() const { return layers.empty() ? 0 : layers.back().out_dim; }

    void forward(const float* in, float* out) const;
    std::vector<float> forward(const std::vector<float>& in) const;

    static MlpParams identity(int dim);
    // Exact two-layer identity: x = relu(x) - relu(-x), hidden width 2*dim.
    static MlpParams identity2(int dim);
    static MlpParams zeros1(int out_dim, int in_dim);
    static MlpParams zeros2(int out_dim, int hidden_dim, int in_dim);

    void check_valid(const std::string& name) const;
};

// Three parallel 3x3 convolutions at dilations 1, 3, 5 whose outputs are summed.
struct SfmParams {
    ConvKernel conv_d1; // dilation 1
    ConvKernel conv_d3; // dilation 3
    ConvKernel conv_d5; // dilation 5

    void check_valid(const std::string& name) const;
};

// 3x3 convolution whose nine taps are displaced by offsets predicted
// per site from the site's own feature (one linear layer, 18 = 2 * 9 outputs).
struct DeformConvParams {
    ConvKernel base;  // dilation 1
    MlpLayer offset;  // in_dim = F, out_dim = 18; layout (drow, dcol) per tap, taps row-major

    void check_valid(const std::string& name) const;
};

using ProcessingParams = std::variant<MlpParams, ConvKernel, DeformConvParams, SfmParams>;

} // namespace effseg
