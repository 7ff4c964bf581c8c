#pragma once

// Parameterized building blocks: spatial transformer front-end, ConvNeXt
// block, squeeze-and-excitation block, patchify stem and inter-stage
// downsampling.

#include <cmath>
#include <vector>

#include "emonext/nn_ops.hpp"
#include "emonext/rng.hpp"
#include "emonext/tensor.hpp"

namespace emonext {

template <typename T>
Tensor<T> init_normal(Shape shape, Rng& rng, double stddev = 0.02) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(rng.normal(0.0, stddev));
    return t;
}

// ---------------------------------------------------------------------------
// Spatial transformer
// ---------------------------------------------------------------------------

// Localization network: conv(5x5, 8, pad 2) -> maxpool2 -> ReLU ->
// conv(5x5, 10, pad 2) -> maxpool2 -> ReLU -> fc(32) -> ReLU -> fc(6).
// The final layer starts at zero weight with identity bias, so a fresh STN
// is exactly the identity transform.
template <typename T>
struct STNParams {
    Tensor<T> conv1_w, conv1_b;
    Tensor<T> conv2_w, conv2_b;
    Tensor<T> fc1_w, fc1_b;
    Tensor<T> fc2_w, fc2_b;
    int64_t in_channels = 1;
    int64_t input_size = 224;

    static int64_t flattened_size(int64_t input_size) {
        // two stride-2 pools with shape-preserving convs
        int64_t s = input_size / 2 / 2;
        return 10 * s * s;
    }

    static STNParams init(int64_t in_channels, int64_t input_size, Rng& rng) {
        if (input_size % 4 != 0)
            throw DimensionError("STN input size must be divisible by 4, got " +
                                 std::to_string(input_size));
        STNParams p;
        p.in_channels = in_channels;
        p.input_size = input_size;
        p.conv1_w = init_normal<T>({8, in_channels, 5, 5}, rng);
        p.conv1_b = Tensor<T>::zeros({8});
        p.conv2_w = init_normal<T>({10, 8, 5, 5}, rng);
        p.conv2_b = Tensor<T>::zeros({10});
        p.fc1_w = init_normal<T>({32, flattened_size(input_size)}, rng);
        p.fc1_b = Tensor<T>::zeros({32});
        p.fc2_w = Tensor<T>::zeros({6, 32});
        p.fc2_b = Tensor<T>({6}, {T(1), T(0), T(0), T(0), T(1), T(0)});
        return p;
    }
};

// Per-sample 2x3 affine parameters, shape [N, 2, 3].
template <typename T>
Tensor<T> localization_net(const Tensor<T>& x, const STNParams<T>& p) {
    if (x.ndim() != 4 || x.dim(2) != p.input_size || x.dim(3) != p.input_size)
        throw DimensionError("localization_net: expected spatial size " +
                             std::to_string(p.input_size) + "x" + std::to_string(p.input_size) +
                             ", got " + shape_str(x.shape()));
    auto h = conv2d(x, p.conv1_w, p.conv1_b, {1, 1}, {2, 2});
    h = relu(max_pool2d(h));
    h = conv2d(h, p.conv2_w, p.conv2_b, {1, 1}, {2, 2});
    h = relu(max_pool2d(h));
    h = reshape(h, {x.dim(0), STNParams<T>::flattened_size(p.input_size)});
    h = relu(linear(h, p.fc1_w, p.fc1_b));
    h = linear(h, p.fc2_w, p.fc2_b);
    return reshape(h, {x.dim(0), 2, 3});
}

template <typename T>
Tensor<T> identity_theta(int64_t batch) {
    Tensor<T> t({batch, 2, 3});
    for (int64_t b = 0; b < batch; ++b) {
        t.data()[static_cast<size_t>(b * 6 + 0)] = T(1);
        t.data()[static_cast<size_t>(b * 6 + 4)] = T(1);
    }
    return t;
}

// grid(y, x) = theta . [x_norm, y_norm, 1]^T with target coordinates on the
// even lattice over [-1, 1] (align-corners). Output [N, H, W, 2], (x, y) order.
template <typename T>
Tensor<T> affine_grid(const Tensor<T>& theta, int64_t out_h, int64_t out_w) {
    if (theta.ndim() != 3 || theta.dim(1) != 2 || theta.dim(2) != 3)
        throw DimensionError("affine_grid: theta must be [N,2,3]");
    if (out_h < 1 || out_w < 1) throw DimensionError("affine_grid: output size must be >= 1");
    int64_t n = theta.dim(0);

    // base coordinates [H*W, 3] rows (x_norm, y_norm, 1)
    Tensor<T> base({out_h * out_w, 3});
    auto& bd = base.data();
    for (int64_t y = 0; y < out_h; ++y) {
        T yn = out_h > 1 ? T(-1) + T(2) * static_cast<T>(y) / static_cast<T>(out_h - 1) : T(0);
        for (int64_t x = 0; x < out_w; ++x) {
            T xn = out_w > 1 ? T(-1) + T(2) * static_cast<T>(x) / static_cast<T>(out_w - 1) : T(0);
            int64_t r = y * out_w + x;
            bd[static_cast<size_t>(r * 3 + 0)] = xn;
            bd[static_cast<size_t>(r * 3 + 1)] = yn;
            bd[static_cast<size_t>(r * 3 + 2)] = T(1);
        }
    }
    // [N, H*W, 2] = base . theta^T per batch element
    Tensor<T> base_b({n, out_h * out_w, 3});
    for (int64_t b = 0; b < n; ++b)
        std::copy(bd.begin(), bd.end(), base_b.data().begin() + b * out_h * out_w * 3);
    auto grid = bmm(base_b, theta, /*transpose_b=*/true);
    return reshape(grid, {n, out_h, out_w, 2});
}

template <typename T>
Tensor<T> stn_forward(const Tensor<T>& x, const STNParams<T>& p) {
    auto theta = localization_net(x, p);
    auto grid = affine_grid(theta, x.dim(2), x.dim(3));
    return grid_sample_bilinear(x, grid);
}

// ---------------------------------------------------------------------------
// ConvNeXt block
// ---------------------------------------------------------------------------

template <typename T>
struct BlockParams {
    Tensor<T> dw_weight, dw_bias;          // depthwise 7x7
    Tensor<T> ln_gamma, ln_beta;           // channel-wise LN
    Tensor<T> pw1_weight, pw1_bias;        // C -> 4C
    Tensor<T> pw2_weight, pw2_bias;        // 4C -> C
    Tensor<T> layer_scale;                 // per-channel, init 1e-6
    int64_t channels = 0;

    static BlockParams init(int64_t c, Rng& rng) {
        BlockParams p;
        p.channels = c;
        p.dw_weight = init_normal<T>({c, 1, 7, 7}, rng);
        p.dw_bias = Tensor<T>::zeros({c});
        p.ln_gamma = Tensor<T>::full({c}, T(1));
        p.ln_beta = Tensor<T>::zeros({c});
        p.pw1_weight = init_normal<T>({4 * c, c}, rng);
        p.pw1_bias = Tensor<T>::zeros({4 * c});
        p.pw2_weight = init_normal<T>({c, 4 * c}, rng);
        p.pw2_bias = Tensor<T>::zeros({c});
        p.layer_scale = Tensor<T>::full({c}, static_cast<T>(1e-6));
        return p;
    }
};

// y = x + DropPath(layer_scale * pw2(gelu(pw1(LN(dwconv7x7(x))))))
template <typename T>
Tensor<T> convnext_block(const Tensor<T>& x, const BlockParams<T>& p, double drop_prob,
                         bool training, Rng& rng) {
    int64_t c = p.channels;
    if (x.ndim() != 4 || x.dim(1) != c)
        throw DimensionError("convnext_block: channel axis " + std::to_string(x.dim(1)) +
                             " does not match block width " + std::to_string(c));
    auto h = conv2d(x, p.dw_weight, p.dw_bias, {1, 1}, {3, 3}, /*groups=*/c);
    h = layer_norm(h, /*axis=*/1, p.ln_gamma, p.ln_beta);
    // pointwise convs as 1x1 kernels over the stored [out, in] weights
    auto pw1 = reshape(p.pw1_weight, {4 * c, c, 1, 1});
    auto pw2 = reshape(p.pw2_weight, {c, 4 * c, 1, 1});
    h = conv2d(h, pw1, p.pw1_bias);
    h = gelu(h);
    h = conv2d(h, pw2, p.pw2_bias);
    h = scale_channels(h, p.layer_scale);
    h = drop_path(h, drop_prob, training, rng);
    return add(x, h);
}

// ---------------------------------------------------------------------------
// Squeeze-and-Excitation block
// ---------------------------------------------------------------------------

template <typename T>
struct SEParams {
    Tensor<T> fc1_w, fc1_b;  // C -> C/r
    Tensor<T> fc2_w, fc2_b;  // C/r -> C
    int64_t channels = 0;
    int64_t reduction = 16;

    static int64_t bottleneck(int64_t c, int64_t r) { return std::max<int64_t>(1, c / r); }

    static SEParams init(int64_t c, int64_t reduction, Rng& rng) {
        if (reduction < 1) throw ConfigError("SE reduction must be >= 1");
        SEParams p;
        p.channels = c;
        p.reduction = reduction;
        int64_t mid = bottleneck(c, reduction);
        p.fc1_w = init_normal<T>({mid, c}, rng);
        p.fc1_b = Tensor<T>::zeros({mid});
        p.fc2_w = init_normal<T>({c, mid}, rng);
        p.fc2_b = Tensor<T>::zeros({c});
        return p;
    }
};

// squeeze (global average pool) -> fc -> ReLU -> fc -> sigmoid gates ->
// channel-wise rescale of the input.
template <typename T>
Tensor<T> se_block(const Tensor<T>& x, const SEParams<T>& p) {
    if (x.ndim() != 4 || x.dim(1) != p.channels)
        throw DimensionError("se_block: channel axis " + std::to_string(x.dim(1)) +
                             " does not match SE width " + std::to_string(p.channels));
    auto s = global_avg_pool(x);
    s = reshape(s, {x.dim(0), p.channels});
    s = relu(linear(s, p.fc1_w, p.fc1_b));
    s = sigmoid(linear(s, p.fc2_w, p.fc2_b));
    return scale_channels(x, s);
}

// ---------------------------------------------------------------------------
// Stem and downsampling
// ---------------------------------------------------------------------------

template <typename T>
struct StemParams {
    Tensor<T> weight, bias;     // k=4, s=4 conv
    Tensor<T> ln_gamma, ln_beta;

    static StemParams init(int64_t in_ch, int64_t out_ch, Rng& rng) {
        StemParams p;
        p.weight = init_normal<T>({out_ch, in_ch, 4, 4}, rng);
        p.bias = Tensor<T>::zeros({out_ch});
        p.ln_gamma = Tensor<T>::full({out_ch}, T(1));
        p.ln_beta = Tensor<T>::zeros({out_ch});
        return p;
    }
};

template <typename T>
Tensor<T> patchify_stem(const Tensor<T>& x, const StemParams<T>& p) {
    if (x.ndim() != 4) throw DimensionError("patchify_stem: input must be NCHW");
    if (x.dim(2) % 4 != 0 || x.dim(3) % 4 != 0)
        throw DimensionError("patchify_stem: spatial axes must be divisible by 4, got " +
                             shape_str(x.shape()));
    auto h = conv2d(x, p.weight, p.bias, {4, 4}, {0, 0});
    return layer_norm(h, /*axis=*/1, p.ln_gamma, p.ln_beta);
}

template <typename T>
struct DownsampleParams {
    Tensor<T> ln_gamma, ln_beta;
    Tensor<T> weight, bias;  // k=2, s=2 conv to the next stage width

    static DownsampleParams init(int64_t in_ch, int64_t out_ch, Rng& rng) {
        DownsampleParams p;
        p.ln_gamma = Tensor<T>::full({in_ch}, T(1));
        p.ln_beta = Tensor<T>::zeros({in_ch});
        p.weight = init_normal<T>({out_ch, in_ch, 2, 2}, rng);
        p.bias = Tensor<T>::zeros({out_ch});
        return p;
    }
};

template <typename T>
Tensor<T> downsample_layer(const Tensor<T>& x, const DownsampleParams<T>& p) {
    if (x.ndim() != 4) throw DimensionError("downsample_layer: input must be NCHW");
    if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0)
        throw DimensionError("downsample_layer: spatial axes must be even, got " +
                             shape_str(x.shape()));
    auto h = layer_norm(x, /*axis=*/1, p.ln_gamma, p.ln_beta);
    return conv2d(h, p.weight, p.bias, {2, 2}, {0, 0});
}

}  // namespace emonext
