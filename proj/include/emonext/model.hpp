#pragma once

// Full network assembly: STN -> patchify stem -> four ConvNeXt stages, each
// followed by an SE block -> token self-attention head -> classifier, plus
// the attention-regularized loss.

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "emonext/blocks.hpp"
#include "emonext/nn_ops.hpp"

namespace emonext {

struct ModelConfig {
    std::string name = "custom";
    std::array<int64_t, 4> channels{96, 192, 384, 768};
    std::array<int64_t, 4> blocks{3, 3, 9, 3};
    int64_t num_classes = 7;
    int64_t in_channels = 1;
    int64_t se_reduction = 16;
    double lambda = 0.01;
    double drop_path_max = 0.1;
    double label_smoothing = 0.1;
    int64_t input_size = 224;

    int64_t total_blocks() const { return blocks[0] + blocks[1] + blocks[2] + blocks[3]; }

    // Spatial size after the stem and after each stage.
    std::array<int64_t, 4> stage_sizes() const {
        std::array<int64_t, 4> s{};
        int64_t cur = input_size / 4;
        for (int i = 0; i < 4; ++i) {
            s[static_cast<size_t>(i)] = cur;
            cur /= 2;
        }
        return s;
    }

    int64_t token_count() const {
        int64_t s = stage_sizes()[3];
        return s * s;
    }
};

inline const std::vector<std::string>& preset_names() {
    static const std::vector<std::string> names{"micro", "tiny", "small", "base", "large", "xlarge"};
    return names;
}

inline ModelConfig preset_config(const std::string& name) {
    ModelConfig c;
    c.name = name;
    if (name == "micro") {
        c.channels = {8, 16, 32, 64};
        c.blocks = {1, 1, 1, 1};
        c.input_size = 64;
        c.se_reduction = 4;
    } else if (name == "tiny") {
        c.channels = {96, 192, 384, 768};
        c.blocks = {3, 3, 9, 3};
    } else if (name == "small") {
        c.channels = {96, 192, 384, 768};
        c.blocks = {3, 3, 27, 3};
    } else if (name == "base") {
        c.channels = {128, 256, 512, 1024};
        c.blocks = {3, 3, 27, 3};
    } else if (name == "large") {
        c.channels = {192, 384, 768, 1536};
        c.blocks = {3, 3, 27, 3};
    } else if (name == "xlarge") {
        c.channels = {256, 512, 1024, 2048};
        c.blocks = {3, 3, 27, 3};
    } else {
        std::string valid;
        for (const auto& n : preset_names()) valid += (valid.empty() ? "" : ", ") + n;
        throw ConfigError("unknown preset '" + name + "' (valid: " + valid + ")");
    }
    return c;
}

// Parameter count as a pure function of the configuration.
inline int64_t param_count(const ModelConfig& c) {
    auto lin = [](int64_t out, int64_t in) { return out * in + out; };
    int64_t s4 = c.input_size / 4;
    int64_t total = 0;
    // STN localization network
    total += lin(8, c.in_channels * 25) + lin(10, 8 * 25);
    total += lin(32, 10 * s4 * s4) + lin(6, 32);
    // stem
    total += lin(c.channels[0], c.in_channels * 16) + 2 * c.channels[0];
    for (int i = 0; i < 4; ++i) {
        int64_t ch = c.channels[static_cast<size_t>(i)];
        // ConvNeXt blocks
        total += c.blocks[static_cast<size_t>(i)] *
                 (lin(ch, 49) + 2 * ch + lin(4 * ch, ch) + lin(ch, 4 * ch) + ch);
        // SE block
        int64_t mid = std::max<int64_t>(1, ch / c.se_reduction);
        total += lin(mid, ch) + lin(ch, mid);
        // downsample to the next stage
        if (i < 3) total += 2 * ch + lin(c.channels[static_cast<size_t>(i + 1)], ch * 4);
    }
    // attention head (q/k projections at d = C4) + final LN + classifier
    int64_t c4 = c.channels[3];
    total += 2 * lin(c4, c4) + 2 * c4 + lin(c.num_classes, c4);
    return total;
}

template <typename T>
struct Model {
    ModelConfig config;
    STNParams<T> stn;
    StemParams<T> stem;
    std::array<std::vector<BlockParams<T>>, 4> stages;
    std::array<SEParams<T>, 4> se;
    std::array<DownsampleParams<T>, 3> down;
    Tensor<T> q_w, q_b, k_w, k_b;
    Tensor<T> head_ln_gamma, head_ln_beta;
    Tensor<T> cls_w, cls_b;

    // Stable name -> tensor enumeration; defines checkpoint and optimizer order.
    std::vector<std::pair<std::string, Tensor<T>>> named_params() const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        auto put = [&](const std::string& n, const Tensor<T>& t) { out.emplace_back(n, t); };
        put("stn/conv1/weight", stn.conv1_w);
        put("stn/conv1/bias", stn.conv1_b);
        put("stn/conv2/weight", stn.conv2_w);
        put("stn/conv2/bias", stn.conv2_b);
        put("stn/fc1/weight", stn.fc1_w);
        put("stn/fc1/bias", stn.fc1_b);
        put("stn/fc2/weight", stn.fc2_w);
        put("stn/fc2/bias", stn.fc2_b);
        put("stem/weight", stem.weight);
        put("stem/bias", stem.bias);
        put("stem/ln/gamma", stem.ln_gamma);
        put("stem/ln/beta", stem.ln_beta);
        for (int i = 0; i < 4; ++i) {
            std::string sp = "stages/" + std::to_string(i);
            for (size_t j = 0; j < stages[static_cast<size_t>(i)].size(); ++j) {
                const auto& b = stages[static_cast<size_t>(i)][j];
                std::string bp = sp + "/blocks/" + std::to_string(j);
                put(bp + "/dw/weight", b.dw_weight);
                put(bp + "/dw/bias", b.dw_bias);
                put(bp + "/ln/gamma", b.ln_gamma);
                put(bp + "/ln/beta", b.ln_beta);
                put(bp + "/pw1/weight", b.pw1_weight);
                put(bp + "/pw1/bias", b.pw1_bias);
                put(bp + "/pw2/weight", b.pw2_weight);
                put(bp + "/pw2/bias", b.pw2_bias);
                put(bp + "/layer_scale", b.layer_scale);
            }
            const auto& s = se[static_cast<size_t>(i)];
            put(sp + "/se/fc1/weight", s.fc1_w);
            put(sp + "/se/fc1/bias", s.fc1_b);
            put(sp + "/se/fc2/weight", s.fc2_w);
            put(sp + "/se/fc2/bias", s.fc2_b);
            if (i < 3) {
                const auto& d = down[static_cast<size_t>(i)];
                put(sp + "/down/ln/gamma", d.ln_gamma);
                put(sp + "/down/ln/beta", d.ln_beta);
                put(sp + "/down/weight", d.weight);
                put(sp + "/down/bias", d.bias);
            }
        }
        put("head/q/weight", q_w);
        put("head/q/bias", q_b);
        put("head/k/weight", k_w);
        put("head/k/bias", k_b);
        put("head/ln/gamma", head_ln_gamma);
        put("head/ln/beta", head_ln_beta);
        put("head/cls/weight", cls_w);
        put("head/cls/bias", cls_b);
        return out;
    }

    void set_requires_grad(bool v = true) {
        for (auto& [name, t] : named_params()) const_cast<Tensor<T>&>(t).set_requires_grad(v);
    }

    void zero_grad() {
        for (auto& [name, t] : named_params()) const_cast<Tensor<T>&>(t).zero_grad();
    }
};

template <typename T>
Model<T> build(const ModelConfig& config, Rng& rng) {
    if (config.input_size % 32 != 0)
        throw ConfigError("input size must be divisible by 32, got " +
                          std::to_string(config.input_size));
    Model<T> m;
    m.config = config;
    m.stn = STNParams<T>::init(config.in_channels, config.input_size, rng);
    m.stem = StemParams<T>::init(config.in_channels, config.channels[0], rng);
    for (int i = 0; i < 4; ++i) {
        int64_t ch = config.channels[static_cast<size_t>(i)];
        for (int64_t j = 0; j < config.blocks[static_cast<size_t>(i)]; ++j)
            m.stages[static_cast<size_t>(i)].push_back(BlockParams<T>::init(ch, rng));
        m.se[static_cast<size_t>(i)] = SEParams<T>::init(ch, config.se_reduction, rng);
        if (i < 3)
            m.down[static_cast<size_t>(i)] =
                DownsampleParams<T>::init(ch, config.channels[static_cast<size_t>(i + 1)], rng);
    }
    int64_t c4 = config.channels[3];
    m.q_w = init_normal<T>({c4, c4}, rng);
    m.q_b = Tensor<T>::zeros({c4});
    m.k_w = init_normal<T>({c4, c4}, rng);
    m.k_b = Tensor<T>::zeros({c4});
    m.head_ln_gamma = Tensor<T>::full({c4}, T(1));
    m.head_ln_beta = Tensor<T>::zeros({c4});
    m.cls_w = init_normal<T>({config.num_classes, c4}, rng);
    m.cls_b = Tensor<T>::zeros({config.num_classes});
    m.set_requires_grad(true);
    return m;
}

// Row-stochastic token-to-token attention: W = softmax(Q K^T / sqrt(d)).
template <typename T>
Tensor<T> attention_weights(const Tensor<T>& tokens, const Tensor<T>& q_w, const Tensor<T>& q_b,
                            const Tensor<T>& k_w, const Tensor<T>& k_b) {
    auto q = linear(tokens, q_w, q_b);
    auto k = linear(tokens, k_w, k_b);
    int64_t d = q_w.dim(0);
    auto scores = mul_scalar(bmm(q, k, /*transpose_b=*/true),
                             static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
    return softmax(scores, 2);
}

template <typename T>
struct AttentionOutput {
    Tensor<T> logits;   // [N, num_classes]
    Tensor<T> weights;  // [N, T, T]
};

template <typename T>
AttentionOutput<T> forward(const Model<T>& m, const Tensor<T>& x, bool training, Rng& rng) {
    const ModelConfig& c = m.config;
    if (x.ndim() != 4 || x.dim(1) != c.in_channels || x.dim(2) != c.input_size ||
        x.dim(3) != c.input_size)
        throw DimensionError("forward: expected input [N," + std::to_string(c.in_channels) + "," +
                             std::to_string(c.input_size) + "," + std::to_string(c.input_size) +
                             "], got " + shape_str(x.shape()));

    auto h = stn_forward(x, m.stn);
    h = patchify_stem(h, m.stem);

    int64_t total = c.total_blocks();
    int64_t block_index = 0;
    for (int i = 0; i < 4; ++i) {
        for (const auto& bp : m.stages[static_cast<size_t>(i)]) {
            // linear ramp from 0 at the first block to drop_path_max at the last
            double dp = total > 1 ? c.drop_path_max * static_cast<double>(block_index) /
                                        static_cast<double>(total - 1)
                                  : 0.0;
            h = convnext_block(h, bp, dp, training, rng);
            ++block_index;
        }
        h = se_block(h, m.se[static_cast<size_t>(i)]);
        if (i < 3) h = downsample_layer(h, m.down[static_cast<size_t>(i)]);
    }

    // flatten the final feature map to T = H*W tokens of width C4
    int64_t n = h.dim(0), c4 = h.dim(1), t = h.dim(2) * h.dim(3);
    auto tokens = permute(reshape(h, {n, c4, t}), {0, 2, 1});  // [N, T, C4]

    auto w = attention_weights(tokens, m.q_w, m.q_b, m.k_w, m.k_b);
    auto attended = bmm(w, tokens);            // [N, T, C4]
    auto pooled = mean_axis(attended, 1);      // [N, C4]
    pooled = layer_norm(pooled, /*axis=*/1, m.head_ln_gamma, m.head_ln_beta);
    auto logits = linear(pooled, m.cls_w, m.cls_b);
    return {logits, w};
}

template <typename T>
struct LossOutput {
    Tensor<T> total;
    Tensor<T> ce;
    Tensor<T> sa;
};

// L = CE_smoothed + lambda * L_SA
template <typename T>
LossOutput<T> total_loss(const Tensor<T>& logits, const std::vector<int64_t>& targets,
                         const Tensor<T>& w, double lambda, double epsilon) {
    if (lambda < 0) throw ContractError("total_loss: lambda must be >= 0");
    auto ce = cross_entropy_smoothed(logits, targets, epsilon);
    auto sa = sa_regularizer(w);
    auto total = lambda == 0.0 ? ce : add(ce, mul_scalar(sa, static_cast<T>(lambda)));
    return {total, ce, sa};
}

template <typename T>
struct Prediction {
    int64_t class_index;
    std::vector<T> probabilities;
};

// argmax of the logits; ties broken by the lowest class index
template <typename T>
Prediction<T> predict(const Model<T>& m, const Tensor<T>& x) {
    NoGradGuard no_tape;
    Rng rng(0);
    auto out = forward(m, x, /*training=*/false, rng);
    auto probs = softmax(out.logits, 1);
    int64_t k = probs.dim(1);
    Prediction<T> p;
    p.probabilities.assign(probs.data().begin(), probs.data().begin() + k);
    p.class_index = 0;
    for (int64_t j = 1; j < k; ++j)
        if (p.probabilities[static_cast<size_t>(j)] > p.probabilities[static_cast<size_t>(p.class_index)])
            p.class_index = j;
    return p;
}

}  // namespace emonext
