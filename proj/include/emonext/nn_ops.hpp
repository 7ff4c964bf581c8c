#pragma once

// Convolution, pooling, normalization, bilinear grid sampling and the loss
// primitives, all with reverse-mode rules. Activations are NCHW row-major;
// conv weights are [out, in/groups, kh, kw].

#include <cmath>
#include <utility>
#include <vector>

#include "emonext/rng.hpp"
#include "emonext/tensor.hpp"

namespace emonext {

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::pair<int64_t, int64_t> stride = {1, 1},
                 std::pair<int64_t, int64_t> padding = {0, 0}, int64_t groups = 1) {
    if (input.ndim() != 4) throw DimensionError("conv2d: input must be NCHW, got " + shape_str(input.shape()));
    if (weight.ndim() != 4) throw DimensionError("conv2d: weight must be [out,in/groups,kh,kw]");
    int64_t n = input.dim(0), in_ch = input.dim(1), h = input.dim(2), w = input.dim(3);
    int64_t out_ch = weight.dim(0), wc = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
    if (groups < 1 || in_ch % groups != 0)
        throw DimensionError("conv2d: input channel axis " + std::to_string(in_ch) +
                             " not divisible by groups " + std::to_string(groups));
    if (out_ch % groups != 0)
        throw DimensionError("conv2d: output channel axis " + std::to_string(out_ch) +
                             " not divisible by groups " + std::to_string(groups));
    if (wc != in_ch / groups)
        throw DimensionError("conv2d: weight channel axis " + std::to_string(wc) +
                             " != in_ch/groups = " + std::to_string(in_ch / groups));
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != out_ch))
        throw DimensionError("conv2d: bias axis must have size out_ch");
    auto [sh, sw] = stride;
    auto [ph, pw] = padding;
    if (h + 2 * ph < kh || w + 2 * pw < kw)
        throw DimensionError("conv2d: spatial axes smaller than kernel after padding");
    int64_t oh = (h + 2 * ph - kh) / sh + 1;
    int64_t ow = (w + 2 * pw - kw) / sw + 1;
    int64_t icg = in_ch / groups, ocg = out_ch / groups;

    Tensor<T> out({n, out_ch, oh, ow});
    const T* xd = input.data().data();
    const T* wd = weight.data().data();
    T* od = out.data().data();
    for (int64_t b = 0; b < n; ++b)
        for (int64_t oc = 0; oc < out_ch; ++oc) {
            int64_t g = oc / ocg;
            T bv = bias.defined() ? bias.data()[static_cast<size_t>(oc)] : T(0);
            for (int64_t y = 0; y < oh; ++y)
                for (int64_t x = 0; x < ow; ++x) {
                    T acc = bv;
                    for (int64_t ic = 0; ic < icg; ++ic) {
                        const T* xp = xd + ((b * in_ch + g * icg + ic) * h) * w;
                        const T* wp = wd + ((oc * icg + ic) * kh) * kw;
                        for (int64_t ky = 0; ky < kh; ++ky) {
                            int64_t iy = y * sh - ph + ky;
                            if (iy < 0 || iy >= h) continue;
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                int64_t ix = x * sw - pw + kx;
                                if (ix < 0 || ix >= w) continue;
                                acc += xp[iy * w + ix] * wp[ky * kw + kx];
                            }
                        }
                    }
                    od[((b * out_ch + oc) * oh + y) * ow + x] = acc;
                }
        }

    bool needs = grad_recording_enabled() &&
                 (input.requires_grad() || weight.requires_grad() ||
                  (bias.defined() && bias.requires_grad()));
    if (needs) {
        auto xn = input.node();
        auto wn = weight.node();
        auto bn = bias.defined() ? bias.node() : nullptr;
        std::vector<std::shared_ptr<detail::Node<T>>> parents{xn, wn};
        if (bn) parents.push_back(bn);
        out.attach(std::move(parents),
                   [xn, wn, bn, n, in_ch, h, w, out_ch, kh, kw, sh, sw, ph, pw, oh, ow, icg,
                    ocg](detail::Node<T>& o) {
                       const T* go = o.grad.data();
                       const T* xd2 = xn->data.data();
                       const T* wd2 = wn->data.data();
                       T* gx = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
                       T* gw = wn->requires_grad ? wn->ensure_grad().data() : nullptr;
                       T* gb = (bn && bn->requires_grad) ? bn->ensure_grad().data() : nullptr;
                       for (int64_t b = 0; b < n; ++b)
                           for (int64_t oc = 0; oc < out_ch; ++oc) {
                               int64_t g = oc / ocg;
                               for (int64_t y = 0; y < oh; ++y)
                                   for (int64_t x = 0; x < ow; ++x) {
                                       T gov = go[((b * out_ch + oc) * oh + y) * ow + x];
                                       if (gb) gb[oc] += gov;
                                       if (gov == T(0)) continue;
                                       for (int64_t ic = 0; ic < icg; ++ic) {
                                           int64_t xbase = ((b * in_ch + g * icg + ic) * h) * w;
                                           int64_t wbase = ((oc * icg + ic) * kh) * kw;
                                           for (int64_t ky = 0; ky < kh; ++ky) {
                                               int64_t iy = y * sh - ph + ky;
                                               if (iy < 0 || iy >= h) continue;
                                               for (int64_t kx = 0; kx < kw; ++kx) {
                                                   int64_t ix = x * sw - pw + kx;
                                                   if (ix < 0 || ix >= w) continue;
                                                   if (gx) gx[xbase + iy * w + ix] += gov * wd2[wbase + ky * kw + kx];
                                                   if (gw) gw[wbase + ky * kw + kx] += gov * xd2[xbase + iy * w + ix];
                                               }
                                           }
                                       }
                                   }
                           }
                   });
    }
    debug_check_finite(out, "conv2d");
    return out;
}

// fixed 2x2 kernel, stride 2, ties broken by first (row-major) position
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& input) {
    if (input.ndim() != 4) throw DimensionError("max_pool2d: input must be NCHW");
    int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (h < 2 || w < 2) throw DimensionError("max_pool2d: spatial axes must be >= 2");
    int64_t oh = h / 2, ow = w / 2;

    Tensor<T> out({n, c, oh, ow});
    const T* xd = input.data().data();
    T* od = out.data().data();
    std::vector<int64_t> argmax(static_cast<size_t>(out.numel()));
    for (int64_t bc = 0; bc < n * c; ++bc)
        for (int64_t y = 0; y < oh; ++y)
            for (int64_t x = 0; x < ow; ++x) {
                int64_t best = (bc * h + 2 * y) * w + 2 * x;
                T bv = xd[best];
                const int64_t cand[3] = {(bc * h + 2 * y) * w + 2 * x + 1,
                                         (bc * h + 2 * y + 1) * w + 2 * x,
                                         (bc * h + 2 * y + 1) * w + 2 * x + 1};
                for (int64_t ci : cand)
                    if (xd[ci] > bv) {
                        bv = xd[ci];
                        best = ci;
                    }
                int64_t oix = (bc * oh + y) * ow + x;
                od[oix] = bv;
                argmax[static_cast<size_t>(oix)] = best;
            }
    if (tape_needed(input)) {
        auto xn = input.node();
        out.attach({xn}, [xn, argmax = std::move(argmax)](detail::Node<T>& o) {
            auto& g = xn->ensure_grad();
            for (size_t i = 0; i < argmax.size(); ++i)
                g[static_cast<size_t>(argmax[i])] += o.grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
    if (input.ndim() != 4) throw DimensionError("global_avg_pool: input must be NCHW");
    int64_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
    Tensor<T> out({n, c, 1, 1});
    const T* xd = input.data().data();
    T* od = out.data().data();
    T inv = T(1) / static_cast<T>(hw);
    for (int64_t bc = 0; bc < n * c; ++bc) {
        T acc = 0;
        for (int64_t i = 0; i < hw; ++i) acc += xd[bc * hw + i];
        od[bc] = acc * inv;
    }
    if (tape_needed(input)) {
        auto xn = input.node();
        out.attach({xn}, [xn, hw, inv](detail::Node<T>& o) {
            auto& g = xn->ensure_grad();
            for (int64_t bc = 0; bc < static_cast<int64_t>(o.data.size()); ++bc)
                for (int64_t i = 0; i < hw; ++i) g[static_cast<size_t>(bc * hw + i)] += o.grad[static_cast<size_t>(bc)] * inv;
        });
    }
    return out;
}

// Normalizes over one axis (population variance) then applies gamma/beta
// indexed along that axis.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& input, int64_t axis, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = static_cast<T>(1e-6)) {
    check_axis(axis, input.ndim(), "layer_norm");
    const Shape& s = input.shape();
    int64_t extent = s[static_cast<size_t>(axis)];
    if (extent < 1) throw DimensionError("layer_norm: normalized axis extent < 1");
    if (gamma.numel() != extent || beta.numel() != extent)
        throw DimensionError("layer_norm: gamma/beta must have " + std::to_string(extent) + " elements");
    int64_t outer = 1, inner = 1;
    for (int64_t i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
    for (int64_t i = axis + 1; i < input.ndim(); ++i) inner *= s[static_cast<size_t>(i)];

    Tensor<T> out(input.shape());
    std::vector<T> xhat(static_cast<size_t>(input.numel()));
    std::vector<T> inv_std(static_cast<size_t>(outer * inner));
    const T* xd = input.data().data();
    const T* gd = gamma.data().data();
    const T* bd = beta.data().data();
    T* od = out.data().data();
    T inv_n = T(1) / static_cast<T>(extent);
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
            T mu = 0;
            for (int64_t k = 0; k < extent; ++k) mu += xd[(o * extent + k) * inner + in];
            mu *= inv_n;
            T var = 0;
            for (int64_t k = 0; k < extent; ++k) {
                T d = xd[(o * extent + k) * inner + in] - mu;
                var += d * d;
            }
            var *= inv_n;
            T istd = T(1) / std::sqrt(var + eps);
            inv_std[static_cast<size_t>(o * inner + in)] = istd;
            for (int64_t k = 0; k < extent; ++k) {
                int64_t ix = (o * extent + k) * inner + in;
                T xh = (xd[ix] - mu) * istd;
                xhat[static_cast<size_t>(ix)] = xh;
                od[ix] = gd[k] * xh + bd[k];
            }
        }

    bool needs = grad_recording_enabled() &&
                 (input.requires_grad() || gamma.requires_grad() || beta.requires_grad());
    if (needs) {
        auto xn = input.node();
        auto gn = gamma.node();
        auto bn = beta.node();
        out.attach({xn, gn, bn}, [xn, gn, bn, outer, inner, extent, inv_n,
                                  xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<T>& o) {
            T* gx = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
            T* gg = gn->requires_grad ? gn->ensure_grad().data() : nullptr;
            T* gb = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
            for (int64_t ou = 0; ou < outer; ++ou)
                for (int64_t in = 0; in < inner; ++in) {
                    T mean_dxhat = 0, mean_dxhat_xhat = 0;
                    for (int64_t k = 0; k < extent; ++k) {
                        int64_t ix = (ou * extent + k) * inner + in;
                        T go = o.grad[static_cast<size_t>(ix)];
                        T xh = xhat[static_cast<size_t>(ix)];
                        if (gg) gg[k] += go * xh;
                        if (gb) gb[k] += go;
                        T dxh = go * gn->data[static_cast<size_t>(k)];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh;
                    }
                    if (!gx) continue;
                    mean_dxhat *= inv_n;
                    mean_dxhat_xhat *= inv_n;
                    T istd = inv_std[static_cast<size_t>(ou * inner + in)];
                    for (int64_t k = 0; k < extent; ++k) {
                        int64_t ix = (ou * extent + k) * inner + in;
                        T dxh = o.grad[static_cast<size_t>(ix)] * gn->data[static_cast<size_t>(k)];
                        gx[ix] += istd * (dxh - mean_dxhat - xhat[static_cast<size_t>(ix)] * mean_dxhat_xhat);
                    }
                }
        });
    }
    debug_check_finite(out, "layer_norm");
    return out;
}

// Bilinear sampling at normalized coordinates (x, y) in [-1, 1], align-corners,
// zero padding outside. grid is [N, H', W', 2]; output [N, C, H', W'].
template <typename T>
Tensor<T> grid_sample_bilinear(const Tensor<T>& input, const Tensor<T>& grid) {
    if (input.ndim() != 4) throw DimensionError("grid_sample: input must be NCHW");
    if (grid.ndim() != 4 || grid.dim(3) != 2)
        throw DimensionError("grid_sample: grid must be [N,H,W,2]");
    if (grid.dim(0) != input.dim(0)) throw DimensionError("grid_sample: batch axis mismatch");
    int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    int64_t gh = grid.dim(1), gw = grid.dim(2);

    Tensor<T> out({n, c, gh, gw});
    const T* xd = input.data().data();
    const T* gd = grid.data().data();
    T* od = out.data().data();

    auto tap = [&](int64_t b, int64_t ch, int64_t iy, int64_t ix) -> T {
        if (iy < 0 || iy >= h || ix < 0 || ix >= w) return T(0);
        return xd[((b * c + ch) * h + iy) * w + ix];
    };

    for (int64_t b = 0; b < n; ++b)
        for (int64_t y = 0; y < gh; ++y)
            for (int64_t x = 0; x < gw; ++x) {
                int64_t gix = ((b * gh + y) * gw + x) * 2;
                T px = (gd[gix] + T(1)) * static_cast<T>(w - 1) / T(2);
                T py = (gd[gix + 1] + T(1)) * static_cast<T>(h - 1) / T(2);
                int64_t x0 = static_cast<int64_t>(std::floor(px));
                int64_t y0 = static_cast<int64_t>(std::floor(py));
                T fx = px - static_cast<T>(x0);
                T fy = py - static_cast<T>(y0);
                for (int64_t ch = 0; ch < c; ++ch) {
                    T v00 = tap(b, ch, y0, x0), v01 = tap(b, ch, y0, x0 + 1);
                    T v10 = tap(b, ch, y0 + 1, x0), v11 = tap(b, ch, y0 + 1, x0 + 1);
                    od[((b * c + ch) * gh + y) * gw + x] =
                        (T(1) - fy) * ((T(1) - fx) * v00 + fx * v01) +
                        fy * ((T(1) - fx) * v10 + fx * v11);
                }
            }

    if (tape_needed(input, grid)) {
        auto xn = input.node();
        auto gn = grid.node();
        out.attach({xn, gn}, [xn, gn, n, c, h, w, gh, gw](detail::Node<T>& o) {
            const T* xd2 = xn->data.data();
            const T* gd2 = gn->data.data();
            T* gx = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
            T* gg = gn->requires_grad ? gn->ensure_grad().data() : nullptr;
            auto tap2 = [&](int64_t b, int64_t ch, int64_t iy, int64_t ix) -> T {
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) return T(0);
                return xd2[((b * c + ch) * h + iy) * w + ix];
            };
            auto scatter = [&](int64_t b, int64_t ch, int64_t iy, int64_t ix, T v) {
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) return;
                gx[((b * c + ch) * h + iy) * w + ix] += v;
            };
            for (int64_t b = 0; b < n; ++b)
                for (int64_t y = 0; y < gh; ++y)
                    for (int64_t x = 0; x < gw; ++x) {
                        int64_t gix = ((b * gh + y) * gw + x) * 2;
                        T px = (gd2[gix] + T(1)) * static_cast<T>(w - 1) / T(2);
                        T py = (gd2[gix + 1] + T(1)) * static_cast<T>(h - 1) / T(2);
                        int64_t x0 = static_cast<int64_t>(std::floor(px));
                        int64_t y0 = static_cast<int64_t>(std::floor(py));
                        T fx = px - static_cast<T>(x0);
                        T fy = py - static_cast<T>(y0);
                        T dpx = 0, dpy = 0;
                        for (int64_t ch = 0; ch < c; ++ch) {
                            T go = o.grad[((b * c + ch) * gh + y) * gw + x];
                            if (go == T(0)) continue;
                            if (gx) {
                                scatter(b, ch, y0, x0, go * (T(1) - fy) * (T(1) - fx));
                                scatter(b, ch, y0, x0 + 1, go * (T(1) - fy) * fx);
                                scatter(b, ch, y0 + 1, x0, go * fy * (T(1) - fx));
                                scatter(b, ch, y0 + 1, x0 + 1, go * fy * fx);
                            }
                            if (gg) {
                                T v00 = tap2(b, ch, y0, x0), v01 = tap2(b, ch, y0, x0 + 1);
                                T v10 = tap2(b, ch, y0 + 1, x0), v11 = tap2(b, ch, y0 + 1, x0 + 1);
                                dpx += go * ((T(1) - fy) * (v01 - v00) + fy * (v11 - v10));
                                dpy += go * ((T(1) - fx) * (v10 - v00) + fx * (v11 - v01));
                            }
                        }
                        if (gg) {
                            gg[gix] += dpx * static_cast<T>(w - 1) / T(2);
                            gg[gix + 1] += dpy * static_cast<T>(h - 1) / T(2);
                        }
                    }
        });
    }
    debug_check_finite(out, "grid_sample_bilinear");
    return out;
}

// y[n,c,h,w] = x[n,c,h,w] * s, with s of shape [C] (shared) or [N, C] (per
// sample). Used for layer-scale and SE gating.
template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s) {
    if (x.ndim() != 4) throw DimensionError("scale_channels: input must be NCHW");
    int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    bool per_sample;
    if (s.ndim() == 1 && s.dim(0) == c)
        per_sample = false;
    else if (s.ndim() == 2 && s.dim(0) == n && s.dim(1) == c)
        per_sample = true;
    else
        throw DimensionError("scale_channels: scale must be [C] or [N,C], got " + shape_str(s.shape()));

    Tensor<T> out(x.shape());
    const T* xd = x.data().data();
    const T* sd = s.data().data();
    T* od = out.data().data();
    for (int64_t b = 0; b < n; ++b)
        for (int64_t ch = 0; ch < c; ++ch) {
            T sv = sd[per_sample ? b * c + ch : ch];
            const T* xp = xd + (b * c + ch) * hw;
            T* op = od + (b * c + ch) * hw;
            for (int64_t i = 0; i < hw; ++i) op[i] = xp[i] * sv;
        }
    if (tape_needed(x, s)) {
        auto xn = x.node();
        auto sn = s.node();
        out.attach({xn, sn}, [xn, sn, n, c, hw, per_sample](detail::Node<T>& o) {
            T* gx = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
            T* gs = sn->requires_grad ? sn->ensure_grad().data() : nullptr;
            for (int64_t b = 0; b < n; ++b)
                for (int64_t ch = 0; ch < c; ++ch) {
                    int64_t base = (b * c + ch) * hw;
                    T sv = sn->data[static_cast<size_t>(per_sample ? b * c + ch : ch)];
                    T acc = 0;
                    for (int64_t i = 0; i < hw; ++i) {
                        T go = o.grad[static_cast<size_t>(base + i)];
                        if (gx) gx[base + i] += go * sv;
                        acc += go * xn->data[static_cast<size_t>(base + i)];
                    }
                    if (gs) gs[per_sample ? b * c + ch : ch] += acc;
                }
        });
    }
    return out;
}

// Per-sample residual-branch drop (stochastic depth). Each kept sample is
// scaled by 1/(1-p) during training; dropped samples contribute exactly zero.
template <typename T>
Tensor<T> drop_path(const Tensor<T>& x, double drop_prob, bool training, Rng& rng) {
    if (!training || drop_prob <= 0.0) return x;
    int64_t n = x.dim(0);
    int64_t per = x.numel() / n;
    std::vector<T> mask(static_cast<size_t>(n));
    for (int64_t b = 0; b < n; ++b) {
        bool drop = rng.bernoulli(drop_prob);
        mask[static_cast<size_t>(b)] = drop ? T(0) : static_cast<T>(1.0 / (1.0 - drop_prob));
    }
    Tensor<T> out(x.shape());
    const T* xd = x.data().data();
    T* od = out.data().data();
    for (int64_t b = 0; b < n; ++b) {
        T m = mask[static_cast<size_t>(b)];
        for (int64_t i = 0; i < per; ++i) od[b * per + i] = (m == T(0)) ? T(0) : xd[b * per + i] * m;
    }
    if (tape_needed(x)) {
        auto xn = x.node();
        out.attach({xn}, [xn, per, mask = std::move(mask)](detail::Node<T>& o) {
            auto& g = xn->ensure_grad();
            for (size_t b = 0; b < mask.size(); ++b) {
                T m = mask[b];
                if (m == T(0)) continue;
                for (int64_t i = 0; i < per; ++i)
                    g[b * static_cast<size_t>(per) + static_cast<size_t>(i)] +=
                        o.grad[b * static_cast<size_t>(per) + static_cast<size_t>(i)] * m;
            }
        });
    }
    return out;
}

// Label-smoothed cross entropy, mean over the batch.
// q = (1-eps) * onehot + eps / K against p = softmax(logits).
template <typename T>
Tensor<T> cross_entropy_smoothed(const Tensor<T>& logits, const std::vector<int64_t>& targets,
                                 double epsilon) {
    if (logits.ndim() != 2) throw DimensionError("cross_entropy: logits must be [N, classes]");
    int64_t n = logits.dim(0), k = logits.dim(1);
    if (static_cast<int64_t>(targets.size()) != n)
        throw DimensionError("cross_entropy: target count mismatch");
    for (size_t i = 0; i < targets.size(); ++i)
        if (targets[i] < 0 || targets[i] >= k)
            throw DataError("cross_entropy: target " + std::to_string(targets[i]) + " at row " +
                            std::to_string(i) + " outside 0.." + std::to_string(k - 1));

    const T* ld = logits.data().data();
    std::vector<T> probs(static_cast<size_t>(n * k));
    double loss = 0;
    double off = epsilon / static_cast<double>(k);
    for (int64_t b = 0; b < n; ++b) {
        T mx = ld[b * k];
        for (int64_t j = 1; j < k; ++j) mx = std::max(mx, ld[b * k + j]);
        double denom = 0;
        for (int64_t j = 0; j < k; ++j) denom += std::exp(static_cast<double>(ld[b * k + j] - mx));
        double log_denom = std::log(denom);
        for (int64_t j = 0; j < k; ++j) {
            double logp = static_cast<double>(ld[b * k + j] - mx) - log_denom;
            probs[static_cast<size_t>(b * k + j)] = static_cast<T>(std::exp(logp));
            double q = off + (j == targets[static_cast<size_t>(b)] ? 1.0 - epsilon : 0.0);
            loss -= q * logp;
        }
    }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(loss / static_cast<double>(n)));
    if (tape_needed(logits)) {
        auto lnode = logits.node();
        out.attach({lnode}, [lnode, targets, n, k, off, epsilon,
                             probs = std::move(probs)](detail::Node<T>& o) {
            auto& g = lnode->ensure_grad();
            T go = o.grad[0] / static_cast<T>(n);
            for (int64_t b = 0; b < n; ++b)
                for (int64_t j = 0; j < k; ++j) {
                    double q = off + (j == targets[static_cast<size_t>(b)] ? 1.0 - epsilon : 0.0);
                    g[static_cast<size_t>(b * k + j)] +=
                        go * (probs[static_cast<size_t>(b * k + j)] - static_cast<T>(q));
                }
        });
    }
    debug_check_finite(out, "cross_entropy_smoothed");
    return out;
}

// Per-sample population variance of all attention entries around their mean,
// averaged over the batch. Zero exactly for uniform attention.
template <typename T>
Tensor<T> sa_regularizer(const Tensor<T>& w) {
    if (w.ndim() != 3) throw DimensionError("sa_regularizer: W must be [N, T, T]");
    int64_t n = w.dim(0);
    int64_t m = w.dim(1) * w.dim(2);
    const T* wd = w.data().data();
    double total = 0;
    std::vector<T> means(static_cast<size_t>(n));
    for (int64_t b = 0; b < n; ++b) {
        double mu = 0;
        for (int64_t i = 0; i < m; ++i) mu += wd[b * m + i];
        mu /= static_cast<double>(m);
        means[static_cast<size_t>(b)] = static_cast<T>(mu);
        double var = 0;
        for (int64_t i = 0; i < m; ++i) {
            double d = static_cast<double>(wd[b * m + i]) - mu;
            var += d * d;
        }
        total += var / static_cast<double>(m);
    }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(n)));
    if (tape_needed(w)) {
        auto wn = w.node();
        out.attach({wn}, [wn, n, m, means = std::move(means)](detail::Node<T>& o) {
            auto& g = wn->ensure_grad();
            T scale = o.grad[0] * T(2) / (static_cast<T>(m) * static_cast<T>(n));
            for (int64_t b = 0; b < n; ++b)
                for (int64_t i = 0; i < m; ++i)
                    g[static_cast<size_t>(b * m + i)] +=
                        scale * (wn->data[static_cast<size_t>(b * m + i)] - means[static_cast<size_t>(b)]);
        });
    }
    return out;
}

}  // namespace emonext
