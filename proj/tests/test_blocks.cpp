#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "emonext/blocks.hpp"
#include "emonext/nn_ops.hpp"
#include "emonext/rng.hpp"

using namespace emonext;

namespace {

Tensor<double> rand_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
    REQUIRE(a.shape() == b.shape());
    double m = 0;
    for (size_t i = 0; i < a.data().size(); ++i)
        m = std::max(m, std::fabs(a.data()[i] - b.data()[i]));
    return m;
}

// naive sliding-window convolution, written independently of the library op
std::vector<double> ref_conv2d(const std::vector<double>& x, int64_t n, int64_t cin, int64_t h,
                               int64_t w, const std::vector<double>& wt, int64_t cout, int64_t kh,
                               int64_t kw, const std::vector<double>& bias, int64_t stride,
                               int64_t pad, int64_t groups = 1) {
    int64_t oh = (h + 2 * pad - kh) / stride + 1;
    int64_t ow = (w + 2 * pad - kw) / stride + 1;
    int64_t cin_g = cin / groups;
    int64_t cout_g = cout / groups;
    std::vector<double> out(static_cast<size_t>(n * cout * oh * ow), 0.0);
    for (int64_t b = 0; b < n; ++b)
        for (int64_t oc = 0; oc < cout; ++oc) {
            int64_t g = oc / cout_g;
            for (int64_t oy = 0; oy < oh; ++oy)
                for (int64_t ox = 0; ox < ow; ++ox) {
                    double acc = bias.empty() ? 0.0 : bias[static_cast<size_t>(oc)];
                    for (int64_t ic = 0; ic < cin_g; ++ic)
                        for (int64_t ky = 0; ky < kh; ++ky)
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                int64_t iy = oy * stride - pad + ky;
                                int64_t ix = ox * stride - pad + kx;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                                int64_t full_ic = g * cin_g + ic;
                                acc += x[static_cast<size_t>(((b * cin + full_ic) * h + iy) * w +
                                                             ix)] *
                                       wt[static_cast<size_t>(((oc * cin_g + ic) * kh + ky) * kw +
                                                              kx)];
                            }
                    out[static_cast<size_t>(((b * cout + oc) * oh + oy) * ow + ox)] = acc;
                }
        }
    return out;
}

// channel-axis layer norm at each (n, y, x) position, population variance
std::vector<double> ref_ln_channels(const std::vector<double>& x, int64_t n, int64_t c, int64_t h,
                                    int64_t w, const std::vector<double>& gamma,
                                    const std::vector<double>& beta, double eps = 1e-6) {
    std::vector<double> out(x.size());
    for (int64_t b = 0; b < n; ++b)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t xx = 0; xx < w; ++xx) {
                double mean = 0;
                for (int64_t ch = 0; ch < c; ++ch)
                    mean += x[static_cast<size_t>(((b * c + ch) * h + y) * w + xx)];
                mean /= static_cast<double>(c);
                double var = 0;
                for (int64_t ch = 0; ch < c; ++ch) {
                    double d = x[static_cast<size_t>(((b * c + ch) * h + y) * w + xx)] - mean;
                    var += d * d;
                }
                var /= static_cast<double>(c);
                double istd = 1.0 / std::sqrt(var + eps);
                for (int64_t ch = 0; ch < c; ++ch) {
                    size_t i = static_cast<size_t>(((b * c + ch) * h + y) * w + xx);
                    out[i] = (x[i] - mean) * istd * gamma[static_cast<size_t>(ch)] +
                             beta[static_cast<size_t>(ch)];
                }
            }
    return out;
}

double ref_gelu(double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); }
double ref_sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

TEST_CASE("stn is the identity at initialization") {
    Rng rng(7);
    auto p = STNParams<double>::init(1, 32, rng);
    auto x = rand_tensor({2, 1, 32, 32}, rng);

    auto theta = localization_net(x, p);
    REQUIRE(theta.shape() == Shape{2, 2, 3});
    const double id[6] = {1, 0, 0, 0, 1, 0};
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t i = 0; i < 6; ++i)
            CHECK(theta.data()[static_cast<size_t>(b * 6 + i)] == id[i]);

    auto y = stn_forward(x, p);
    CHECK(max_abs_diff(y, x) < 1e-5);

    // two identical images produce identical transforms
    Tensor<double> xx({2, 1, 32, 32});
    std::copy(x.data().begin(), x.data().begin() + 32 * 32, xx.data().begin());
    std::copy(x.data().begin(), x.data().begin() + 32 * 32, xx.data().begin() + 32 * 32);
    auto t2 = localization_net(xx, p);
    for (int64_t i = 0; i < 6; ++i)
        CHECK(t2.data()[static_cast<size_t>(i)] == t2.data()[static_cast<size_t>(6 + i)]);

    CHECK_THROWS_AS(localization_net(rand_tensor({1, 1, 16, 16}, rng), p), DimensionError);
}

TEST_CASE("localization net on zero input returns the fc2 bias transform") {
    Rng rng(11);
    auto p = STNParams<double>::init(1, 16, rng);
    for (auto& v : p.fc2_w.data()) v = rng.normal(0.0, 0.1);
    p.fc2_b = rand_tensor({6}, rng);
    Tensor<double> zero({1, 1, 16, 16});
    auto theta = localization_net(zero, p);
    // all activations vanish (zero conv/fc biases), so only the bias survives
    for (int64_t i = 0; i < 6; ++i)
        CHECK(theta.data()[static_cast<size_t>(i)] ==
              doctest::Approx(p.fc2_b.data()[static_cast<size_t>(i)]).epsilon(1e-12));
}

TEST_CASE("affine_grid lattices") {
    auto theta = identity_theta<double>(1);
    auto grid = affine_grid(theta, 3, 3);
    REQUIRE(grid.shape() == Shape{1, 3, 3, 2});
    const double lattice[3] = {-1.0, 0.0, 1.0};
    for (int64_t y = 0; y < 3; ++y)
        for (int64_t x = 0; x < 3; ++x) {
            CHECK(grid.data()[static_cast<size_t>((y * 3 + x) * 2 + 0)] ==
                  doctest::Approx(lattice[x]));
            CHECK(grid.data()[static_cast<size_t>((y * 3 + x) * 2 + 1)] ==
                  doctest::Approx(lattice[y]));
        }

    Tensor<double> half({1, 2, 3}, {0.5, 0, 0, 0, 0.5, 0});
    auto gh = affine_grid(half, 3, 3);
    for (int64_t y = 0; y < 3; ++y)
        for (int64_t x = 0; x < 3; ++x) {
            CHECK(gh.data()[static_cast<size_t>((y * 3 + x) * 2 + 0)] ==
                  doctest::Approx(0.5 * lattice[x]));
            CHECK(gh.data()[static_cast<size_t>((y * 3 + x) * 2 + 1)] ==
                  doctest::Approx(0.5 * lattice[y]));
        }

    Tensor<double> shift({1, 2, 3}, {1, 0, 0.5, 0, 1, 0});
    auto gs = affine_grid(shift, 2, 2);
    const double l2[2] = {-1.0, 1.0};
    for (int64_t y = 0; y < 2; ++y)
        for (int64_t x = 0; x < 2; ++x) {
            CHECK(gs.data()[static_cast<size_t>((y * 2 + x) * 2 + 0)] ==
                  doctest::Approx(l2[x] + 0.5));
            CHECK(gs.data()[static_cast<size_t>((y * 2 + x) * 2 + 1)] == doctest::Approx(l2[y]));
        }

    CHECK_THROWS_AS(affine_grid(Tensor<double>({1, 3, 2}), 2, 2), DimensionError);
    CHECK_THROWS_AS(affine_grid(theta, 0, 2), DimensionError);
}

TEST_CASE("stn with a fixed 0.5-scale transform matches a bilinear zoom oracle") {
    Rng rng(13);
    auto p = STNParams<double>::init(1, 8, rng);
    p.fc2_w = Tensor<double>::zeros({6, 32});
    p.fc2_b = Tensor<double>({6}, {0.5, 0, 0, 0, 0.5, 0});
    auto x = rand_tensor({1, 1, 8, 8}, rng);

    auto y = stn_forward(x, p);
    REQUIRE(y.shape() == x.shape());

    // direct bilinear resample of the centered half-size window
    for (int64_t oy = 0; oy < 8; ++oy)
        for (int64_t ox = 0; ox < 8; ++ox) {
            double xn = 0.5 * (-1.0 + 2.0 * static_cast<double>(ox) / 7.0);
            double yn = 0.5 * (-1.0 + 2.0 * static_cast<double>(oy) / 7.0);
            double px = (xn + 1.0) * 3.5;
            double py = (yn + 1.0) * 3.5;
            int64_t x0 = static_cast<int64_t>(std::floor(px));
            int64_t y0 = static_cast<int64_t>(std::floor(py));
            double fx = px - static_cast<double>(x0);
            double fy = py - static_cast<double>(y0);
            auto at = [&](int64_t yy, int64_t xx) {
                if (yy < 0 || yy >= 8 || xx < 0 || xx >= 8) return 0.0;
                return x.data()[static_cast<size_t>(yy * 8 + xx)];
            };
            double expect = at(y0, x0) * (1 - fy) * (1 - fx) + at(y0, x0 + 1) * (1 - fy) * fx +
                            at(y0 + 1, x0) * fy * (1 - fx) + at(y0 + 1, x0 + 1) * fy * fx;
            CHECK(y.data()[static_cast<size_t>(oy * 8 + ox)] ==
                  doctest::Approx(expect).epsilon(1e-12));
        }
}

TEST_CASE("convnext_block residual identities") {
    Rng rng(17);
    auto p = BlockParams<double>::init(4, rng);
    auto x = rand_tensor({2, 4, 5, 5}, rng);

    SUBCASE("zero layer scale returns the input exactly") {
        p.layer_scale = Tensor<double>::zeros({4});
        Rng r(0);
        auto y = convnext_block(x, p, 0.0, false, r);
        for (size_t i = 0; i < x.data().size(); ++i) CHECK(y.data()[i] == x.data()[i]);
    }

    SUBCASE("a fired drop event returns the input exactly") {
        for (auto& v : p.layer_scale.data()) v = rng.uniform(0.5, 1.0);
        Rng r(0);
        auto y = convnext_block(x, p, 1.0, true, r);
        for (size_t i = 0; i < x.data().size(); ++i) CHECK(y.data()[i] == x.data()[i]);
    }

    SUBCASE("channel mismatch throws") {
        Rng r(0);
        CHECK_THROWS_AS(convnext_block(rand_tensor({1, 3, 5, 5}, rng), p, 0.0, false, r),
                        DimensionError);
    }
}

TEST_CASE("convnext_block matches a step-by-step composition oracle") {
    Rng rng(19);
    const int64_t n = 2, c = 4, h = 9, w = 9;
    auto p = BlockParams<double>::init(c, rng);
    for (auto& v : p.dw_bias.data()) v = rng.uniform(-0.2, 0.2);
    for (auto& v : p.ln_gamma.data()) v = rng.uniform(0.5, 1.5);
    for (auto& v : p.ln_beta.data()) v = rng.uniform(-0.2, 0.2);
    for (auto& v : p.pw1_bias.data()) v = rng.uniform(-0.2, 0.2);
    for (auto& v : p.pw2_bias.data()) v = rng.uniform(-0.2, 0.2);
    for (auto& v : p.layer_scale.data()) v = rng.uniform(0.1, 1.0);
    auto x = rand_tensor({n, c, h, w}, rng);

    Rng r(0);
    auto y = convnext_block(x, p, 0.0, false, r);

    auto dw = ref_conv2d(x.data(), n, c, h, w, p.dw_weight.data(), c, 7, 7, p.dw_bias.data(), 1, 3,
                         /*groups=*/c);
    auto ln = ref_ln_channels(dw, n, c, h, w, p.ln_gamma.data(), p.ln_beta.data());
    auto up = ref_conv2d(ln, n, c, h, w, p.pw1_weight.data(), 4 * c, 1, 1, p.pw1_bias.data(), 1, 0);
    for (auto& v : up) v = ref_gelu(v);
    auto down =
        ref_conv2d(up, n, 4 * c, h, w, p.pw2_weight.data(), c, 1, 1, p.pw2_bias.data(), 1, 0);
    double worst = 0;
    for (int64_t b = 0; b < n; ++b)
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t i = 0; i < h * w; ++i) {
                size_t idx = static_cast<size_t>((b * c + ch) * h * w + i);
                double expect =
                    x.data()[idx] + p.layer_scale.data()[static_cast<size_t>(ch)] * down[idx];
                worst = std::max(worst, std::fabs(expect - y.data()[idx]));
            }
    CHECK(worst < 1e-10);
}

TEST_CASE("se_block saturated gates") {
    Rng rng(23);
    auto p = SEParams<double>::init(6, 2, rng);
    auto x = rand_tensor({2, 6, 3, 3}, rng);

    p.fc2_w = Tensor<double>::zeros({6, 3});
    p.fc2_b = Tensor<double>::full({6}, 40.0);
    auto y = se_block(x, p);
    CHECK(max_abs_diff(y, x) < 1e-10);

    p.fc2_b = Tensor<double>::full({6}, -40.0);
    auto y0 = se_block(x, p);
    for (double v : y0.data()) CHECK(std::fabs(v) < 1e-10);

    CHECK_THROWS_AS(se_block(rand_tensor({1, 5, 3, 3}, rng), p), DimensionError);
}

TEST_CASE("se_block matches a step-by-step oracle and keeps gates in (0,1)") {
    Rng rng(29);
    const int64_t n = 2, c = 5, h = 4, w = 4;
    auto p = SEParams<double>::init(c, 2, rng);
    for (auto& v : p.fc1_b.data()) v = rng.uniform(-0.3, 0.3);
    for (auto& v : p.fc2_b.data()) v = rng.uniform(-0.3, 0.3);
    auto x = rand_tensor({n, c, h, w}, rng);

    auto y = se_block(x, p);
    REQUIRE(y.shape() == x.shape());

    int64_t mid = SEParams<double>::bottleneck(c, 2);
    for (int64_t b = 0; b < n; ++b) {
        std::vector<double> gap(static_cast<size_t>(c), 0.0);
        for (int64_t ch = 0; ch < c; ++ch) {
            for (int64_t i = 0; i < h * w; ++i)
                gap[static_cast<size_t>(ch)] +=
                    x.data()[static_cast<size_t>((b * c + ch) * h * w + i)];
            gap[static_cast<size_t>(ch)] /= static_cast<double>(h * w);
        }
        std::vector<double> hid(static_cast<size_t>(mid));
        for (int64_t m = 0; m < mid; ++m) {
            double acc = p.fc1_b.data()[static_cast<size_t>(m)];
            for (int64_t ch = 0; ch < c; ++ch)
                acc += p.fc1_w.data()[static_cast<size_t>(m * c + ch)] *
                       gap[static_cast<size_t>(ch)];
            hid[static_cast<size_t>(m)] = std::max(0.0, acc);
        }
        for (int64_t ch = 0; ch < c; ++ch) {
            double acc = p.fc2_b.data()[static_cast<size_t>(ch)];
            for (int64_t m = 0; m < mid; ++m)
                acc += p.fc2_w.data()[static_cast<size_t>(ch * mid + m)] *
                       hid[static_cast<size_t>(m)];
            double gate = ref_sigmoid(acc);
            CHECK(gate > 0.0);
            CHECK(gate < 1.0);
            for (int64_t i = 0; i < h * w; ++i) {
                size_t idx = static_cast<size_t>((b * c + ch) * h * w + i);
                CHECK(y.data()[idx] == doctest::Approx(x.data()[idx] * gate).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("patchify_stem shapes and conv oracle") {
    Rng rng(31);
    auto p224 = StemParams<double>::init(1, 3, rng);
    auto big = patchify_stem(Tensor<double>({1, 1, 224, 224}), p224);
    CHECK(big.shape() == Shape{1, 3, 56, 56});

    auto small = patchify_stem(Tensor<double>({1, 1, 48, 48}), p224);
    CHECK(small.shape() == Shape{1, 3, 12, 12});

    CHECK_THROWS_AS(patchify_stem(Tensor<double>({1, 1, 50, 50}), p224), DimensionError);

    const int64_t n = 1, cin = 2, cout = 5, s = 8;
    auto p = StemParams<double>::init(cin, cout, rng);
    for (auto& v : p.bias.data()) v = rng.uniform(-0.5, 0.5);
    for (auto& v : p.ln_gamma.data()) v = rng.uniform(0.5, 1.5);
    for (auto& v : p.ln_beta.data()) v = rng.uniform(-0.2, 0.2);
    auto x = rand_tensor({n, cin, s, s}, rng);
    auto y = patchify_stem(x, p);
    REQUIRE(y.shape() == Shape{n, cout, 2, 2});

    auto conv = ref_conv2d(x.data(), n, cin, s, s, p.weight.data(), cout, 4, 4, p.bias.data(), 4, 0);
    auto ln = ref_ln_channels(conv, n, cout, 2, 2, p.ln_gamma.data(), p.ln_beta.data());
    double worst = 0;
    for (size_t i = 0; i < ln.size(); ++i) worst = std::max(worst, std::fabs(ln[i] - y.data()[i]));
    CHECK(worst < 1e-10);
}

TEST_CASE("downsample_layer shapes and oracle") {
    Rng rng(37);
    auto pstage = DownsampleParams<double>::init(96, 192, rng);
    auto big = downsample_layer(Tensor<double>({1, 96, 56, 56}), pstage);
    CHECK(big.shape() == Shape{1, 192, 28, 28});

    auto p47 = DownsampleParams<double>::init(4, 8, rng);
    auto mid = downsample_layer(Tensor<double>({1, 4, 14, 14}), p47);
    CHECK(mid.shape() == Shape{1, 8, 7, 7});

    CHECK_THROWS_AS(downsample_layer(Tensor<double>({1, 4, 7, 7}), p47), DimensionError);

    const int64_t n = 2, cin = 3, cout = 4, s = 6;
    auto p = DownsampleParams<double>::init(cin, cout, rng);
    for (auto& v : p.bias.data()) v = rng.uniform(-0.5, 0.5);
    for (auto& v : p.ln_gamma.data()) v = rng.uniform(0.5, 1.5);
    for (auto& v : p.ln_beta.data()) v = rng.uniform(-0.2, 0.2);
    auto x = rand_tensor({n, cin, s, s}, rng);
    auto y = downsample_layer(x, p);
    REQUIRE(y.shape() == Shape{n, cout, 3, 3});

    auto ln = ref_ln_channels(x.data(), n, cin, s, s, p.ln_gamma.data(), p.ln_beta.data());
    auto conv = ref_conv2d(ln, n, cin, s, s, p.weight.data(), cout, 2, 2, p.bias.data(), 2, 0);
    double worst = 0;
    for (size_t i = 0; i < conv.size(); ++i)
        worst = std::max(worst, std::fabs(conv[i] - y.data()[i]));
    CHECK(worst < 1e-10);
}

TEST_CASE("blocks preserve shape and are deterministic in inference mode") {
    Rng rng(41);
    for (int64_t c : {96, 128}) {
        auto bp = BlockParams<double>::init(c, rng);
        auto sp = SEParams<double>::init(c, 16, rng);
        auto x = rand_tensor({1, c, 4, 4}, rng);
        Rng r1(0), r2(0);
        auto y1 = convnext_block(x, bp, 0.3, false, r1);
        auto y2 = convnext_block(x, bp, 0.3, false, r2);
        CHECK(y1.shape() == x.shape());
        for (size_t i = 0; i < y1.data().size(); ++i) CHECK(y1.data()[i] == y2.data()[i]);
        auto z1 = se_block(x, sp);
        auto z2 = se_block(x, sp);
        CHECK(z1.shape() == x.shape());
        for (size_t i = 0; i < z1.data().size(); ++i) CHECK(z1.data()[i] == z2.data()[i]);
    }
}
