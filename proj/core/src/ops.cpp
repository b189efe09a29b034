// SPDX-License-Identifier: Apache-2.0
#include "cbdes/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "gemm.hpp"

namespace cbdes {

namespace {

struct ConvGeometry {
    std::size_t batch, in_channels, height, width;
    std::size_t out_channels, kh, kw, stride, padding, groups;
    std::size_t out_h, out_w;

    std::size_t group_in() const { return in_channels / groups; }
    std::size_t group_out() const { return out_channels / groups; }
    std::size_t col_rows() const { return group_in() * kh * kw; }
    std::size_t col_cols() const { return out_h * out_w; }
};

// Gathers the receptive fields of one (image, group) into a
// [Cg*kh*kw, Ho*Wo] matrix.
void im2col(const ConvGeometry& g, const double* image, std::size_t group, double* col) {
    const std::size_t plane = g.height * g.width;
    const std::size_t cols = g.col_cols();
    for (std::size_t c = 0; c < g.group_in(); ++c) {
        const double* src = image + (group * g.group_in() + c) * plane;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                double* dst = col + ((c * g.kh + ky) * g.kw + kx) * cols;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
                        const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.height) &&
                                            ix < static_cast<long>(g.width);
                        dst[oy * g.out_w + ox] = inside ? src[iy * g.width + ix] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im(const ConvGeometry& g, const double* col, std::size_t group, double* image_grad) {
    const std::size_t plane = g.height * g.width;
    const std::size_t cols = g.col_cols();
    for (std::size_t c = 0; c < g.group_in(); ++c) {
        double* dst = image_grad + (group * g.group_in() + c) * plane;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const double* src = col + ((c * g.kh + ky) * g.kw + kx) * cols;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
                    if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
                        if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
                        dst[iy * g.width + ix] += src[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
}

// Index of axis 1 for a flat offset into a tensor with `inner` elements
// per channel slice.
inline std::size_t channel_of(std::size_t flat, std::size_t channels, std::size_t inner) {
    return (flat / inner) % channels;
}

std::size_t inner_size(const Shape& s) {
    std::size_t inner = 1;
    for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
    return inner;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding, std::size_t groups) {
    require_rank(input, 4, "conv2d input");
    require_rank(weight, 4, "conv2d weight");
    if (stride == 0) throw ConfigError("conv2d: stride must be at least 1");
    if (groups == 0) throw ConfigError("conv2d: groups must be at least 1");
    ConvGeometry g{};
    g.batch = input.dim(0);
    g.in_channels = input.dim(1);
    g.height = input.dim(2);
    g.width = input.dim(3);
    g.out_channels = weight.dim(0);
    g.kh = weight.dim(2);
    g.kw = weight.dim(3);
    g.stride = stride;
    g.padding = padding;
    g.groups = groups;
    if (g.in_channels % groups != 0 || g.out_channels % groups != 0)
        throw DimensionError("conv2d: channels not divisible by groups");
    if (weight.dim(1) * groups != g.in_channels)
        throw DimensionError("conv2d: input has " + std::to_string(g.in_channels) +
                             " channels but weight expects " + std::to_string(weight.dim(1) * groups));
    if (g.kh % 2 == 0 || g.kw % 2 == 0) throw DimensionError("conv2d: kernel sizes must be odd");
    if (g.height + 2 * padding < g.kh || g.width + 2 * padding < g.kw)
        throw DimensionError("conv2d: kernel larger than padded input");
    if (bias.defined()) require_shape(bias, {g.out_channels}, "conv2d bias");
    g.out_h = (g.height + 2 * padding - g.kh) / stride + 1;
    g.out_w = (g.width + 2 * padding - g.kw) / stride + 1;

    const std::size_t in_image = g.in_channels * g.height * g.width;
    const std::size_t out_plane = g.out_h * g.out_w;
    const std::size_t out_image = g.out_channels * out_plane;
    const std::size_t wg = g.group_out() * g.col_rows();
    std::vector<double> out(g.batch * out_image);
    std::vector<double> col(g.col_rows() * g.col_cols());
    const double* x = input.data().data();
    const double* w = weight.data().data();
    for (std::size_t b = 0; b < g.batch; ++b) {
        for (std::size_t grp = 0; grp < groups; ++grp) {
            im2col(g, x + b * in_image, grp, col.data());
            double* dst = out.data() + b * out_image + grp * g.group_out() * out_plane;
            detail::gemm(g.group_out(), out_plane, g.col_rows(), w + grp * wg, col.data(), dst, false);
        }
        if (bias.defined()) {
            const auto bv = bias.data();
            for (std::size_t c = 0; c < g.out_channels; ++c) {
                double* dst = out.data() + b * out_image + c * out_plane;
                for (std::size_t i = 0; i < out_plane; ++i) dst[i] += bv[c];
            }
        }
    }

    return make_result(
        {g.batch, g.out_channels, g.out_h, g.out_w}, std::move(out), {input, weight, bias},
        [input, weight, bias, g, in_image, out_image, out_plane, wg](std::span<const double>,
                                                                     std::span<const double> gy) {
            auto gx = grad_sink(input);
            auto gw = grad_sink(weight);
            auto gb = grad_sink(bias);
            const double* x = input.data().data();
            const double* w = weight.data().data();
            std::vector<double> col(g.col_rows() * g.col_cols());
            std::vector<double> dcol(col.size());
            std::vector<std::vector<double>> wt(g.groups);
            if (!gx.empty())
                for (std::size_t grp = 0; grp < g.groups; ++grp)
                    wt[grp] = detail::transposed(g.group_out(), g.col_rows(), w + grp * wg);
            for (std::size_t b = 0; b < g.batch; ++b) {
                for (std::size_t grp = 0; grp < g.groups; ++grp) {
                    const double* dy = gy.data() + b * out_image + grp * g.group_out() * out_plane;
                    if (!gw.empty()) {
                        im2col(g, x + b * in_image, grp, col.data());
                        auto colt = detail::transposed(g.col_rows(), g.col_cols(), col.data());
                        detail::gemm(g.group_out(), g.col_rows(), out_plane, dy, colt.data(),
                                     gw.data() + grp * wg, true);
                    }
                    if (!gx.empty()) {
                        detail::gemm(g.col_rows(), out_plane, g.group_out(), wt[grp].data(), dy, dcol.data(),
                                     false);
                        col2im(g, dcol.data(), grp, gx.data() + b * in_image);
                    }
                }
                if (!gb.empty())
                    for (std::size_t c = 0; c < g.out_channels; ++c) {
                        const double* dy = gy.data() + b * out_image + c * out_plane;
                        double acc = 0.0;
                        for (std::size_t i = 0; i < out_plane; ++i) acc += dy[i];
                        gb[c] += acc;
                    }
            }
        });
}

Tensor maxpool2x2(const Tensor& input) {
    require_rank(input, 4, "maxpool2x2 input");
    const auto& s = input.shape();
    const std::size_t h = s[2], w = s[3];
    if (h % 2 != 0 || w % 2 != 0)
        throw DimensionError("maxpool2x2: spatial dims must be even, got " + to_string(s));
    const std::size_t planes = s[0] * s[1];
    const std::size_t oh = h / 2, ow = w / 2;
    std::vector<double> out(planes * oh * ow);
    std::vector<std::size_t> argmax(out.size());
    const auto x = input.data();
    for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                const std::size_t base = p * h * w + 2 * oy * w + 2 * ox;
                const std::size_t cand[4] = {base, base + 1, base + w, base + w + 1};
                std::size_t best = cand[0];
                for (int i = 1; i < 4; ++i)
                    if (x[cand[i]] > x[best]) best = cand[i];
                const std::size_t o = (p * oh + oy) * ow + ox;
                out[o] = x[best];
                argmax[o] = best;
            }
        }
    }
    return make_result({s[0], s[1], oh, ow}, std::move(out), {input},
                       [input, argmax = std::move(argmax)](std::span<const double>, std::span<const double> gy) {
                           auto gx = grad_sink(input);
                           for (std::size_t i = 0; i < gy.size(); ++i) gx[argmax[i]] += gy[i];
                       });
}

Tensor channel_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta, RunningStats& stats,
                    bool training) {
    if (input.rank() != 4 && input.rank() != 2)
        throw DimensionError("channel_norm: expected [B,C,H,W] or [B,C], got " + to_string(input.shape()));
    const std::size_t batch = input.dim(0);
    const std::size_t channels = input.dim(1);
    const std::size_t inner = inner_size(input.shape());
    require_shape(gamma, {channels}, "channel_norm gamma");
    require_shape(beta, {channels}, "channel_norm beta");
    require_shape(stats.mean, {channels}, "channel_norm running mean");
    require_shape(stats.var, {channels}, "channel_norm running var");
    const std::size_t count = batch * inner;
    if (count == 0) throw DimensionError("channel_norm: empty batch");

    const auto x = input.data();
    const auto ga = gamma.data();
    const auto be = beta.data();
    std::vector<double> mean(channels, 0.0), inv_std(channels);
    if (training) {
        std::vector<double> var(channels, 0.0);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t c = 0; c < channels; ++c) {
                const double* src = x.data() + (b * channels + c) * inner;
                for (std::size_t i = 0; i < inner; ++i) mean[c] += src[i];
            }
        for (auto& m : mean) m /= static_cast<double>(count);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t c = 0; c < channels; ++c) {
                const double* src = x.data() + (b * channels + c) * inner;
                for (std::size_t i = 0; i < inner; ++i) {
                    const double d = src[i] - mean[c];
                    var[c] += d * d;
                }
            }
        auto rm = stats.mean.data();
        auto rv = stats.var.data();
        for (std::size_t c = 0; c < channels; ++c) {
            const double biased = var[c] / static_cast<double>(count);
            const double unbiased = count > 1 ? var[c] / static_cast<double>(count - 1) : biased;
            inv_std[c] = 1.0 / std::sqrt(biased + kNormEpsilon);
            rm[c] = (1.0 - stats.momentum) * rm[c] + stats.momentum * mean[c];
            rv[c] = (1.0 - stats.momentum) * rv[c] + stats.momentum * unbiased;
        }
    } else {
        const auto rm = stats.mean.data();
        const auto rv = stats.var.data();
        for (std::size_t c = 0; c < channels; ++c) {
            mean[c] = rm[c];
            inv_std[c] = 1.0 / std::sqrt(rv[c] + kNormEpsilon);
        }
    }

    std::vector<double> xhat(x.size());
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const std::size_t c = channel_of(i, channels, inner);
        xhat[i] = (x[i] - mean[c]) * inv_std[c];
        out[i] = ga[c] * xhat[i] + be[c];
    }

    return make_result(
        input.shape(), std::move(out), {input, gamma, beta},
        [input, gamma, beta, training, channels, inner, count, inv_std = std::move(inv_std),
         xhat = std::move(xhat)](std::span<const double>, std::span<const double> gy) {
            auto gx = grad_sink(input);
            auto gg = grad_sink(gamma);
            auto gb = grad_sink(beta);
            const auto ga = gamma.data();
            std::vector<double> sum_dy(channels, 0.0), sum_dy_xhat(channels, 0.0);
            for (std::size_t i = 0; i < gy.size(); ++i) {
                const std::size_t c = channel_of(i, channels, inner);
                sum_dy[c] += gy[i];
                sum_dy_xhat[c] += gy[i] * xhat[i];
            }
            for (std::size_t c = 0; c < channels; ++c) {
                if (!gg.empty()) gg[c] += sum_dy_xhat[c];
                if (!gb.empty()) gb[c] += sum_dy[c];
            }
            if (gx.empty()) return;
            const double n = static_cast<double>(count);
            for (std::size_t i = 0; i < gy.size(); ++i) {
                const std::size_t c = channel_of(i, channels, inner);
                if (training)
                    gx[i] += ga[c] * inv_std[c] * (gy[i] - sum_dy[c] / n - xhat[i] * sum_dy_xhat[c] / n);
                else
                    gx[i] += ga[c] * inv_std[c] * gy[i];
            }
        });
}

Tensor prelu(const Tensor& input, const Tensor& alpha) {
    const std::size_t n_alpha = alpha.size();
    std::size_t channels = 1, inner = 1;
    if (n_alpha != 1) {
        if (input.rank() < 2 || input.dim(1) != n_alpha)
            throw DimensionError("prelu: alpha of length " + std::to_string(n_alpha) +
                                 " does not match channel axis of " + to_string(input.shape()));
        channels = n_alpha;
        inner = inner_size(input.shape());
    }
    const auto x = input.data();
    const auto a = alpha.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double slope = a[n_alpha == 1 ? 0 : channel_of(i, channels, inner)];
        out[i] = x[i] >= 0.0 ? x[i] : slope * x[i];
    }
    return make_result(input.shape(), std::move(out), {input, alpha},
                       [input, alpha, n_alpha, channels, inner](std::span<const double>,
                                                                std::span<const double> gy) {
                           auto gx = grad_sink(input);
                           auto ga = grad_sink(alpha);
                           const auto x = input.data();
                           const auto a = alpha.data();
                           for (std::size_t i = 0; i < gy.size(); ++i) {
                               const std::size_t c = n_alpha == 1 ? 0 : channel_of(i, channels, inner);
                               if (x[i] >= 0.0) {
                                   if (!gx.empty()) gx[i] += gy[i];
                               } else {
                                   if (!gx.empty()) gx[i] += a[c] * gy[i];
                                   if (!ga.empty()) ga[c] += x[i] * gy[i];
                               }
                           }
                       });
}

Tensor gelu(const Tensor& input) {
    const auto x = input.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i)
        out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2.0));
    return make_result(input.shape(), std::move(out), {input},
                       [input](std::span<const double>, std::span<const double> gy) {
                           auto gx = grad_sink(input);
                           const auto x = input.data();
                           const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
                           for (std::size_t i = 0; i < gy.size(); ++i) {
                               const double cdf = 0.5 * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2.0));
                               const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
                               gx[i] += gy[i] * (cdf + x[i] * pdf);
                           }
                       });
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    require_rank(weight, 2, "linear weight");
    const std::size_t dout = weight.dim(0), din = weight.dim(1);
    if (input.rank() < 2 || input.shape().back() != din)
        throw DimensionError("linear: input " + to_string(input.shape()) + " incompatible with weight " +
                             to_string(weight.shape()));
    if (bias.defined()) require_shape(bias, {dout}, "linear bias");
    const std::size_t rows = input.size() / din;
    auto wt = detail::transposed(dout, din, weight.data().data());
    std::vector<double> out(rows * dout);
    detail::gemm(rows, dout, din, input.data().data(), wt.data(), out.data(), false);
    if (bias.defined()) {
        const auto b = bias.data();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < dout; ++j) out[r * dout + j] += b[j];
    }
    Shape shape = input.shape();
    shape.back() = dout;
    return make_result(std::move(shape), std::move(out), {input, weight, bias},
                       [input, weight, bias, rows, din, dout](std::span<const double>,
                                                              std::span<const double> gy) {
                           auto gx = grad_sink(input);
                           auto gw = grad_sink(weight);
                           auto gb = grad_sink(bias);
                           if (!gx.empty()) {
                               std::vector<double> tmp(rows * din);
                               detail::gemm(rows, din, dout, gy.data(), weight.data().data(), tmp.data(), false);
                               for (std::size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
                           }
                           if (!gw.empty()) {
                               auto gyt = detail::transposed(rows, dout, gy.data());
                               detail::gemm(dout, din, rows, gyt.data(), input.data().data(), gw.data(), true);
                           }
                           if (!gb.empty())
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < dout; ++j) gb[j] += gy[r * dout + j];
                       });
}

Tensor layer_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta) {
    if (input.rank() < 1) throw DimensionError("layer_norm: scalar input");
    const std::size_t d = input.shape().back();
    if (d == 0) throw DimensionError("layer_norm: empty feature axis");
    require_shape(gamma, {d}, "layer_norm gamma");
    require_shape(beta, {d}, "layer_norm beta");
    const std::size_t rows = input.size() / d;
    const auto x = input.data();
    const auto ga = gamma.data();
    const auto be = beta.data();
    std::vector<double> xhat(x.size()), out(x.size()), inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* src = x.data() + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += src[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (src[j] - mean) * (src[j] - mean);
        var /= static_cast<double>(d);
        inv_std[r] = 1.0 / std::sqrt(var + kNormEpsilon);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[r * d + j] = (src[j] - mean) * inv_std[r];
            out[r * d + j] = ga[j] * xhat[r * d + j] + be[j];
        }
    }
    return make_result(input.shape(), std::move(out), {input, gamma, beta},
                       [input, gamma, beta, rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                           std::span<const double>, std::span<const double> gy) {
                           auto gx = grad_sink(input);
                           auto gg = grad_sink(gamma);
                           auto gb = grad_sink(beta);
                           const auto ga = gamma.data();
                           for (std::size_t r = 0; r < rows; ++r) {
                               const double* dy = gy.data() + r * d;
                               const double* xh = xhat.data() + r * d;
                               double mean_g = 0.0, mean_gx = 0.0;
                               for (std::size_t j = 0; j < d; ++j) {
                                   const double g = dy[j] * ga[j];
                                   mean_g += g;
                                   mean_gx += g * xh[j];
                                   if (!gg.empty()) gg[j] += dy[j] * xh[j];
                                   if (!gb.empty()) gb[j] += dy[j];
                               }
                               if (gx.empty()) continue;
                               mean_g /= static_cast<double>(d);
                               mean_gx /= static_cast<double>(d);
                               for (std::size_t j = 0; j < d; ++j)
                                   gx[r * d + j] += inv_std[r] * (dy[j] * ga[j] - mean_g - xh[j] * mean_gx);
                           }
                       });
}

Tensor softmax(const Tensor& logits) {
    if (logits.rank() < 1) throw DimensionError("softmax: scalar input");
    const std::size_t k = logits.shape().back();
    const std::size_t rows = logits.size() / k;
    const auto x = logits.data();
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* src = x.data() + r * k;
        double* dst = out.data() + r * k;
        const double peak = *std::max_element(src, src + k);
        double total = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            dst[j] = std::exp(src[j] - peak);
            total += dst[j];
        }
        for (std::size_t j = 0; j < k; ++j) dst[j] /= total;
    }
    return make_result(logits.shape(), std::move(out), {logits},
                       [logits, rows, k](std::span<const double> y, std::span<const double> gy) {
                           auto gx = grad_sink(logits);
                           for (std::size_t r = 0; r < rows; ++r) {
                               double dot = 0.0;
                               for (std::size_t j = 0; j < k; ++j) dot += gy[r * k + j] * y[r * k + j];
                               for (std::size_t j = 0; j < k; ++j)
                                   gx[r * k + j] += y[r * k + j] * (gy[r * k + j] - dot);
                           }
                       });
}

Tensor mean_tokens(const Tensor& tokens) {
    require_rank(tokens, 3, "mean_tokens");
    const std::size_t b = tokens.dim(0), n = tokens.dim(1), d = tokens.dim(2);
    const auto x = tokens.data();
    std::vector<double> out(b * d, 0.0);
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t t = 0; t < n; ++t)
            for (std::size_t j = 0; j < d; ++j) out[i * d + j] += x[(i * n + t) * d + j];
    for (auto& v : out) v /= static_cast<double>(n);
    return make_result({b, d}, std::move(out), {tokens},
                       [tokens, b, n, d](std::span<const double>, std::span<const double> gy) {
                           auto gx = grad_sink(tokens);
                           const double inv = 1.0 / static_cast<double>(n);
                           for (std::size_t i = 0; i < b; ++i)
                               for (std::size_t t = 0; t < n; ++t)
                                   for (std::size_t j = 0; j < d; ++j)
                                       gx[(i * n + t) * d + j] += gy[i * d + j] * inv;
                       });
}

Tensor global_avg_pool(const Tensor& input) {
    require_rank(input, 4, "global_avg_pool");
    const std::size_t planes = input.dim(0) * input.dim(1);
    const std::size_t area = input.dim(2) * input.dim(3);
    const auto x = input.data();
    std::vector<double> out(planes, 0.0);
    for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t i = 0; i < area; ++i) out[p] += x[p * area + i];
        out[p] /= static_cast<double>(area);
    }
    return make_result({input.dim(0), input.dim(1)}, std::move(out), {input},
                       [input, planes, area](std::span<const double>, std::span<const double> gy) {
                           auto gx = grad_sink(input);
                           const double inv = 1.0 / static_cast<double>(area);
                           for (std::size_t p = 0; p < planes; ++p)
                               for (std::size_t i = 0; i < area; ++i) gx[p * area + i] += gy[p] * inv;
                       });
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError("add: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
    const auto x = a.data();
    const auto y = b.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
    return make_result(a.shape(), std::move(out), {a, b},
                       [a, b](std::span<const double>, std::span<const double> gy) {
                           for (const auto* t : {&a, &b}) {
                               auto g = grad_sink(*t);
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
                           }
                       });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError("mul: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
    const auto x = a.data();
    const auto y = b.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
    return make_result(a.shape(), std::move(out), {a, b},
                       [a, b](std::span<const double>, std::span<const double> gy) {
                           auto ga = grad_sink(a);
                           auto gb = grad_sink(b);
                           const auto x = a.data();
                           const auto y = b.data();
                           for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * y[i];
                           for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * x[i];
                       });
}

Tensor scale(const Tensor& a, double factor) {
    const auto x = a.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * factor;
    return make_result(a.shape(), std::move(out), {a},
                       [a, factor](std::span<const double>, std::span<const double> gy) {
                           auto g = grad_sink(a);
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * factor;
                       });
}

Tensor sum(const Tensor& a) {
    double total = 0.0;
    for (double v : a.data()) total += v;
    return make_result({1}, {total}, {a}, [a](std::span<const double>, std::span<const double> gy) {
        auto g = grad_sink(a);
        for (auto& v : g) v += gy[0];
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size())
        throw DimensionError("reshape: " + to_string(a.shape()) + " to " + to_string(shape));
    std::vector<double> out(a.data().begin(), a.data().end());
    return make_result(std::move(shape), std::move(out), {a},
                       [a](std::span<const double>, std::span<const double> gy) {
                           auto g = grad_sink(a);
                           for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
                       });
}

Tensor permute(const Tensor& a, std::span<const std::size_t> axes) {
    const auto& in_shape = a.shape();
    const std::size_t rank = in_shape.size();
    if (axes.size() != rank) throw DimensionError("permute: axis count does not match rank");
    std::vector<bool> used(rank, false);
    for (auto ax : axes) {
        if (ax >= rank || used[ax]) throw DimensionError("permute: invalid axis list");
        used[ax] = true;
    }
    Shape out_shape(rank);
    std::vector<std::size_t> in_strides(rank, 1);
    for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
    // Stride in the input for each output axis.
    std::vector<std::size_t> strides(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        out_shape[i] = in_shape[axes[i]];
        strides[i] = in_strides[axes[i]];
    }
    // map[o] is the input offset of output element o.
    std::vector<std::size_t> map(a.size());
    std::vector<std::size_t> idx(rank, 0);
    std::size_t offset = 0;
    for (std::size_t o = 0; o < map.size(); ++o) {
        map[o] = offset;
        for (std::size_t ax = rank; ax-- > 0;) {
            ++idx[ax];
            offset += strides[ax];
            if (idx[ax] < out_shape[ax]) break;
            offset -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    const auto x = a.data();
    std::vector<double> out(map.size());
    for (std::size_t o = 0; o < map.size(); ++o) out[o] = x[map[o]];
    return make_result(std::move(out_shape), std::move(out), {a},
                       [a, map = std::move(map)](std::span<const double>, std::span<const double> gy) {
                           auto g = grad_sink(a);
                           for (std::size_t o = 0; o < gy.size(); ++o) g[map[o]] += gy[o];
                       });
}

Tensor permute(const Tensor& a, std::initializer_list<std::size_t> axes) {
    return permute(a, std::span<const std::size_t>(axes.begin(), axes.size()));
}

Tensor batched_matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
    require_rank(a, 3, "batched_matmul lhs");
    require_rank(b, 3, "batched_matmul rhs");
    const std::size_t bt = a.dim(0), m = a.dim(1), k = a.dim(2);
    const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
    const std::size_t kb = transpose_b ? b.dim(2) : b.dim(1);
    if (b.dim(0) != bt || kb != k)
        throw DimensionError("batched_matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()) +
                             (transpose_b ? "^T" : ""));
    std::vector<double> out(bt * m * n);
    const double* x = a.data().data();
    const double* y = b.data().data();
    std::vector<double> rhs(k * n);
    for (std::size_t i = 0; i < bt; ++i) {
        const double* yi = y + i * k * n;
        if (transpose_b) detail::transpose(n, k, yi, rhs.data());
        detail::gemm(m, n, k, x + i * m * k, transpose_b ? rhs.data() : yi, out.data() + i * m * n, false);
    }
    return make_result(
        {bt, m, n}, std::move(out), {a, b},
        [a, b, bt, m, n, k, transpose_b](std::span<const double>, std::span<const double> gy) {
            auto ga = grad_sink(a);
            auto gb = grad_sink(b);
            const double* x = a.data().data();
            const double* y = b.data().data();
            std::vector<double> tmp(std::max(m * k, k * n));
            for (std::size_t i = 0; i < bt; ++i) {
                const double* dy = gy.data() + i * m * n;
                const double* yi = y + i * k * n;
                const double* xi = x + i * m * k;
                if (!ga.empty()) {
                    // dA = dY * B^T, where B is [k,n]; with transpose_b the stored rhs is [n,k] already.
                    if (transpose_b) {
                        detail::gemm(m, k, n, dy, yi, ga.data() + i * m * k, true);
                    } else {
                        auto yt = detail::transposed(k, n, yi);
                        detail::gemm(m, k, n, dy, yt.data(), ga.data() + i * m * k, true);
                    }
                }
                if (!gb.empty()) {
                    auto xt = detail::transposed(m, k, xi);
                    if (transpose_b) {
                        // d(B^T) = A^T dY is [k,n]; stored gradient is its transpose [n,k].
                        detail::gemm(k, n, m, xt.data(), dy, tmp.data(), false);
                        double* dst = gb.data() + i * k * n;
                        for (std::size_t r = 0; r < k; ++r)
                            for (std::size_t c = 0; c < n; ++c) dst[c * k + r] += tmp[r * n + c];
                    } else {
                        detail::gemm(k, n, m, xt.data(), dy, gb.data() + i * k * n, true);
                    }
                }
            }
        });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
    require_rank(logits, 2, "cross_entropy logits");
    const std::size_t b = logits.dim(0), c = logits.dim(1);
    if (labels.size() != b) throw DimensionError("cross_entropy: label count does not match batch");
    const auto x = logits.data();
    std::vector<double> probs(x.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c)
            throw DimensionError("cross_entropy: label out of range");
        const double* row = x.data() + i * c;
        const double peak = *std::max_element(row, row + c);
        double total = 0.0;
        for (std::size_t j = 0; j < c; ++j) total += std::exp(row[j] - peak);
        const double log_z = peak + std::log(total);
        for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(row[j] - log_z);
        loss += log_z - row[labels[i]];
    }
    loss /= static_cast<double>(b);
    std::vector<int> owned(labels.begin(), labels.end());
    return make_result({1}, {loss}, {logits},
                       [logits, b, c, probs = std::move(probs), owned = std::move(owned)](
                           std::span<const double>, std::span<const double> gy) {
                           auto gx = grad_sink(logits);
                           const double s = gy[0] / static_cast<double>(b);
                           for (std::size_t i = 0; i < b; ++i)
                               for (std::size_t j = 0; j < c; ++j) {
                                   const double target = static_cast<std::size_t>(owned[i]) == j ? 1.0 : 0.0;
                                   gx[i * c + j] += s * (probs[i * c + j] - target);
                               }
                       });
}

}  // namespace cbdes
