// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cbdes/tensor.hpp"

namespace cbdes {

/// Cross-correlation of [B,Cin,H,W] with [Cout,Cin/groups,kh,kw]. `bias` may
/// be undefined. Kernel sizes must be odd.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding, std::size_t groups = 1);

/// 2x2 max pooling with stride 2. The gradient goes to the first maximal
/// element of each window in row-major order.
Tensor maxpool2x2(const Tensor& input);

/// Per-channel statistics tracked by channel_norm in training mode.
struct RunningStats {
    Tensor mean;
    Tensor var;
    double momentum = 0.1;

    explicit RunningStats(std::size_t channels)
        : mean(Shape{channels}, 0.0), var(Shape{channels}, 1.0) {}
};

inline constexpr double kNormEpsilon = 1e-5;

/// Batch normalization over (B,H,W) for each channel of a [B,C,H,W] or
/// [B,C] input. Training mode uses batch moments and updates `stats`
/// (running variance is the unbiased estimate); eval mode uses `stats`.
Tensor channel_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta, RunningStats& stats,
                    bool training);

/// x for x >= 0, alpha * x otherwise; alpha is a single slope or one per
/// channel (axis 1).
Tensor prelu(const Tensor& input, const Tensor& alpha);

/// Exact (erf-based) GELU.
Tensor gelu(const Tensor& input);

/// Affine map over the last axis: [..., Din] x [Dout, Din]^T + [Dout].
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

/// Normalization over the last axis followed by a per-feature affine.
Tensor layer_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta);

/// Softmax over the last axis, shifted by the row max.
Tensor softmax(const Tensor& logits);

/// [B,N,D] -> [B,D] arithmetic mean over tokens.
Tensor mean_tokens(const Tensor& tokens);

/// [B,C,H,W] -> [B,C] spatial mean.
Tensor global_avg_pool(const Tensor& input);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sum(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
/// General axis permutation: output axis i is input axis `axes[i]`.
Tensor permute(const Tensor& a, std::span<const std::size_t> axes);
Tensor permute(const Tensor& a, std::initializer_list<std::size_t> axes);

/// [Bt,M,K] x [Bt,K,N], or x [Bt,N,K]^T when `transpose_b`.
Tensor batched_matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

/// Mean negative log-likelihood of integer labels under softmax(logits).
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Projection weights of one multi-head attention layer; each W is [D,D].
struct AttentionWeights {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

/// Scaled dot-product attention of `queries` [B,N,D] over `keys_values`
/// [B,M,D], split into `heads` heads of width D/heads, concatenated and
/// output-projected.
Tensor multi_head_attention(const Tensor& queries, const Tensor& keys_values,
                            const AttentionWeights& weights, std::size_t heads);

inline Tensor multi_head_attention(const Tensor& tokens, const AttentionWeights& weights,
                                   std::size_t heads) {
    return multi_head_attention(tokens, tokens, weights, heads);
}

}  // namespace cbdes
