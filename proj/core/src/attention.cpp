// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <string>

#include "cbdes/ops.hpp"

namespace cbdes {

namespace {

// [B,N,D] -> [B*heads, N, D/heads]
Tensor split_heads(const Tensor& x, std::size_t heads) {
    const std::size_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
    auto t = permute(reshape(x, {b, n, heads, d / heads}), {0, 2, 1, 3});
    return reshape(t, {b * heads, n, d / heads});
}

// [B*heads, N, dh] -> [B,N,heads*dh]
Tensor merge_heads(const Tensor& x, std::size_t batch, std::size_t heads) {
    const std::size_t n = x.dim(1), dh = x.dim(2);
    auto t = permute(reshape(x, {batch, heads, n, dh}), {0, 2, 1, 3});
    return reshape(t, {batch, n, heads * dh});
}

}  // namespace

Tensor multi_head_attention(const Tensor& queries, const Tensor& keys_values, const AttentionWeights& w,
                            std::size_t heads) {
    require_rank(queries, 3, "multi_head_attention queries");
    require_rank(keys_values, 3, "multi_head_attention keys/values");
    const std::size_t batch = queries.dim(0), d = queries.dim(2);
    if (heads == 0 || d % heads != 0)
        throw ConfigError("multi_head_attention: embedding dim " + std::to_string(d) +
                          " is not divisible by " + std::to_string(heads) + " heads");
    if (keys_values.dim(0) != batch || keys_values.dim(2) != d)
        throw DimensionError("multi_head_attention: query/key shapes " + to_string(queries.shape()) + " vs " +
                             to_string(keys_values.shape()));

    auto q = split_heads(linear(queries, w.wq, w.bq), heads);
    auto k = split_heads(linear(keys_values, w.wk, w.bk), heads);
    auto v = split_heads(linear(keys_values, w.wv, w.bv), heads);
    const double scale_factor = 1.0 / std::sqrt(static_cast<double>(d / heads));
    auto attn = softmax(scale(batched_matmul(q, k, /*transpose_b=*/true), scale_factor));
    auto context = merge_heads(batched_matmul(attn, v), batch, heads);
    return linear(context, w.wo, w.bo);
}

}  // namespace cbdes
