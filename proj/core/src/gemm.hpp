// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

namespace cbdes::detail {

// C[M,N] (+)= A[M,K] * B[K,N], all row-major and contiguous.
//
// Every output element accumulates over k in increasing order, so a row's
// result does not depend on M. Batch-independence of per-image outputs
// (duplicated images, permuted batches, sparse vs dense execution) relies
// on this.
inline void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
                 bool accumulate) {
    if (!accumulate)
        for (std::size_t i = 0; i < m * n; ++i) c[i] = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        double* c0 = c + i * n;
        double* c1 = c0 + n;
        double* c2 = c1 + n;
        double* c3 = c2 + n;
        for (std::size_t p = 0; p < k; ++p) {
            const double a0 = a[i * k + p];
            const double a1 = a[(i + 1) * k + p];
            const double a2 = a[(i + 2) * k + p];
            const double a3 = a[(i + 3) * k + p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                const double bv = brow[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
    }
    for (; i < m; ++i) {
        double* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * brow[j];
        }
    }
}

// out[cols,rows] = in[rows,cols]^T
inline void transpose(std::size_t rows, std::size_t cols, const double* in, double* out) {
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = in[r * cols + c];
}

inline std::vector<double> transposed(std::size_t rows, std::size_t cols, const double* in) {
    std::vector<double> out(rows * cols);
    transpose(rows, cols, in, out.data());
    return out;
}

}  // namespace cbdes::detail
