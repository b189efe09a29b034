// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "cbdes/layers.hpp"
#include "cbdes/ops.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace cbdes;
using cbdes::check::random_tensor;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

void expect_close(const std::vector<double>& a, std::span<const double> b, double tol) {
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "at " << i;
}

}  // namespace

struct ConvParam {
    std::size_t cin, cout, k, stride, pad, groups, h;
};

class ConvOracle : public ::testing::TestWithParam<ConvParam> {};

TEST_P(ConvOracle, MatchesDirectLoops) {
    const auto p = GetParam();
    auto x = random_tensor({2, p.cin, p.h, p.h + 1}, 1);
    auto w = random_tensor({p.cout, p.cin / p.groups, p.k, p.k}, 2);
    auto b = random_tensor({p.cout}, 3);
    auto y = conv2d(x, w, b, p.stride, p.pad, p.groups);
    const auto ref = check::naive_conv2d(values(x), 2, p.cin, p.h, p.h + 1, values(w), p.cout, p.k, values(b),
                                           p.stride, p.pad, p.groups);
    expect_close(ref, y.data(), 1e-12);
}

INSTANTIATE_TEST_SUITE_P(Shapes, ConvOracle,
                         ::testing::Values(ConvParam{3, 4, 3, 1, 1, 1, 6}, ConvParam{3, 5, 3, 2, 1, 1, 7},
                                           ConvParam{4, 4, 3, 1, 1, 4, 5}, ConvParam{4, 6, 1, 1, 0, 2, 4},
                                           ConvParam{2, 3, 5, 1, 2, 1, 6}, ConvParam{3, 8, 3, 2, 0, 1, 9}));

TEST(Conv, WithoutBias) {
    auto x = random_tensor({1, 2, 4, 4}, 5);
    auto w = random_tensor({3, 2, 3, 3}, 6);
    auto y = conv2d(x, w, Tensor{}, 1, 1);
    const auto ref = check::naive_conv2d(values(x), 1, 2, 4, 4, values(w), 3, 3, {}, 1, 1, 1);
    expect_close(ref, y.data(), 1e-12);
}

TEST(Conv, RejectsBadShapes) {
    auto x = random_tensor({1, 3, 4, 4}, 1);
    EXPECT_THROW(conv2d(x, random_tensor({2, 2, 3, 3}, 2), Tensor{}, 1, 1), DimensionError);
    EXPECT_THROW(conv2d(x, random_tensor({2, 3, 2, 2}, 2), Tensor{}, 1, 0), DimensionError);
    EXPECT_THROW(conv2d(random_tensor({3, 4, 4}, 1), random_tensor({2, 3, 3, 3}, 2), Tensor{}, 1, 1),
                 DimensionError);
}

TEST(Conv, BatchRowsAreIndependentOfBatchSize) {
    auto x = random_tensor({5, 3, 6, 6}, 11);
    auto w = random_tensor({4, 3, 3, 3}, 12);
    auto b = random_tensor({4}, 13);
    auto full = conv2d(x, w, b, 1, 1);
    Tensor first({1, 3, 6, 6}, std::vector<double>(x.data().begin(), x.data().begin() + 108));
    auto single = conv2d(first, w, b, 1, 1);
    for (std::size_t i = 0; i < single.size(); ++i) EXPECT_EQ(single[i], full[i]);
}

TEST(BatchedMatmul, MatchesNaive) {
    auto a = random_tensor({3, 4, 5}, 1);
    auto b = random_tensor({3, 5, 2}, 2);
    auto c = batched_matmul(a, b);
    for (std::size_t t = 0; t < 3; ++t) {
        std::vector<double> at(a.data().begin() + t * 20, a.data().begin() + (t + 1) * 20);
        std::vector<double> bt(b.data().begin() + t * 10, b.data().begin() + (t + 1) * 10);
        expect_close(check::naive_matmul(at, bt, 4, 5, 2), c.data().subspan(t * 8, 8), 1e-12);
    }
}

TEST(BatchedMatmul, TransposedOperand) {
    auto a = random_tensor({2, 3, 4}, 3);
    auto b = random_tensor({2, 5, 4}, 4);
    auto c = batched_matmul(a, b, true);
    auto d = batched_matmul(a, permute(b, {0, 2, 1}));
    expect_close(values(d), c.data(), 1e-12);
    EXPECT_THROW(batched_matmul(a, b), DimensionError);
}

TEST(Attention, MatchesNaiveSelfAndCross) {
    const std::size_t d = 8, heads = 2, n = 5, m = 3;
    auto q = random_tensor({2, n, d}, 1);
    auto kv = random_tensor({2, m, d}, 2);
    AttentionWeights w;
    std::vector<Tensor*> slots = {&w.wq, &w.bq, &w.wk, &w.bk, &w.wv, &w.bv, &w.wo, &w.bo};
    std::vector<std::vector<double>> raw;
    for (std::size_t i = 0; i < slots.size(); ++i) {
        *slots[i] = random_tensor(i % 2 == 0 ? Shape{d, d} : Shape{d}, 10 + i, 0.5);
        raw.push_back(values(*slots[i]));
    }
    auto cross = multi_head_attention(q, kv, w, heads);
    auto self = multi_head_attention(q, w, heads);
    for (std::size_t b = 0; b < 2; ++b) {
        std::vector<double> qb(q.data().begin() + b * n * d, q.data().begin() + (b + 1) * n * d);
        std::vector<double> kb(kv.data().begin() + b * m * d, kv.data().begin() + (b + 1) * m * d);
        expect_close(check::naive_attention(qb, n, kb, m, d, heads, raw), cross.data().subspan(b * n * d, n * d),
                     1e-12);
        expect_close(check::naive_attention(qb, n, qb, n, d, heads, raw), self.data().subspan(b * n * d, n * d),
                     1e-12);
    }
    EXPECT_THROW(multi_head_attention(q, w, 3), ConfigError);
}

TEST(Softmax, RowsSumToOneAndSurviveLargeLogits) {
    Tensor x({2, 3}, std::vector<double>{1000, 1001, 1002, -5, 0, 5});
    auto p = softmax(x);
    for (std::size_t r = 0; r < 2; ++r) {
        double s = 0;
        for (std::size_t j = 0; j < 3; ++j) {
            EXPECT_TRUE(std::isfinite(p[r * 3 + j]));
            s += p[r * 3 + j];
        }
        EXPECT_NEAR(s, 1.0, 1e-15);
    }
    EXPECT_NEAR(p[2], std::exp(2.0) / (1 + std::exp(1.0) + std::exp(2.0)), 1e-15);
}

TEST(LayerNorm, ZeroMeanUnitVariance) {
    auto x = random_tensor({3, 7}, 4, 5.0);
    auto y = layer_norm(x, Tensor({7}, 1.0), Tensor({7}, 0.0));
    for (std::size_t r = 0; r < 3; ++r) {
        double mean = 0, var = 0;
        for (std::size_t j = 0; j < 7; ++j) mean += y[r * 7 + j] / 7;
        for (std::size_t j = 0; j < 7; ++j) var += (y[r * 7 + j] - mean) * (y[r * 7 + j] - mean) / 7;
        EXPECT_NEAR(mean, 0.0, 1e-12);
        EXPECT_NEAR(var, 1.0, 1e-5);
    }
}

TEST(MaxPool, TiesRouteGradientToFirstElement) {
    Tensor x({1, 1, 2, 2}, std::vector<double>{3, 3, 3, 3});
    x.set_requires_grad();
    sum(maxpool2x2(x)).backward();
    EXPECT_EQ(x.grad()[0], 1.0);
    EXPECT_EQ(x.grad()[1] + x.grad()[2] + x.grad()[3], 0.0);
    EXPECT_THROW(maxpool2x2(Tensor({1, 1, 3, 2}, 0.0)), DimensionError);
}

TEST(ChannelNorm, TrainingUpdatesRunningStatsEvalUsesThem) {
    auto x = random_tensor({4, 2, 3, 3}, 8, 2.0);
    RunningStats stats(2);
    Tensor gamma({2}, 1.0), beta({2}, 0.0);
    channel_norm(x, gamma, beta, stats, true);
    const std::size_t m = 4 * 9;
    for (std::size_t c = 0; c < 2; ++c) {
        double mean = 0, ss = 0;
        for (std::size_t b = 0; b < 4; ++b)
            for (std::size_t i = 0; i < 9; ++i) mean += x[(b * 2 + c) * 9 + i] / m;
        for (std::size_t b = 0; b < 4; ++b)
            for (std::size_t i = 0; i < 9; ++i) ss += std::pow(x[(b * 2 + c) * 9 + i] - mean, 2);
        EXPECT_NEAR(stats.mean[c], 0.1 * mean, 1e-12);
        EXPECT_NEAR(stats.var[c], 0.9 + 0.1 * ss / (m - 1), 1e-12);
    }
    auto y = channel_norm(x, gamma, beta, stats, false);
    EXPECT_NEAR(y[0], (x[0] - stats.mean[0]) / std::sqrt(stats.var[0] + kNormEpsilon), 1e-12);
}

TEST(ChannelNorm, EvalRowsIndependentOfBatch) {
    auto x = random_tensor({3, 2, 2, 2}, 9);
    RunningStats stats(2);
    Tensor gamma({2}, 1.3), beta({2}, 0.2);
    auto all = channel_norm(x, gamma, beta, stats, false);
    Tensor first({1, 2, 2, 2}, std::vector<double>(x.data().begin(), x.data().begin() + 8));
    auto one = channel_norm(first, gamma, beta, stats, false);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(one[i], all[i]);
}

TEST(CrossEntropy, KnownValue) {
    Tensor logits({1, 3}, std::vector<double>{0, 0, 0});
    std::vector<int> label{1};
    EXPECT_NEAR(cross_entropy(logits, label).item(), std::log(3.0), 1e-15);
    std::vector<int> bad{3};
    EXPECT_THROW(cross_entropy(logits, bad), DimensionError);
}

TEST(Gelu, KnownValues) {
    Tensor x({3}, std::vector<double>{0.0, 1.0, -1.0});
    auto y = gelu(x);
    EXPECT_EQ(y[0], 0.0);
    EXPECT_NEAR(y[1], 0.8413447460685429, 1e-15);
    EXPECT_NEAR(y[2], -0.15865525393145707, 1e-15);
}

TEST(PRelu, SlopeOnNegativeSide) {
    Tensor x({1, 2, 1, 1}, std::vector<double>{-2, 3});
    auto y = prelu(x, Tensor({2}, std::vector<double>{0.25, 0.5}));
    EXPECT_EQ(y[0], -0.5);
    EXPECT_EQ(y[1], 3.0);
}

TEST(Tokens, RoundTrip) {
    auto x = random_tensor({2, 3, 2, 4}, 3);
    auto t = to_tokens(x);
    EXPECT_EQ(t.shape(), (Shape{2, 8, 3}));
    EXPECT_EQ(t[1 * 3 + 2], x[2 * 8 + 1]);  // token 1 channel 2 of image 0
    auto back = from_tokens(t, 2, 4);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(back[i], x[i]);
}

TEST(MeanTokens, Average) {
    Tensor t({1, 2, 2}, std::vector<double>{1, 2, 3, 6});
    auto m = mean_tokens(t);
    EXPECT_EQ(m[0], 2.0);
    EXPECT_EQ(m[1], 4.0);
}
