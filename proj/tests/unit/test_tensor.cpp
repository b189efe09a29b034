// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "cbdes/ops.hpp"
#include "cbdes/tensor.hpp"

using namespace cbdes;

TEST(Tensor, ShapeAndFill) {
    Tensor t({2, 3}, 1.5);
    EXPECT_EQ(t.rank(), 2u);
    EXPECT_EQ(t.size(), 6u);
    for (double v : t.data()) EXPECT_EQ(v, 1.5);
    EXPECT_THROW(Tensor({2, 2}, std::vector<double>(3)), DimensionError);
    EXPECT_THROW(t.item(), DimensionError);
}

TEST(Tensor, CopiesAliasClonesDoNot) {
    Tensor a({2}, 1.0);
    Tensor b = a;
    Tensor c = a.clone();
    a.data()[0] = 7.0;
    EXPECT_EQ(b[0], 7.0);
    EXPECT_EQ(c[0], 1.0);
}

TEST(Autodiff, SharedInputAccumulates) {
    Tensor x({3}, std::vector<double>{1, 2, 3});
    x.set_requires_grad();
    auto y = sum(mul(x, x));  // d/dx = 2x
    y.backward();
    EXPECT_EQ(x.grad()[0], 2.0);
    EXPECT_EQ(x.grad()[2], 6.0);
}

TEST(Autodiff, LeafGradientsAccumulateAcrossPasses) {
    Tensor x({2}, std::vector<double>{1, -1});
    x.set_requires_grad();
    sum(scale(x, 3.0)).backward();
    sum(scale(x, 3.0)).backward();
    EXPECT_EQ(x.grad()[0], 6.0);
    x.zero_grad();
    EXPECT_FALSE(x.has_grad() && x.grad()[0] != 0.0);
}

TEST(Autodiff, NonScalarBackwardThrows) {
    Tensor x({2}, 1.0);
    x.set_requires_grad();
    EXPECT_THROW(scale(x, 2.0).backward(), GraphError);
}

TEST(Autodiff, SecondBackwardThroughReleasedGraphThrows) {
    Tensor x({2}, 1.0);
    x.set_requires_grad();
    auto y = sum(mul(x, x));
    y.backward();
    EXPECT_THROW(y.backward(), GraphError);
}

TEST(Autodiff, BackwardWithoutGradientThrows) {
    Tensor x({1}, 1.0);
    EXPECT_THROW(x.backward(), GraphError);
}

TEST(Autodiff, NoGradGuardRecordsNothing) {
    Tensor x({2}, 1.0);
    x.set_requires_grad();
    Tensor y;
    {
        NoGradGuard guard;
        EXPECT_FALSE(grad_enabled());
        y = sum(mul(x, x));
    }
    EXPECT_TRUE(grad_enabled());
    EXPECT_FALSE(y.requires_grad());
    EXPECT_THROW(y.backward(), GraphError);
}

TEST(Autodiff, DetachCutsHistory) {
    Tensor x({2}, 2.0);
    x.set_requires_grad();
    auto d = mul(x, x).detach();
    EXPECT_FALSE(d.requires_grad());
    EXPECT_EQ(d[0], 4.0);
}

TEST(Autodiff, DiamondGraphVisitsEachNodeOnce) {
    Tensor x({1}, 3.0);
    x.set_requires_grad();
    auto a = scale(x, 2.0);
    auto b = add(a, a);          // 4x
    auto c = sum(mul(b, a));     // 8x^2 -> 16x
    c.backward();
    EXPECT_DOUBLE_EQ(x.grad()[0], 48.0);
}
