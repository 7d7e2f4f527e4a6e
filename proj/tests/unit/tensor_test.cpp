#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "rpcss/error.hpp"
#include "rpcss/tensor.hpp"

using rpcss::Shape;
using rpcss::Tensor;

TEST(Tensor, DefaultIsScalarZero) {
  Tensor t;
  EXPECT_EQ(t.rank(), 0u);
  EXPECT_EQ(t.size(), 1u);
  EXPECT_EQ(t.item(), 0.0);
}

TEST(Tensor, ShapeAndIndexing) {
  Tensor t = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  EXPECT_EQ(t.shape(), (Shape{2, 3}));
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_EQ(t.at(1, 2), 6.0);
  EXPECT_EQ(t.row(1)[0], 4.0);
}

TEST(Tensor, DataSizeMismatchThrows) {
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), rpcss::ShapeError);
}

TEST(Tensor, ReshapeKeepsData) {
  Tensor t = Tensor::vector({1, 2, 3, 4, 5, 6});
  Tensor r = t.reshaped(Shape{3, 2});
  EXPECT_EQ(r.at(2, 1), 6.0);
  EXPECT_THROW(t.reshaped(Shape{4, 2}), rpcss::ShapeError);
}

TEST(Tensor, FinitenessAndDiff) {
  Tensor a = Tensor::vector({1, 2});
  Tensor b = Tensor::vector({1, 2.5});
  EXPECT_DOUBLE_EQ(rpcss::max_abs_diff(a, b), 0.5);
  EXPECT_TRUE(a.all_finite());
  a[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_FALSE(a.all_finite());
  EXPECT_THROW(rpcss::max_abs_diff(a, Tensor::vector({1})), rpcss::ShapeError);
}

TEST(Tensor, ItemRequiresSingleElement) {
  EXPECT_THROW(Tensor::vector({1, 2}).item(), rpcss::ShapeError);
  EXPECT_EQ(Tensor::scalar(3.5).item(), 3.5);
}
