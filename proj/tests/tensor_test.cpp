#include <gtest/gtest.h>

#include <cmath>

#include "dpruner/errors.hpp"
#include "dpruner/tensor.hpp"

namespace dpruner {
namespace {

TEST(Tensor, ShapeAndFill) {
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  for (double v : t.data()) EXPECT_EQ(v, 1.5);
}

TEST(Tensor, RejectsZeroDimension) { EXPECT_THROW(Tensor({2, 0}), ValidationError); }

TEST(Tensor, RejectsDataOfWrongLength) { EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ValidationError); }

TEST(Tensor, RowMajorAccess) {
  auto t = Tensor::matrix(2, 2, {1, 2, 3, 4});
  EXPECT_EQ(t.at(0, 1), 2.0);
  EXPECT_EQ(t.at(1, 0), 3.0);
  EXPECT_EQ(t[3], 4.0);
}

TEST(Tensor, ScalarItem) {
  EXPECT_EQ(Tensor::scalar(2.5).item(), 2.5);
  EXPECT_THROW(Tensor({2}).item(), ValidationError);
}

TEST(Tensor, BitEqualDistinguishesSignedZero) {
  Tensor a({1}, 0.0);
  Tensor b({1}, -0.0);
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a.bit_equal(b));
  EXPECT_TRUE(a.bit_equal(Tensor({1}, 0.0)));
}

TEST(Tensor, AllFinite) {
  Tensor t({3}, 1.0);
  EXPECT_TRUE(t.all_finite());
  t[1] = std::nan("");
  EXPECT_FALSE(t.all_finite());
}

TEST(Tensor, RequireSameShapeNamesOpAndShapes) {
  try {
    require_same_shape("add", Tensor({2, 3}), Tensor({3, 2}));
    FAIL();
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find(shape_string({2, 3})), std::string::npos);
    EXPECT_NE(msg.find(shape_string({3, 2})), std::string::npos);
  }
}

}  // namespace
}  // namespace dpruner
