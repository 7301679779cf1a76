#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "support/primitive_cases.hpp"
#include "unigaze/autodiff.hpp"

using namespace unigaze;
using namespace unigaze::ad;
using namespace unigaze::test_support;

TEST(Primitives, SoftmaxUniform) {
  Graph<double> g;
  auto y = softmax(g.constant(Tensor<double>(Shape{3}, 0.0)));
  for (double v : y.value().data) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Primitives, LayerNormByHand) {
  Graph<double> g;
  auto y = layer_norm(g.constant(Tensor<double>(Shape{2}, {1.0, 3.0})));
  EXPECT_NEAR(y.value()[0], -1.0, 1e-6);
  EXPECT_NEAR(y.value()[1], 1.0, 1e-6);
}

TEST(Primitives, MatmulIdentityIsExact) {
  Rng rng(1);
  Graph<double> g;
  Tensor<double> eye(Shape{3, 3});
  for (int i = 0; i < 3; ++i) eye.data[static_cast<std::size_t>(i * 4)] = 1.0;
  const auto a = random_tensor({3, 5}, rng);
  EXPECT_EQ(g.matmul(g.constant(eye), g.constant(a)).value().data, a.data);
}

TEST(Primitives, MatmulBtMatchesExplicitTranspose) {
  Rng rng(2);
  Graph<double> g;
  const auto a = g.constant(random_tensor({2, 3, 4}, rng));
  const auto b = g.constant(random_tensor({2, 5, 4}, rng));
  const auto& x = g.matmul_bt(a, b).value();
  const auto& y = g.matmul(a, g.transpose_last(b)).value();
  ASSERT_EQ(x.shape, y.shape);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(x[i], y[i], 1e-14);
  EXPECT_THROW(g.matmul_bt(a, g.constant(random_tensor({2, 5, 3}, rng))), ShapeError);
}

TEST(Primitives, ReductionsAndReshapes) {
  Graph<double> g;
  Tensor<double> t(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  auto x = g.constant(t);
  EXPECT_EQ(g.sum(x, 0).value().data, (ad::Buffer<double>{5, 7, 9}));
  EXPECT_EQ(g.mean(x, 1).value().data, (ad::Buffer<double>{2, 5}));
  EXPECT_EQ(g.mean(x).value()[0], 3.5);
  EXPECT_EQ(g.transpose(x, {1, 0}).value().data, (ad::Buffer<double>{1, 4, 2, 5, 3, 6}));
  EXPECT_EQ(g.slice_rows(x, 1, 1).value().data, (ad::Buffer<double>{4, 5, 6}));
  EXPECT_EQ(g.gather_rows(x, {1, 1, 0}).value().data,
            (ad::Buffer<double>{4, 5, 6, 4, 5, 6, 1, 2, 3}));
  EXPECT_EQ(g.concat({x, g.slice_rows(x, 0, 1)}).value().shape, (Shape{3, 3}));
}

TEST(Primitives, ShapeErrorsNamePrimitive) {
  Graph<double> g;
  auto a = g.constant(Tensor<double>(Shape{2, 3}));
  auto b = g.constant(Tensor<double>(Shape{2, 3}));
  try {
    g.matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
  }
  EXPECT_THROW(g.add(a, g.constant(Tensor<double>(Shape{2}))), ShapeError);
  EXPECT_THROW(g.softmax(a, 2), ShapeError);
  EXPECT_THROW(g.reshape(a, {4}), ShapeError);
  EXPECT_THROW(g.gather_rows(a, {2}), ShapeError);
  EXPECT_THROW(g.slice_rows(a, 1, 2), ShapeError);
}

TEST(Backward, SumOfSquares) {
  Graph<double> g;
  auto w = g.param(Tensor<double>(Shape{2}, {1.0, 2.0}));
  g.backward(sum(square(w)));
  EXPECT_EQ(g.grad(w).data, (ad::Buffer<double>{2.0, 4.0}));
}

TEST(Backward, UnreachedParameterHasZeroGrad) {
  Graph<double> g;
  auto w = g.param(Tensor<double>(Shape{2}, {1.0, 2.0}));
  auto unused = g.param(Tensor<double>(Shape{3}, 5.0));
  g.backward(sum(w));
  EXPECT_EQ(g.grad(unused).data, (ad::Buffer<double>(3, 0.0)));
}

TEST(Backward, NonScalarLossFails) {
  Graph<double> g;
  auto w = g.param(Tensor<double>(Shape{2}, 1.0));
  EXPECT_THROW(g.backward(square(w)), ShapeError);
}

TEST(Backward, GeluChainMatchesFiniteDifferences) {
  Rng rng(3);
  const double err = finite_difference_check(
      [](Graph<double>&, std::span<const Var<double>> p) { return sum(gelu(p[0])); },
      {random_tensor({7}, rng, -3, 3)});
  EXPECT_LT(err, 1e-8);
}

TEST(FiniteDifference, QuadraticIsTight) {
  Rng rng(4);
  const double err = finite_difference_check(
      [](Graph<double>&, std::span<const Var<double>> p) { return sum(square(p[0])); },
      {random_tensor({10}, rng)});
  EXPECT_LT(err, 1e-9);
}

TEST(FiniteDifference, SoftmaxCrossShapeComposition) {
  Rng rng(5);
  const double err = finite_difference_check(
      [](Graph<double>& g, std::span<const Var<double>> p) {
        auto s = softmax(g.matmul(p[0], p[1]), 0);
        auto t = g.transpose(g.reshape(s, {2, 3, 2}), {2, 0, 1});
        return probe(t, 99);
      },
      {random_tensor({4, 5}, rng), random_tensor({5, 3}, rng)});
  EXPECT_LT(err, 1e-6);
}

// Every primitive's adjoint against central differences, 100 random shapes
// and seeds each.
TEST(FiniteDifference, EveryPrimitiveRandomShapes) {
  for (const auto& c : primitive_cases()) {
    for (int seed = 0; seed < 100; ++seed) {
      ASSERT_LT(primitive_fd_error(c, seed), 1e-5) << c.name << " seed " << seed;
    }
  }
}

TEST(Properties, SoftmaxSumsToOneLayerNormZeroMean) {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    Graph<double> g;
    auto x = g.constant(random_tensor({3, 1 + uniform_index(rng, 9), 4}, rng, -20, 20));
    const auto& s = g.softmax(x, 1).value();
    const auto& ln = g.layer_norm(x, 1).value();
    const std::size_t len = x.value().dim(1);
    for (std::size_t o = 0; o < 3; ++o) {
      for (std::size_t i = 0; i < 4; ++i) {
        double total = 0, m = 0;
        for (std::size_t j = 0; j < len; ++j) {
          total += s.data[(o * len + j) * 4 + i];
          m += ln.data[(o * len + j) * 4 + i];
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
        EXPECT_NEAR(m / static_cast<double>(len), 0.0, 1e-9);
      }
    }
  }
}

TEST(Properties, BackwardIsDeterministic) {
  auto run = [] {
    Rng rng(21);
    Graph<double> g;
    auto w = g.param(random_tensor({6, 5}, rng));
    auto x = g.constant(random_tensor({4, 6}, rng));
    auto y = softmax(gelu(g.matmul(x, w)));
    g.backward(probe(layer_norm(y), 3));
    return g.grad(w).data;
  };
  EXPECT_EQ(run(), run());
}

TEST(Properties, FloatModeMatchesDoubleClosely) {
  Rng rng(12);
  const auto a = random_tensor({5, 7}, rng);
  const auto b = random_tensor({7, 3}, rng);
  Graph<double> gd;
  Graph<float> gf;
  auto yd = softmax(gelu(gd.matmul(gd.constant(a), gd.constant(b))));
  auto yf = softmax(gelu(gf.matmul(gf.constant(a.cast<float>()), gf.constant(b.cast<float>()))));
  for (std::size_t i = 0; i < yd.value().size(); ++i) {
    EXPECT_NEAR(yd.value()[i], yf.value()[i], 1e-5);
  }
}
