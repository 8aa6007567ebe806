// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <random>

#include "support.hpp"
#include "vital/kernels.hpp"

namespace vital::kernels {
namespace {

struct Case {
  int cin, cout, side, stride;
};

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = g(rng);
  return v;
}

FeatureMap random_map(Shape3 s, std::uint64_t seed) { return FeatureMap(s, random_vec(s.size(), seed)); }

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

class KernelParity : public ::testing::TestWithParam<Case> {};

TEST_P(KernelParity, ParallelMatchesReference) {
  const Case c = GetParam();
  const ConvGeometry g{c.cin, c.cout, 3, c.stride, 1};
  const Shape3 in{c.cin, c.side, c.side + 1};
  const Shape3 out = g.output_shape(in);
  const auto w = random_vec(g.weight_count(), 1);
  const auto b = random_vec(std::size_t(c.cout), 2);
  const FeatureMap x = random_map(in, 3);
  const FeatureMap go = random_map(out, 4);

  const FeatureMap y = conv2d_forward(g, w, b, x);
  const FeatureMap yr = reference::conv2d_forward(g, w, b, x);
  ASSERT_EQ(y.shape(), yr.shape());
  EXPECT_LT(max_abs_diff(y.values(), yr.values()), 1e-12);
  const FeatureMap y0 = conv2d_forward(g, w, {}, x);
  EXPECT_LT(max_abs_diff(y0.values(), reference::conv2d_forward(g, w, {}, x).values()), 1e-12);

  const FeatureMap gi = conv2d_backward_input(g, w, go, in);
  const FeatureMap gir = reference::conv2d_backward_input(g, w, go, in);
  EXPECT_LT(max_abs_diff(gi.values(), gir.values()), 1e-12);

  std::vector<double> gw(w.size(), 0.5), gb(b.size(), 0.25);
  std::vector<double> gwr = gw, gbr = gb;
  conv2d_backward_params(g, x, go, gw, gb);
  reference::conv2d_backward_params(g, x, go, gwr, gbr);
  EXPECT_LT(max_abs_diff(gw, gwr), 1e-10);
  EXPECT_LT(max_abs_diff(gb, gbr), 1e-10);
}

TEST_P(KernelParity, BackwardInputIsTheAdjoint) {
  // <conv(x), y> == <x, conv^T(y)> with zero bias.
  const Case c = GetParam();
  const ConvGeometry g{c.cin, c.cout, 3, c.stride, 1};
  const Shape3 in{c.cin, c.side, c.side};
  const auto w = random_vec(g.weight_count(), 7);
  const FeatureMap x = random_map(in, 8);
  const FeatureMap y = random_map(g.output_shape(in), 9);
  const FeatureMap ax = conv2d_forward(g, w, {}, x);
  const FeatureMap aty = conv2d_backward_input(g, w, y, in);
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) lhs += ax.values()[i] * y.values()[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x.values()[i] * aty.values()[i];
  EXPECT_NEAR(lhs, rhs, 1e-9 * std::max(1.0, std::abs(lhs)));
}

INSTANTIATE_TEST_SUITE_P(Shapes, KernelParity,
                         ::testing::Values(Case{1, 1, 3, 1}, Case{3, 8, 9, 1}, Case{4, 6, 8, 2},
                                           Case{8, 16, 7, 2}, Case{5, 3, 16, 1}));

TEST(Kernels, HandExample) {
  // 1x3x3 input, single 3x3 kernel of ones, zero padding: each output is a
  // neighbourhood sum.
  const ConvGeometry g{1, 1, 3, 1, 1};
  FeatureMap x({1, 3, 3});
  for (int i = 0; i < 9; ++i) x.values()[i] = i + 1;
  const std::vector<double> w(9, 1.0), b{0.5};
  const FeatureMap y = conv2d_forward(g, w, b, x);
  EXPECT_DOUBLE_EQ(y.at(0, 1, 1), 45.5);
  EXPECT_DOUBLE_EQ(y.at(0, 0, 0), 1 + 2 + 4 + 5 + 0.5);
  EXPECT_DOUBLE_EQ(y.at(0, 2, 2), 5 + 6 + 8 + 9 + 0.5);
}

}  // namespace
}  // namespace vital::kernels
