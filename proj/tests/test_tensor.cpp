#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "cdb/tensor.hpp"
#include "oracles.hpp"

using namespace cdb;

TEST(Tensor, ShapeAndIndexing) {
  Tensor<float> t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  t(1, 2, 3) = 5.f;
  EXPECT_EQ(t[23], 5.f);
  EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>(3)), InvalidShape);
}

TEST(Tensor, ReshapeKeepsData) {
  Tensor<double> t({2, 6}, std::vector<double>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11});
  const auto r = t.reshaped({3, 4});
  EXPECT_EQ(r(2, 3), 11.0);
  EXPECT_THROW(t.reshaped({5}), InvalidShape);
}

TEST(AvgPool, AllOnes) {
  Tensor<double> f({1, 3, 3}, 1.0);
  const auto p = avg_pool_3x3_same(f);
  EXPECT_DOUBLE_EQ(p(0, 1, 1), 1.0);
  EXPECT_DOUBLE_EQ(p(0, 0, 1), 6.0 / 9);
  EXPECT_DOUBLE_EQ(p(0, 1, 0), 6.0 / 9);
  EXPECT_DOUBLE_EQ(p(0, 0, 0), 4.0 / 9);
  EXPECT_DOUBLE_EQ(p(0, 2, 2), 4.0 / 9);
}

TEST(AvgPool, CenterPeakSpreadsEverywhere) {
  Tensor<double> f({1, 3, 3});
  f(0, 1, 1) = 9.0;
  const auto p = avg_pool_3x3_same(f);
  for (double v : p.data()) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(AvgPool, MatchesNaiveOracle) {
  const auto f = oracle::random_tensor<float>({4, 8, 8}, 11);
  const auto p = avg_pool_3x3_same(f);
  const auto o = oracle::pool3(oracle::as_double(f), 4, 8, 8);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], o[i], 1e-6);
}

TEST(AvgPool, Errors) {
  EXPECT_THROW(avg_pool_3x3_same(Tensor<float>({0, 3, 3})), InvalidShape);
  EXPECT_THROW(avg_pool_3x3_same(Tensor<float>({3, 3})), InvalidShape);
  Tensor<float> nan({1, 2, 2});
  nan[1] = std::nanf("");
  EXPECT_THROW(avg_pool_3x3_same(nan), NonFinite);
}

TEST(PeakPositions, UniqueMax) {
  Tensor<float> f({1, 5, 5});
  f(0, 2, 3) = 1.f;
  EXPECT_EQ(peak_positions(f)[0], (Position{2, 3}));
}

TEST(PeakPositions, ConstantChannelTiesToFirst) {
  Tensor<float> f({1, 4, 4}, 0.5f);
  EXPECT_EQ(peak_positions(f)[0], (Position{0, 0}));
}

TEST(PeakPositions, MatchesScan) {
  const auto f = oracle::random_tensor<double>({6, 5, 5}, 3);
  const auto p = peak_positions(f);
  const auto o = oracle::argmax_scan(oracle::as_double(f), 6, 5, 5);
  for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(p[c], (Position{o[c].first, o[c].second}));
}

TEST(Matmul, Identity) {
  const auto a = oracle::random_tensor<double>({3, 3}, 5);
  Tensor<double> id({3, 3});
  for (std::size_t i = 0; i < 3; ++i) id(i, i) = 1;
  EXPECT_EQ(matmul(id, a), a);
}

TEST(Matmul, Small) {
  Tensor<float> a({2, 2}, std::vector<float>{1, 2, 3, 4});
  Tensor<float> b({2, 1}, std::vector<float>{1, 1});
  const auto c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c[0], 3.f);
  EXPECT_EQ(c[1], 7.f);
}

TEST(Matmul, MatchesTripleLoop) {
  const auto a = oracle::random_tensor<float>({7, 5}, 1);
  const auto b = oracle::random_tensor<float>({5, 3}, 2);
  const auto c = matmul(a, b);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 5; ++k) s += double(a(i, k)) * b(k, j);
      EXPECT_NEAR(c(i, j), s, 1e-5);
    }
}

TEST(Matmul, InnerMismatch) {
  EXPECT_THROW(matmul(Tensor<float>({2, 3}), Tensor<float>({2, 3})), InvalidShape);
}

TEST(L2Normalize, Rows) {
  Tensor<double> x({2, 2}, std::vector<double>{3, 4, 0, 0});
  const auto n = l2_normalize_rows(x);
  EXPECT_DOUBLE_EQ(n(0, 0), 0.6);
  EXPECT_DOUBLE_EQ(n(0, 1), 0.8);
  EXPECT_EQ(n(1, 0), 0.0);
  EXPECT_EQ(n(1, 1), 0.0);
}

TEST(L2Normalize, NormsAreUnitOrZero) {
  auto x = oracle::random_tensor<double>({8, 16}, 9);
  for (std::size_t j = 0; j < 16; ++j) x(3, j) = 0;
  const auto n = l2_normalize_rows(x);
  for (std::size_t i = 0; i < 8; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 16; ++j) s += n(i, j) * n(i, j);
    const double norm = std::sqrt(s);
    EXPECT_TRUE(norm == 0.0 || std::abs(norm - 1.0) <= 1e-6) << norm;
  }
}

TEST(Serialize, RoundTripBothPrecisions) {
  const auto f = oracle::random_tensor<float>({2, 3, 4}, 4);
  const auto d = oracle::random_tensor<double>({5}, 4);
  std::stringstream ss;
  write_tensor(ss, f);
  write_tensor(ss, d);
  EXPECT_EQ(read_tensor<float>(ss), f);
  const AnyTensor any = read_any_tensor(ss);
  ASSERT_TRUE(std::holds_alternative<Tensor<double>>(any));
  EXPECT_EQ(std::get<Tensor<double>>(any), d);
}

TEST(Serialize, BadMagic) {
  std::stringstream ss("XXXX");
  EXPECT_THROW(read_any_tensor(ss), FormatError);
}
