#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "common/test_util.hpp"
#include "dmml/gradcheck.hpp"
#include "dmml/igc.hpp"

namespace {

using namespace dmml;
using dmml::testing::error_code_of;

Tensor random(std::mt19937_64& gen, std::size_t r, std::size_t c, bool leaf = false) {
  std::uniform_real_distribution<> u(0.0, 1.0);
  std::vector<double> v(r * c);
  for (auto& x : v) x = u(gen);
  return Tensor::from(r, c, std::move(v), leaf);
}

TEST(Similarity, OrthonormalRowsGiveIdentity) {
  const auto a = Tensor::from(3, 4, {1, 0, 0, 0, 0, 0, 1, 0, 0, 1, 0, 0});
  const auto c = cross_scale_similarity({a, a, Subspace::kTumor});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(c(i, j), i == j ? 1.0 : 0.0);
}

TEST(Similarity, BatchOneIsCosine) {
  const auto a = Tensor::from(1, 3, {1, 2, 2});
  const auto b = Tensor::from(1, 3, {2, 0, 1});
  EXPECT_NEAR(cross_scale_similarity({a, b}).item(), 4.0 / (3.0 * std::sqrt(5.0)), 1e-15);
}

TEST(Similarity, HandInnerProducts) {
  const auto a = Tensor::from(2, 2, {3, 4, 1, 0});
  const auto b = Tensor::from(2, 2, {0, 2, 1, 1});
  const auto raw = cross_scale_similarity({a, b}, false);
  EXPECT_DOUBLE_EQ(raw(0, 0), 8.0);
  EXPECT_DOUBLE_EQ(raw(0, 1), 7.0);
  EXPECT_DOUBLE_EQ(raw(1, 0), 0.0);
  EXPECT_DOUBLE_EQ(raw(1, 1), 1.0);
  const auto c = cross_scale_similarity({a, b});
  EXPECT_NEAR(c(0, 0), 0.8, 1e-15);
  EXPECT_NEAR(c(0, 1), 7.0 / (5.0 * std::sqrt(2.0)), 1e-15);
  EXPECT_NEAR(c(1, 1), 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_FALSE(error_code_of([&] { cross_scale_similarity({a, Tensor::zeros(2, 3)}); }).empty());
}

TEST(Dev, Examples) {
  const auto equal = Tensor::from(2, 2, {0.4, 9, -3, 0.4});
  EXPECT_DOUBLE_EQ(dev_loss({equal}, 1.0).item(), 0.0);
  const auto c = Tensor::from(2, 2, {1, 0.2, 0.7, 3});
  EXPECT_DOUBLE_EQ(dev_loss({c}, 1.0).item(), 1.0);
  EXPECT_DOUBLE_EQ(dev_loss({c}, 0.0).item(), 0.0);
  EXPECT_DOUBLE_EQ(dev_loss({c, c}, 0.5).item(), 1.0);
  EXPECT_EQ(error_code_of([] { dev_loss({Tensor::zeros(2, 3)}, 1.0); }), "not_square");
}

TEST(Dev, IdenticalScalesGiveZero) {
  std::mt19937_64 gen(4);
  const auto a = random(gen, 5, 9);
  const auto rec = cross_scale_similarity({a, a});
  EXPECT_NEAR(dev_loss({rec}, 1.0).item(), 0.0, 1e-28);
}

TEST(Dev, Properties) {
  std::mt19937_64 gen(8);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t b = 1 + gen() % 6, d = 2 + gen() % 8;
    const auto a10 = random(gen, b, d), a20 = random(gen, b, d);
    const auto c = cross_scale_similarity({a10, a20});
    const double loss = dev_loss({c}, 0.3).item();
    EXPECT_GE(loss, 0.0);

    std::vector<std::size_t> perm(b);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), gen);
    std::vector<double> p10, p20;
    for (auto i : perm) {
      auto r10 = a10.row(i), r20 = a20.row(i);
      p10.insert(p10.end(), r10.begin(), r10.end());
      p20.insert(p20.end(), r20.begin(), r20.end());
    }
    const auto cp = cross_scale_similarity({Tensor::from(b, d, p10), Tensor::from(b, d, p20)});
    EXPECT_NEAR(dev_loss({cp}, 0.3).item(), loss, 1e-14);

    std::vector<double> off(c.data().begin(), c.data().end());
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < b; ++j)
        if (i != j) off[i * b + j] += std::uniform_real_distribution<>(-5, 5)(gen);
    EXPECT_EQ(dev_loss({Tensor::from(b, b, off)}, 0.3).item(), loss);
  }
}

TEST(Dev, GradientThroughSimilarity) {
  std::mt19937_64 gen(12);
  auto a10 = random(gen, 4, 6, true), a20 = random(gen, 4, 6, true);
  auto e10 = random(gen, 4, 6, true), e20 = random(gen, 4, 6, true);
  const auto r = gradcheck(
      [&] {
        return dev_loss({cross_scale_similarity({a10, a20}), cross_scale_similarity({e10, e20, Subspace::kTme})}, 0.9);
      },
      {a10, a20, e10, e20}, 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

}  // namespace
