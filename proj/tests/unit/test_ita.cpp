#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>

#include "common/oracles.hpp"
#include "common/reductions.hpp"
#include "common/test_util.hpp"
#include "dmml/gradcheck_suite.hpp"
#include "dmml/ita.hpp"

namespace {

using namespace dmml;
using dmml::testing::error_code_of;
using oracle::Mat;

Tensor from_mat(const Mat& m) {
  std::vector<double> v;
  for (const auto& r : m) v.insert(v.end(), r.begin(), r.end());
  return Tensor::from(m.size(), m[0].size(), v);
}

Mat to_mat(const Tensor& t) {
  Mat m(t.rows());
  for (std::size_t i = 0; i < t.rows(); ++i) m[i] = t.row(i);
  return m;
}


Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c, double sd = 1.0) {
  std::vector<double> v(r * c);
  for (auto& x : v) x = sd * rng.normal();
  return Tensor::from(r, c, std::move(v));
}

const Mat kLine{{0}, {1}, {2}, {10}};

TEST(Density, Examples) {
  const auto two = pairwise_sq_distances(Tensor::from(2, 2, {1, 1, 1, 1}));
  EXPECT_EQ(local_density(two, 1), (std::vector<double>{1.0, 1.0}));
  const auto d = pairwise_sq_distances(from_mat(kLine));
  const auto rho = local_density(d, 2);
  EXPECT_DOUBLE_EQ(rho[0], std::exp(-2.5));
  EXPECT_DOUBLE_EQ(rho[1], std::exp(-1.0));
  EXPECT_DOUBLE_EQ(rho[2], std::exp(-2.5));
  EXPECT_DOUBLE_EQ(rho[3], std::exp(-72.5));
  EXPECT_EQ(error_code_of([&] { local_density(d, 4); }), "k_out_of_range");
  EXPECT_EQ(error_code_of([&] { local_density(d, 0); }), "k_out_of_range");
}

TEST(Density, ScalingPreservesOrder) {
  Rng rng(3);
  const auto z = random_tensor(rng, 20, 3);
  const auto rho = local_density(pairwise_sq_distances(z), 4);
  auto scaled = z;
  scaled = scale(z, 1.7);
  const auto rho2 = local_density(pairwise_sq_distances(scaled), 4);
  EXPECT_EQ(density_order(rho), density_order(rho2));
  for (std::size_t i = 0; i < rho.size(); ++i) EXPECT_NEAR(std::log(rho2[i]), 1.7 * 1.7 * std::log(rho[i]), 1e-9);
}

TEST(RelativeDistance, Examples) {
  EXPECT_EQ(relative_distance({0.0}, {1.0}), std::vector<double>{0.0});
  const auto d = pairwise_sq_distances(from_mat(kLine));
  EXPECT_EQ(relative_distance(d, local_density(d, 2)), (std::vector<double>{1, 81, 1, 64}));
  const auto same = pairwise_sq_distances(Tensor::from(3, 1, {2, 2, 2}));
  const auto xi = relative_distance(same, local_density(same, 2));
  EXPECT_EQ(xi, (std::vector<double>{0, 0, 0}));
}

TEST(Centers, LineExample) {
  const auto r = dpc_knn(from_mat(kLine), 2, 2);
  EXPECT_NEAR(r.score[0], std::exp(-2.5), 1e-12);
  EXPECT_NEAR(r.score[1], 81 * std::exp(-1.0), 1e-12);
  EXPECT_EQ(r.centers, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(r.assignment, (std::vector<std::size_t>{0, 1, 1, 1}));
}

TEST(Centers, KEqualsNAndErrors) {
  const auto r = dpc_knn(from_mat(kLine), 2, 4);
  EXPECT_EQ(r.centers, (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_EQ(r.assignment, (std::vector<std::size_t>{0, 1, 2, 3}));
  const auto d = pairwise_sq_distances(from_mat(kLine));
  const auto rho = local_density(d, 2);
  EXPECT_EQ(error_code_of([&] { select_centers_and_assign(rho, relative_distance(d, rho), d, 5); }),
            "k_out_of_range");
}

TEST(Centers, SeparatedIdenticalGroups) {
  Mat z;
  for (int i = 0; i < 5; ++i) z.push_back({0.0, 0.0});
  for (int i = 0; i < 4; ++i) z.push_back({6.0, -3.0});
  const auto r = dpc_knn(from_mat(z), 3, 2);
  const auto o = oracle::dpc(z, 3, 2);
  EXPECT_EQ(r.assignment, o.assignment);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(r.assignment[i], i < 5 ? r.assignment[0] : r.assignment[5]);
  EXPECT_NE(r.assignment[0], r.assignment[5]);
}

void expect_matches_oracle(const Mat& z, std::size_t k, std::size_t clusters) {
  const auto got = dpc_knn(from_mat(z), k, clusters);
  const auto want = oracle::dpc(z, k, clusters);
  ASSERT_EQ(got.rho, want.rho);
  ASSERT_EQ(got.xi, want.xi);
  ASSERT_EQ(got.score, want.score);
  ASSERT_EQ(got.centers, want.centers);
  ASSERT_EQ(got.assignment, want.assignment);
}

TEST(DpcOracle, RandomAndTiedInstances) {
  std::mt19937_64 gen(2024);
  std::normal_distribution<> nd;
  for (int trial = 0; trial < 150; ++trial) {
    const std::size_t n = 2 + gen() % 63, c = 1 + gen() % 4;
    const std::size_t k = 1 + gen() % std::min<std::size_t>(7, n - 1);
    const std::size_t clusters = 1 + gen() % std::min<std::size_t>(8, n);
    Mat z(n, std::vector<double>(c));
    for (auto& r : z)
      for (auto& x : r) x = trial % 3 == 0 ? static_cast<double>(gen() % 3) : nd(gen);
    if (trial % 3 == 1)
      for (std::size_t i = 1; i < n; i += 3) z[i] = z[i - 1];  // exact duplicates
    SCOPED_TRACE("trial " + std::to_string(trial));
    expect_matches_oracle(z, k, clusters);
  }
}

TEST(DpcOracle, AssignmentInvariants) {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const auto r = dpc_knn(random_tensor(rng, 40, 3), 5, 6);
    std::set<std::size_t> distinct(r.centers.begin(), r.centers.end());
    EXPECT_EQ(distinct.size(), 6u);
    for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(r.assignment[r.centers[c]], c);
    for (auto a : r.assignment) EXPECT_LT(a, 6u);
  }
}

TEST(DpcOracle, PermutationEquivariance) {
  Rng rng(6);
  std::mt19937_64 gen(6);
  Linear sig;
  ParamStore store;
  sig = Linear::create(store, "sig", 3, 1, ParamGroup::kShared, rng);
  for (int trial = 0; trial < 20; ++trial) {
    const auto z = random_tensor(rng, 30, 3);
    std::vector<std::size_t> perm(30);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), gen);
    Mat pz;
    for (auto p : perm) pz.push_back(z.row(p));
    const auto a = dpc_knn(z, 4, 5), b = dpc_knn(from_mat(pz), 4, 5);
    // Same partition up to cluster relabeling.
    std::map<std::size_t, std::size_t> relabel;
    for (std::size_t i = 0; i < 30; ++i) {
      auto [it, fresh] = relabel.emplace(b.assignment[i], a.assignment[perm[i]]);
      ASSERT_EQ(it->second, a.assignment[perm[i]]);
    }
    auto protos = [&](const Tensor& zz, const ClusterResult& r) {
      auto m = to_mat(significance_and_merge(zz, r.assignment, 5, sig).prototypes);
      std::sort(m.begin(), m.end());
      return m;
    };
    const auto pa = protos(z, a), pb = protos(from_mat(pz), b);
    for (std::size_t k = 0; k < 5; ++k)
      for (std::size_t j = 0; j < 3; ++j) ASSERT_NEAR(pa[k][j], pb[k][j], 1e-12);
  }
}

TEST(Merge, Examples) {
  const auto z = Tensor::from(3, 2, {1, 2, 3, 6, 10, 20});
  const auto eq = weighted_cluster_merge(z, Tensor::from(3, 1, {0.5, 0.5, 0.5}), {0, 0, 1}, 2);
  EXPECT_DOUBLE_EQ(eq(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(eq(0, 1), 4.0);
  EXPECT_DOUBLE_EQ(eq(1, 0), 10.0);
  const auto w = weighted_cluster_merge(z, Tensor::from(3, 1, {0.2, 0.6, 0.9}), {0, 0, 1}, 2);
  EXPECT_NEAR(w(0, 0), (0.2 * 1 + 0.6 * 3) / 0.8, 1e-15);
  EXPECT_NEAR(w(0, 1), (0.2 * 2 + 0.6 * 6) / 0.8, 1e-15);
  EXPECT_EQ(error_code_of([&] { weighted_cluster_merge(z, Tensor::from(3, 1, {1, 1, 1}), {0, 0, 0}, 2); }),
            "empty_cluster");
}

TEST(Merge, ConvexCombination) {
  Rng rng(8);
  ParamStore store;
  auto sig = Linear::create(store, "sig", 4, 1, ParamGroup::kShared, rng);
  for (int trial = 0; trial < 20; ++trial) {
    const auto z = random_tensor(rng, 25, 4);
    const auto cl = dpc_knn(z, 3, 4);
    const auto m = significance_and_merge(z, cl.assignment, 4, sig);
    for (std::size_t k = 0; k < 4; ++k) {
      double wsum = 0.0;
      std::vector<double> acc(4, 0.0), lo(4, 1e300), hi(4, -1e300);
      for (std::size_t i = 0; i < 25; ++i) {
        if (cl.assignment[i] != k) continue;
        const double w = m.omega(i, 0);
        ASSERT_GT(w, 0.0);
        ASSERT_LT(w, 1.0);
        wsum += w;
        for (std::size_t j = 0; j < 4; ++j) {
          acc[j] += w * z(i, j);
          lo[j] = std::min(lo[j], z(i, j));
          hi[j] = std::max(hi[j], z(i, j));
        }
      }
      for (std::size_t j = 0; j < 4; ++j) {
        EXPECT_NEAR(m.prototypes(k, j), acc[j] / wsum, 1e-12);
        EXPECT_GE(m.prototypes(k, j), lo[j] - 1e-12);
        EXPECT_LE(m.prototypes(k, j), hi[j] + 1e-12);
      }
    }
  }
}

TEST(Merge, DuplicatingTokensKeepsPrototypes) {
  Rng rng(10);
  ParamStore store;
  auto sig = Linear::create(store, "sig", 2, 1, ParamGroup::kShared, rng);
  for (int trial = 0; trial < 10; ++trial) {
    Mat z;
    for (int g = 0; g < 3; ++g) {
      const double cx = 10.0 * g, cy = -7.0 * g;
      for (int i = 0; i < 5; ++i) z.push_back({cx + 0.1 * rng.normal(), cy + 0.1 * rng.normal()});
    }
    Mat dup = z;
    dup.insert(dup.end(), z.begin(), z.end());
    const std::size_t k = 2;
    auto protos = [&](const Mat& m, std::size_t nb) {
      const auto t = from_mat(m);
      const auto cl = dpc_knn(t, nb, 3);
      auto p = to_mat(significance_and_merge(t, cl.assignment, 3, sig).prototypes);
      std::sort(p.begin(), p.end());
      return p;
    };
    const auto a = protos(z, k), b = protos(dup, 2 * k + 1);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t j = 0; j < 2; ++j) ASSERT_NEAR(a[c][j], b[c][j], 1e-12);
  }
}

TEST(SelfAttention, ZeroOffsetEqualsStandardAttention) {
  // Key grids larger than, equal to and smaller than the slide.
  for (auto [kh, kw] : {std::pair<std::size_t, std::size_t>{8, 8}, {4, 5}, {2, 3}, {1, 1}})
    EXPECT_LT(oracle::self_attention_zero_offset_deviation(12 + kh, 4, 5, kh, kw), 1e-6) << kh << "x" << kw;
}

TEST(SelfAttention, SingleTokenIsValueProjection) {
  Rng rng(13);
  ItaConfig cfg;
  cfg.width = 4;
  cfg.heads = 1;
  ParamStore store;
  auto p = SelfAttentionParams::create(store, "a", 3, cfg, rng);
  const auto tok = random_tensor(rng, 1, 3);
  const auto got = deformable_self_attention(tok, 1, 1, p, 8, 8);
  const auto want = p.proj.out(p.proj.v(tok));
  for (std::size_t j = 0; j < want.cols(); ++j) EXPECT_NEAR(got(0, j), want(0, j), 1e-14);
}

TEST(ItaForward, ShapesAndSingleCluster) {
  Rng rng(14);
  ItaConfig cfg;
  ParamStore store;
  auto p = ItaParams::create(store, "ita", 6, cfg, rng);
  const SlideInput s10{random_tensor(rng, 16, 6), 4, 4}, s20{random_tensor(rng, 64, 6), 8, 8};
  const auto out = ita_forward(s10, s20, p, cfg);
  EXPECT_EQ(out.s10.clusters.prototypes.rows(), cfg.clusters);
  EXPECT_EQ(out.s20.clusters.prototypes.rows(), cfg.clusters);
  EXPECT_EQ(out.rep.cols(), 256u);

  cfg.clusters = 1;
  const auto one = ita_forward(s10, s20, p, cfg);
  const auto& c = one.s10.clusters;
  const auto& z = one.s10.tokens;
  ASSERT_EQ(c.prototypes.rows(), 1u);
  for (std::size_t j = 0; j < z.cols(); ++j) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < z.rows(); ++i) {
      num += c.omega(i, 0) * z(i, j);
      den += c.omega(i, 0);
    }
    EXPECT_NEAR(c.prototypes(0, j), num / den, 1e-12);
  }
}

TEST(ItaForward, GradientsMatchFiniteDifferences) {
  EXPECT_LT(run_gradcheck("self_attention").result.max_rel_error, 1e-4);
  EXPECT_LT(run_gradcheck("ita_merge").result.max_rel_error, 1e-4);
}

}  // namespace
