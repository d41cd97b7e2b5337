#pragma once

// Informative token aggregation for the slide-only student: deformable
// self-attention, DPC-KNN clustering and significance-weighted merging.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "dmml/dmsf.hpp"
#include "dmml/error.hpp"
#include "dmml/nn.hpp"
#include "dmml/tensor.hpp"

namespace dmml {

struct ItaConfig {
  std::size_t key_h = 8;
  std::size_t key_w = 8;
  std::size_t width = 32;
  std::size_t heads = 4;
  std::size_t offset_hidden = 8;
  double offset_scale = 0.5;
  std::size_t clusters = 8;
  std::size_t neighbors = 5;
  std::size_t pool_hidden = 32;
  std::size_t rep_dim = 256;
};

struct SelfAttentionParams {
  OffsetNetwork offsets;
  ProjectionSet proj;

  static SelfAttentionParams create(ParamStore& store, const std::string& name, std::size_t slide_c,
                                    const ItaConfig& cfg, Rng& rng) {
    return {OffsetNetwork::create(store, name + ".offsets", slide_c, cfg.offset_hidden, cfg.offset_scale,
                                  ParamGroup::kShared, rng),
            ProjectionSet::create(store, name + ".attn", slide_c, slide_c, cfg.width, cfg.width, cfg.heads,
                                  ParamGroup::kShared, rng)};
  }
};

// Offsets are predicted on the full slide grid and average-pooled onto the key
// grid; keys/values are resampled there, queries come from every token.
inline Tensor deformable_self_attention(const Tensor& slide, std::size_t h, std::size_t w,
                                        const SelfAttentionParams& p, std::size_t key_h, std::size_t key_w) {
  require(h * w > 0 && slide.rows() == h * w, "shape_mismatch", "deformable_self_attention: grid is not h x w");
  require(slide.cols() == p.proj.q.in(), "width_mismatch", "deformable_self_attention: embedding width mismatch");
  const std::size_t kh = std::min(key_h, h), kw = std::min(key_w, w);
  Tensor dp = adaptive_avg_pool(offset_network(slide, h, w, p.offsets), h, w, kh, kw);
  Tensor sampled = bilinear_sample(slide, deformed_points(dp, kh, kw), h, w);
  auto att = multi_head_attention(p.proj.q(slide), p.proj.k(sampled), p.proj.v(sampled), p.proj.heads);
  return p.proj.out(att.heads_concat);
}

// Row-major N x N squared Euclidean distances between the rows of z.
inline std::vector<double> pairwise_sq_distances(const Tensor& z) {
  const std::size_t n = z.rows(), c = z.cols();
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        const double t = z(i, k) - z(j, k);
        s += t * t;
      }
      d[i * n + j] = d[j * n + i] = s;
    }
  return d;
}

inline std::size_t square_side(const std::vector<double>& dist2) {
  const auto n = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(dist2.size()))));
  require(n * n == dist2.size(), "shape_mismatch", "distance matrix is not square");
  return n;
}

// rho_i = exp(-mean squared distance to the k nearest other tokens).
inline std::vector<double> local_density(const std::vector<double>& dist2, std::size_t k) {
  const std::size_t n = square_side(dist2);
  require(k >= 1 && k + 1 <= n, "k_out_of_range",
          "local_density: k=" + std::to_string(k) + " needs 1 <= k <= N-1 with N=" + std::to_string(n));
  std::vector<double> rho(n);
  std::vector<std::size_t> others;
  for (std::size_t i = 0; i < n; ++i) {
    others.clear();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) others.push_back(j);
    std::partial_sort(others.begin(), others.begin() + static_cast<std::ptrdiff_t>(k), others.end(),
                      [&](std::size_t a, std::size_t b) {
                        const double da = dist2[i * n + a], db = dist2[i * n + b];
                        return da < db || (da == db && a < b);
                      });
    double s = 0.0;
    for (std::size_t t = 0; t < k; ++t) s += dist2[i * n + others[t]];
    rho[i] = std::exp(-s / static_cast<double>(k));
  }
  return rho;
}

// Tokens by density rank: rho descending, then index ascending.
inline std::vector<std::size_t> density_order(const std::vector<double>& rho) {
  std::vector<std::size_t> order(rho.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rho[a] > rho[b]; });
  return order;
}

inline std::vector<double> relative_distance(const std::vector<double>& dist2, const std::vector<double>& rho) {
  const std::size_t n = square_side(dist2);
  require(rho.size() == n, "shape_mismatch", "relative_distance: rho length differs from N");
  std::vector<double> xi(n, 0.0);
  if (n == 0) return xi;
  const auto order = density_order(rho);
  const std::size_t top = order[0];
  for (std::size_t j = 0; j < n; ++j) xi[top] = std::max(xi[top], dist2[top * n + j]);
  for (std::size_t r = 1; r < n; ++r) {
    const std::size_t i = order[r];
    double best = dist2[i * n + order[0]];
    for (std::size_t s = 1; s < r; ++s) best = std::min(best, dist2[i * n + order[s]]);
    xi[i] = best;
  }
  return xi;
}

struct CenterAssignment {
  std::vector<std::size_t> centers;     // ascending token index; cluster id = position
  std::vector<std::size_t> assignment;  // per token
};

inline CenterAssignment select_centers_and_assign(const std::vector<double>& rho, const std::vector<double>& xi,
                                                  const std::vector<double>& dist2, std::size_t k_clusters) {
  const std::size_t n = square_side(dist2);
  require(rho.size() == n && xi.size() == n, "shape_mismatch", "select_centers_and_assign: length mismatch");
  require(k_clusters >= 1 && k_clusters <= n, "k_out_of_range",
          "select_centers_and_assign: K=" + std::to_string(k_clusters) + " exceeds N=" + std::to_string(n));
  std::vector<std::size_t> by_score(n);
  std::iota(by_score.begin(), by_score.end(), 0);
  std::stable_sort(by_score.begin(), by_score.end(),
                   [&](std::size_t a, std::size_t b) { return rho[a] * xi[a] > rho[b] * xi[b]; });
  CenterAssignment out;
  out.centers.assign(by_score.begin(), by_score.begin() + static_cast<std::ptrdiff_t>(k_clusters));
  std::sort(out.centers.begin(), out.centers.end());

  constexpr std::size_t kUnset = static_cast<std::size_t>(-1);
  out.assignment.assign(n, kUnset);
  for (std::size_t c = 0; c < k_clusters; ++c) out.assignment[out.centers[c]] = c;

  const auto order = density_order(rho);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t i = order[r];
    if (out.assignment[i] != kUnset) continue;
    if (r == 0) {
      // Densest token without its own center joins the nearest center.
      std::size_t best = 0;
      for (std::size_t c = 1; c < k_clusters; ++c)
        if (dist2[i * n + out.centers[c]] < dist2[i * n + out.centers[best]]) best = c;
      out.assignment[i] = best;
      continue;
    }
    std::size_t nearest = order[0];
    for (std::size_t s = 1; s < r; ++s) {
      const std::size_t j = order[s];
      const double dj = dist2[i * n + j], dn = dist2[i * n + nearest];
      if (dj < dn || (dj == dn && j < nearest)) nearest = j;
    }
    out.assignment[i] = out.assignment[nearest];
  }
  return out;
}

struct ClusterResult {
  std::vector<double> rho;
  std::vector<double> xi;
  std::vector<double> score;
  std::vector<std::size_t> centers;
  std::vector<std::size_t> assignment;
  Tensor omega;       // [N, 1]
  Tensor prototypes;  // [K, c]
};

// K and k are clamped to what N tokens can support.
inline ClusterResult dpc_knn(const Tensor& z, std::size_t neighbors, std::size_t k_clusters) {
  const std::size_t n = z.rows();
  require(n >= 1, "empty_input", "dpc_knn: no tokens");
  ClusterResult r;
  const auto dist2 = pairwise_sq_distances(z);
  if (n == 1) r.rho = {1.0};
  else r.rho = local_density(dist2, std::min(neighbors, n - 1));
  r.xi = relative_distance(dist2, r.rho);
  r.score.resize(n);
  for (std::size_t i = 0; i < n; ++i) r.score[i] = r.rho[i] * r.xi[i];
  auto ca = select_centers_and_assign(r.rho, r.xi, dist2, std::min(k_clusters, n));
  r.centers = std::move(ca.centers);
  r.assignment = std::move(ca.assignment);
  return r;
}

struct MergeOutput {
  Tensor omega;       // [N, 1]
  Tensor prototypes;  // [K, c]
};

inline MergeOutput significance_and_merge(const Tensor& z, const std::vector<std::size_t>& assignment,
                                          std::size_t k_clusters, const Linear& significance) {
  require(significance.out() == 1, "shape_mismatch", "significance predictor must output one score");
  Tensor omega = sigmoid(significance(z));
  return {omega, weighted_cluster_merge(z, omega, assignment, k_clusters)};
}

struct ItaParams {
  SelfAttentionParams attention;
  Linear significance;
  AttentionPool pool;
  Linear project;

  static ItaParams create(ParamStore& store, const std::string& name, std::size_t slide_c, const ItaConfig& cfg,
                          Rng& rng) {
    ItaParams p;
    p.attention = SelfAttentionParams::create(store, name, slide_c, cfg, rng);
    p.significance = Linear::create(store, name + ".significance", cfg.width, 1, ParamGroup::kShared, rng);
    p.pool = AttentionPool::create(store, name + ".pool", cfg.width, cfg.pool_hidden, ParamGroup::kShared, rng);
    p.project = Linear::create(store, name + ".project", cfg.width, cfg.rep_dim, ParamGroup::kShared, rng);
    return p;
  }
};

struct ItaScaleOutput {
  Tensor tokens;  // Z [N, width]
  ClusterResult clusters;
  Tensor pooled;  // [1, width]
};

inline ItaScaleOutput ita_scale(const SlideInput& s, const ItaParams& p, const ItaConfig& cfg) {
  ItaScaleOutput o;
  o.tokens = deformable_self_attention(s.grid, s.h, s.w, p.attention, cfg.key_h, cfg.key_w);
  o.clusters = dpc_knn(detach(o.tokens), cfg.neighbors, cfg.clusters);
  auto merged = significance_and_merge(o.tokens, o.clusters.assignment, o.clusters.centers.size(), p.significance);
  o.clusters.omega = merged.omega;
  o.clusters.prototypes = merged.prototypes;
  o.pooled = p.pool(merged.prototypes);
  return o;
}

struct ItaOutput {
  ItaScaleOutput s10;
  ItaScaleOutput s20;
  Tensor rep10, rep20;  // per-magnification projections, [1, rep_dim]
  Tensor rep;           // projection of the magnification mean
};

inline ItaOutput ita_forward(const SlideInput& s10, const SlideInput& s20, const ItaParams& p, const ItaConfig& cfg) {
  ItaOutput o;
  o.s10 = ita_scale(s10, p, cfg);
  o.s20 = ita_scale(s20, p, cfg);
  o.rep10 = p.project(o.s10.pooled);
  o.rep20 = p.project(o.s20.pooled);
  // The projection is affine, so this equals project(mean of pooled).
  o.rep = scale(add(o.rep10, o.rep20), 0.5);
  return o;
}

}  // namespace dmml
