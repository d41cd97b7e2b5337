#pragma once

// Deformable attention with a zeroed offset head against plain attention over
// bilinearly resampled reference grids.

#include <algorithm>
#include <cmath>

#include "common/oracles.hpp"
#include "dmml/dmsf.hpp"
#include "dmml/ita.hpp"

namespace dmml::oracle {

inline Mat to_mat(const Tensor& t) {
  Mat m(t.rows());
  for (std::size_t i = 0; i < t.rows(); ++i) m[i] = t.row(i);
  return m;
}

inline std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c, double sd = 1.0) {
  std::vector<double> v(r * c);
  for (auto& x : v) x = sd * rng.normal();
  return Tensor::from(r, c, std::move(v));
}

inline Mat project_rows(const Mat& m, const Linear& l) { return affine(m, values(l.weight), values(l.bias)); }

// Reference points of a gh x gw grid resampled from an h x w slide.
inline Mat resample_grid(const Tensor& slide, std::size_t h, std::size_t w, std::size_t gh, std::size_t gw) {
  auto coord = [](std::size_t i, std::size_t n) { return n > 1 ? -1.0 + 2.0 * static_cast<double>(i) / (n - 1) : 0.0; };
  Mat out;
  for (std::size_t y = 0; y < gh; ++y)
    for (std::size_t x = 0; x < gw; ++x) out.push_back(bilinear(values(slide), h, w, slide.cols(), coord(x, gw), coord(y, gh)));
  return out;
}

inline void zero_offsets(OffsetNetwork& net) {
  for (auto* t : {&net.w2, &net.b2})
    for (auto& x : t->mutable_data()) x = 0.0;
}

inline void randomize(const ParamStore& store, Rng& rng, double sd) {
  for (auto e : store.entries())
    for (auto& x : e.tensor.mutable_data()) x = sd * rng.normal();
}

// Max |deviation| over the fused output and the head-mean attention map.
inline double cross_attention_zero_offset_deviation(std::uint64_t seed, std::size_t sh, std::size_t sw) {
  Rng rng(seed);
  DmsfConfig cfg;
  cfg.query_h = 2;
  cfg.query_w = 3;
  cfg.width = 8;
  cfg.heads = 2;
  cfg.offset_hidden = 4;
  cfg.rep_dim = 5;
  const std::size_t c = 4;
  ParamStore store;
  auto branch = DmsfBranch::create(store, "b", 7, c, cfg, ParamGroup::kTumor, rng);
  randomize(store, rng, 0.5);
  zero_offsets(branch.offsets);
  const auto slide = random_tensor(rng, sh * sw, c);
  const auto tokens = random_tensor(rng, cfg.queries(), cfg.width);
  const auto got = deformable_cross_attention(tokens, cfg.query_h, cfg.query_w, slide, sh, sw, branch.offsets,
                                              branch.cross);
  const auto sampled = resample_grid(slide, sh, sw, cfg.query_h, cfg.query_w);
  const auto& p = branch.cross;
  const auto att = attention(project_rows(to_mat(tokens), p.q), project_rows(sampled, p.k), project_rows(sampled, p.v), p.heads);
  const auto z = project_rows(att.out, p.out);
  double dev = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i)
    for (std::size_t j = 0; j < z[i].size(); ++j) dev = std::max(dev, std::abs(z[i][j] - got.z_m(i, j)));
  for (std::size_t i = 0; i < att.attn.size(); ++i)
    for (std::size_t j = 0; j < att.attn[i].size(); ++j) dev = std::max(dev, std::abs(att.attn[i][j] - got.attn(i, j)));
  return dev;
}

inline double self_attention_zero_offset_deviation(std::uint64_t seed, std::size_t h, std::size_t w, std::size_t kh,
                                                   std::size_t kw) {
  Rng rng(seed);
  ItaConfig cfg;
  cfg.width = 8;
  cfg.heads = 2;
  const std::size_t c = 3;
  ParamStore store;
  auto p = SelfAttentionParams::create(store, "a", c, cfg, rng);
  randomize(store, rng, 0.5);
  zero_offsets(p.offsets);
  const auto slide = random_tensor(rng, h * w, c);
  const auto got = deformable_self_attention(slide, h, w, p, kh, kw);
  const auto keys = resample_grid(slide, h, w, std::min(kh, h), std::min(kw, w));
  const auto att = attention(project_rows(to_mat(slide), p.proj.q), project_rows(keys, p.proj.k), project_rows(keys, p.proj.v), cfg.heads);
  const auto want = project_rows(att.out, p.proj.out);
  double dev = 0.0;
  for (std::size_t i = 0; i < want.size(); ++i)
    for (std::size_t j = 0; j < want[i].size(); ++j) dev = std::max(dev, std::abs(want[i][j] - got(i, j)));
  return dev;
}

}  // namespace dmml::oracle
