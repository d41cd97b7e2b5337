#pragma once

// Synthetic cohorts with planted tumor / microenvironment latent structure.
//
// Each case draws latents z_T, z_E. Tumor genes are A_T z_T + noise and TME
// genes A_E z_E + noise. Slide patches inside planted tumor blobs carry a
// z_T-derived signature, patches outside a z_E-derived one; the 20x grid is
// the 2x upsampling of the same noise-free field plus independent noise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <string>
#include <vector>

#include "dmml/cohort.hpp"
#include "dmml/error.hpp"
#include "dmml/rng.hpp"

namespace dmml {

struct SynthConfig {
  std::size_t n_cases = 200;
  std::size_t grid_h10 = 8;
  std::size_t grid_w10 = 8;
  std::size_t embed_dim = 32;
  std::size_t n_tumor_genes = 64;
  std::size_t n_tme_genes = 64;
  std::size_t latent_dim = 4;
  double noise_sigma = 0.5;
  std::uint64_t seed = 0;
  // Rejection margin on mean(z) keeping latents off the diagnosis boundaries.
  double label_margin = 0.15;
  // Std of the log-hazard across cases.
  double hazard_scale = 4.0;
  double censor_rate = 0.25;
  // Per-patch nuisance variation independent of the latents; it is part of
  // the field shared by both magnifications.
  double patch_jitter = 0.0;
  // Std of a per-case shift added to every patch at both magnifications
  // (slide-only nuisance, like staining differences between slides).
  double stain_sigma = 1.0;

  std::size_t grid_h20() const { return 2 * grid_h10; }
  std::size_t grid_w20() const { return 2 * grid_w10; }

  void validate() const {
    require(n_cases >= 1, "bad_config", "synth: n_cases must be >= 1");
    require(n_tumor_genes >= 1 && n_tme_genes >= 1, "bad_config", "synth: gene counts must be >= 1");
    require(grid_h10 >= 1 && grid_w10 >= 1 && embed_dim >= 1 && latent_dim >= 1, "bad_config",
            "synth: grid dims, embed_dim and latent_dim must be >= 1");
    require(noise_sigma >= 0.0, "bad_config", "synth: noise_sigma must be >= 0");
    require(censor_rate >= 0.0 && censor_rate < 1.0, "bad_config", "synth: censor_rate must be in [0,1)");
    require(patch_jitter >= 0.0 && stain_sigma >= 0.0 && label_margin >= 0.0, "bad_config",
            "synth: negative jitter, stain or margin");
  }
};

namespace detail {

// Linear-interpolation percentile of sorted values, q in [0,1].
inline double percentile_sorted(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline std::vector<double> normal_vector(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

inline double mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// rows x cols matrix times vector.
inline std::vector<double> matvec(const std::vector<double>& m, const std::vector<double>& x, std::size_t rows) {
  const std::size_t cols = x.size();
  std::vector<double> y(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) y[r] += m[r * cols + c] * x[c];
  return y;
}

// One or two discs covering between 10% and 90% of the grid.
inline std::vector<bool> planted_tumor_mask(Rng& rng, std::size_t h, std::size_t w) {
  const std::size_t n = h * w;
  for (int attempt = 0; attempt < 200; ++attempt) {
    std::vector<bool> mask(n, false);
    const int blobs = 1 + static_cast<int>(rng.below(2));
    const double span = static_cast<double>(std::min(h, w));
    for (int b = 0; b < blobs; ++b) {
      const double cy = rng.uniform(0.0, static_cast<double>(h));
      const double cx = rng.uniform(0.0, static_cast<double>(w));
      const double r = rng.uniform(0.2, 0.45) * span;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
          if (dy * dy + dx * dx <= r * r) mask[y * w + x] = true;
        }
    }
    const auto covered = static_cast<double>(std::count(mask.begin(), mask.end(), true));
    const double frac = covered / static_cast<double>(n);
    if (frac >= 0.1 && frac <= 0.9) return mask;
  }
  // Left half; only reached for degenerate grids.
  std::vector<bool> mask(n, false);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < std::max<std::size_t>(1, w / 2); ++x) mask[y * w + x] = true;
  return mask;
}

}  // namespace detail

// Quartile bins: boundaries are the 25/50/75th percentiles (linear
// interpolation); a value equal to a boundary goes to the lower bin.
inline std::vector<std::size_t> survival_quartile_bins(const std::vector<double>& times) {
  require(!times.empty(), "empty_input", "survival_quartile_bins: no times");
  for (double t : times) require(t > 0.0, "nonpositive_time", "survival_quartile_bins: times must be positive");
  std::vector<double> sorted(times);
  std::sort(sorted.begin(), sorted.end());
  const double q[3] = {detail::percentile_sorted(sorted, 0.25), detail::percentile_sorted(sorted, 0.5),
                       detail::percentile_sorted(sorted, 0.75)};
  std::vector<std::size_t> bins(times.size());
  for (std::size_t i = 0; i < times.size(); ++i) {
    std::size_t b = 0;
    while (b < 3 && times[i] > q[b]) ++b;
    bins[i] = b;
  }
  return bins;
}

// Deterministic given cfg (including seed).
inline Cohort generate_cohort(const SynthConfig& cfg) {
  cfg.validate();
  const std::size_t L = cfg.latent_dim, C = cfg.embed_dim;
  const std::size_t nt = cfg.n_tumor_genes, ne = cfg.n_tme_genes, ng = nt + ne;

  Rng global(derive_seed(cfg.seed, 0));
  auto loading = [&](std::size_t rows) {
    std::vector<double> a(rows * L);
    for (std::size_t r = 0; r < rows; ++r) {
      const double s = global.uniform(0.1, 1.5);
      for (std::size_t k = 0; k < L; ++k) a[r * L + k] = s * global.normal();
    }
    return a;
  };
  const auto a_t = loading(nt);
  const auto a_e = loading(ne);
  const double sig_scale = 1.0 / std::sqrt(static_cast<double>(L));
  auto signature = [&]() {
    std::vector<double> b(C * L);
    for (auto& x : b) x = sig_scale * global.normal();
    return b;
  };
  const auto b_t = signature();
  const auto b_e = signature();
  const auto m_t = detail::normal_vector(global, C);
  const auto m_e = detail::normal_vector(global, C);
  const auto w_surv = detail::normal_vector(global, 2 * L);
  const double w_norm = std::sqrt(std::inner_product(w_surv.begin(), w_surv.end(), w_surv.begin(), 0.0));

  // Gene order on disk is a permutation; the geneset file recovers the split.
  std::vector<std::size_t> perm(ng);
  std::iota(perm.begin(), perm.end(), 0);
  global.shuffle(perm);  // perm[k] = on-disk index of generator gene k

  Cohort cohort;
  cohort.dims = {cfg.grid_h10, cfg.grid_w10, cfg.grid_h20(), cfg.grid_w20(), C, ng};
  cohort.gene_ids.resize(ng);
  for (std::size_t i = 0; i < ng; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "G%05zu", i);
    cohort.gene_ids[i] = buf;
  }
  SynthMetadata meta;
  for (std::size_t k = 0; k < ng; ++k) (k < nt ? meta.tumor_gene_idx : meta.tme_gene_idx).push_back(perm[k]);
  std::sort(meta.tumor_gene_idx.begin(), meta.tumor_gene_idx.end());
  std::sort(meta.tme_gene_idx.begin(), meta.tme_gene_idx.end());
  for (std::size_t i = 0; i < ng; ++i) {
    const bool tumor = std::binary_search(meta.tumor_gene_idx.begin(), meta.tumor_gene_idx.end(), i);
    cohort.geneset.push_back({cohort.gene_ids[i], tumor ? "TUMOR" : "TME"});
  }
  cohort.synth = meta;

  std::vector<double> tumor_norms(cfg.n_cases), event_times(cfg.n_cases);
  const std::size_t h10 = cfg.grid_h10, w10 = cfg.grid_w10, h20 = cfg.grid_h20(), w20 = cfg.grid_w20();
  for (std::size_t ci = 0; ci < cfg.n_cases; ++ci) {
    Rng rng(derive_seed(cfg.seed, 1000 + ci));
    Case cs;
    char buf[32];
    std::snprintf(buf, sizeof buf, "case%05zu", ci);
    cs.case_id = buf;

    auto draw_latent = [&]() {
      for (;;) {
        auto z = detail::normal_vector(rng, L);
        if (std::abs(detail::mean(z)) >= cfg.label_margin) return z;
      }
    };
    const auto z_t = draw_latent();
    const auto z_e = draw_latent();

    const auto gt = detail::matvec(a_t, z_t, nt);
    const auto ge = detail::matvec(a_e, z_e, ne);
    cs.genes.assign(ng, 0.0);
    for (std::size_t k = 0; k < ng; ++k) {
      const double v = k < nt ? gt[k] : ge[k - nt];
      cs.genes[perm[k]] = to_f32(v + cfg.noise_sigma * rng.normal());
    }

    cs.tumor_mask10 = detail::planted_tumor_mask(rng, h10, w10);
    const auto sig_t = detail::matvec(b_t, z_t, C);
    const auto sig_e = detail::matvec(b_e, z_e, C);
    auto stain = detail::normal_vector(rng, C);
    for (auto& x : stain) x *= cfg.stain_sigma;
    std::vector<double> field(h10 * w10 * C);
    for (std::size_t p = 0; p < h10 * w10; ++p) {
      const bool tumor = cs.tumor_mask10[p];
      for (std::size_t k = 0; k < C; ++k) {
        const double base = (tumor ? sig_t[k] + m_t[k] : sig_e[k] + m_e[k]) + stain[k];
        field[p * C + k] = to_f32(base + cfg.patch_jitter * rng.normal());
      }
    }
    cs.grid10 = {h10, w10, C, std::vector<double>(field.size()), {}};
    for (std::size_t i = 0; i < field.size(); ++i) cs.grid10.data[i] = to_f32(field[i] + cfg.noise_sigma * rng.normal());
    cs.grid20 = {h20, w20, C, std::vector<double>(h20 * w20 * C), {}};
    for (std::size_t y = 0; y < h20; ++y)
      for (std::size_t x = 0; x < w20; ++x)
        for (std::size_t k = 0; k < C; ++k)
          cs.grid20.data[(y * w20 + x) * C + k] =
              to_f32(field[((y / 2) * w10 + x / 2) * C + k] + cfg.noise_sigma * rng.normal());

    // Proportional hazards: T = E / exp(eta), E ~ Exp(1).
    double lin = 0.0;
    for (std::size_t k = 0; k < L; ++k) lin += w_surv[k] * z_t[k] + w_surv[L + k] * z_e[k];
    const double eta = cfg.hazard_scale * lin / w_norm;
    double u = 0.0;
    while (u <= 0.0) u = rng.uniform();
    const double event_time = -std::log(u) * std::exp(-eta);
    const bool censor = rng.uniform() < cfg.censor_rate;
    double observed = event_time;
    if (censor) {
      double f = 0.0;
      while (f <= 0.0) f = rng.uniform();
      observed = f * event_time;
    }
    cs.censored = censor;
    cs.surv_time = std::max(observed, 1e-30);
    event_times[ci] = cs.surv_time;

    cs.diagnosis = 2 * (detail::mean(z_t) > 0.0 ? 1 : 0) + (detail::mean(z_e) > 0.0 ? 1 : 0);
    double n2 = 0.0;
    for (double z : z_t) n2 += z * z;
    tumor_norms[ci] = std::sqrt(n2);
    cohort.cases.push_back(std::move(cs));
  }

  // Grade: tercile of ||z_T|| within the cohort.
  std::vector<double> sorted_norms(tumor_norms);
  std::sort(sorted_norms.begin(), sorted_norms.end());
  const double t1 = detail::percentile_sorted(sorted_norms, 1.0 / 3.0);
  const double t2 = detail::percentile_sorted(sorted_norms, 2.0 / 3.0);
  const auto bins = survival_quartile_bins(event_times);
  for (std::size_t ci = 0; ci < cfg.n_cases; ++ci) {
    auto& cs = cohort.cases[ci];
    cs.grade = tumor_norms[ci] <= t1 ? 0 : (tumor_norms[ci] <= t2 ? 1 : 2);
    cs.surv_bin = bins[ci];
  }
  return cohort;
}

}  // namespace dmml
