#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "dmml/error.hpp"
#include "dmml/tensor.hpp"

namespace dmml {

// h x w grid of c-wide patch embeddings, row-major (y, x, channel).
struct SlideGrid {
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t c = 0;
  std::vector<double> data;
  // Padding flags from patch sampling; empty means every slot is a real patch.
  std::vector<bool> valid;

  std::size_t patches() const { return h * w; }
  double at(std::size_t y, std::size_t x, std::size_t k) const { return data[(y * w + x) * c + k]; }
  Tensor as_tensor() const { return Tensor::from(h * w, c, data); }
};

struct Case {
  std::string case_id;
  // Full expression vector ordered like Cohort::gene_ids; empty when genes
  // were not loaded.
  std::vector<double> genes;
  SlideGrid grid10;
  SlideGrid grid20;
  std::size_t diagnosis = 0;  // {0..3}
  std::size_t grade = 0;      // {0..2}
  std::size_t surv_bin = 0;   // {0..3}
  double surv_time = 0.0;     // observed time (event or censoring)
  bool censored = false;
  std::vector<bool> tumor_mask10;  // empty when unavailable
};

struct CohortDims {
  std::size_t h10 = 0, w10 = 0, h20 = 0, w20 = 0, c = 0, n_genes = 0;
  bool operator==(const CohortDims&) const = default;
};

struct GeneSetEntry {
  std::string gene_id;
  std::string label;  // "TUMOR" or "TME"
};

// Generator bookkeeping carried through the manifest for verification.
struct SynthMetadata {
  std::vector<std::size_t> tumor_gene_idx;
  std::vector<std::size_t> tme_gene_idx;
};

struct Cohort {
  CohortDims dims;
  std::vector<std::string> gene_ids;
  std::vector<GeneSetEntry> geneset;
  std::optional<SynthMetadata> synth;
  std::vector<Case> cases;

  bool genes_missing() const {
    for (const auto& c : cases)
      if (c.genes.empty()) return true;
    return false;
  }
};

// Float32 round trip, so in-memory cohorts equal their on-disk form.
inline double to_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

}  // namespace dmml
