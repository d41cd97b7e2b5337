#pragma once

// Inter-magnification consistency: cross-scale similarity of flattened
// gene-to-slide attention and the diagonal-element-variance penalty.

#include <vector>

#include "dmml/error.hpp"
#include "dmml/tensor.hpp"

namespace dmml {

enum class Subspace { kTumor, kTme };

struct AttentionRecord {
  Tensor a10;  // [batch, D]
  Tensor a20;  // [batch, D]
  Subspace subspace = Subspace::kTumor;
};

// C[i][j] = <a10_i, a20_j>, rows optionally L2-normalized first.
inline Tensor cross_scale_similarity(const AttentionRecord& rec, bool normalize = true) {
  require(rec.a10.rows() == rec.a20.rows() && rec.a10.cols() == rec.a20.cols(), "shape_mismatch",
          "cross_scale_similarity: 10x and 20x attention shapes differ");
  if (!normalize) return matmul_nt(rec.a10, rec.a20);
  return matmul_nt(l2_normalize_rows(rec.a10), l2_normalize_rows(rec.a20));
}

// lambda * (1/n) sum_i (C_ii - mean_j C_jj)^2, summed over the matrices.
inline Tensor dev_loss(const std::vector<Tensor>& matrices, double lambda) {
  require(lambda >= 0.0, "bad_config", "dev_loss: lambda must be nonnegative");
  require(!matrices.empty(), "empty_input", "dev_loss: no matrices");
  Tensor total;
  for (const auto& c : matrices) {
    require(c.rows() == c.cols(), "not_square", "dev_loss: similarity matrix is not square");
    require(c.rows() >= 1, "empty_input", "dev_loss: empty matrix");
    Tensor d = diag(c);
    Tensor mu = mean_all(d);
    Tensor centered = add_row(d, scale(mu, -1.0));
    Tensor term = scale(mean_all(square(centered)), lambda);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

}  // namespace dmml
