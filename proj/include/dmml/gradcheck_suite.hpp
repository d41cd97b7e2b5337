#pragma once

// Fixed tiny instances for checking each differentiable module against
// finite differences.

#include <functional>
#include <string>
#include <vector>

#include "dmml/distill.hpp"
#include "dmml/dmsf.hpp"
#include "dmml/error.hpp"
#include "dmml/gradcheck.hpp"
#include "dmml/igc.hpp"
#include "dmml/ita.hpp"
#include "dmml/nn.hpp"
#include "dmml/objectives.hpp"
#include "dmml/rng.hpp"

namespace dmml {

struct ModuleGradcheck {
  std::string module;
  GradcheckResult result;
};

namespace detail {

inline Tensor random_leaf(Rng& rng, std::size_t rows, std::size_t cols, double sd = 1.0) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = sd * rng.normal();
  return Tensor::parameter(rows, cols, std::move(v));
}

inline Tensor random_const(Rng& rng, std::size_t rows, std::size_t cols) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.normal();
  return Tensor::from(rows, cols, std::move(v));
}

// Random projection of `out` to a scalar, so no gradient cancels by symmetry.
// Averaged rather than summed: difference roundoff scales with |f|, and some
// entries (e.g. key biases under softmax) have an exactly zero gradient.
inline Tensor probe(const Tensor& out, const Tensor& weights) { return mean_all(mul(out, weights)); }

inline std::vector<Tensor> with_params(const ParamStore& store, std::vector<Tensor> leaves) {
  for (const auto& e : store.entries()) leaves.push_back(e.tensor);
  return leaves;
}

inline DmsfConfig tiny_dmsf() {
  DmsfConfig c;
  c.query_h = 2;
  c.query_w = 2;
  c.width = 8;
  c.heads = 2;
  c.offset_hidden = 4;
  c.rep_dim = 6;
  c.offset_scale = 0.5;
  return c;
}

inline GradcheckResult check_dmsf(double eps) {
  Rng rng(101);
  const auto cfg = tiny_dmsf();
  const std::size_t gene_in = 5, sh = 4, sw = 4, c = 3;
  ParamStore store;
  auto branch = DmsfBranch::create(store, "b", gene_in, c, cfg, ParamGroup::kTumor, rng);
  // Larger offsets so sampling points move off the reference grid.
  for (auto* t : {&branch.offsets.w2, &branch.offsets.b2}) {
    auto v = t->mutable_data();
    for (auto& x : v) x = 0.5 * rng.normal();
  }
  Tensor genes = random_leaf(rng, 1, gene_in);
  Tensor slide = random_leaf(rng, sh * sw, c);
  Tensor w = random_const(rng, 1, cfg.rep_dim);
  auto f = [&] {
    Tensor tok = tokenize_genes(genes, branch, cfg);
    return probe(dmsf_branch(tok, slide, sh, sw, branch, cfg).rep, w);
  };
  return gradcheck(f, with_params(store, {genes, slide}), eps);
}

inline GradcheckResult check_selection(double eps) {
  Rng rng(102);
  const std::size_t nq = 4, width = 8, out = 6;
  ParamStore store;
  auto p = ProjectionSet::create(store, "s", width, width, width, out, 2, ParamGroup::kShared, rng);
  Tensor z_m = random_leaf(rng, nq, width);
  Tensor tokens = random_leaf(rng, nq, width);
  Tensor w = random_const(rng, nq, out);
  auto f = [&] { return probe(selection_attention(z_m, tokens, p), w); };
  return gradcheck(f, with_params(store, {z_m, tokens}), eps);
}

inline GradcheckResult check_dev(double eps) {
  Rng rng(103);
  Tensor t10 = random_leaf(rng, 3, 6), t20 = random_leaf(rng, 3, 6);
  Tensor e10 = random_leaf(rng, 3, 6), e20 = random_leaf(rng, 3, 6);
  auto f = [&] {
    return dev_loss({cross_scale_similarity({t10, t20, Subspace::kTumor}),
                     cross_scale_similarity({e10, e20, Subspace::kTme})},
                    0.7);
  };
  return gradcheck(f, {t10, t20, e10, e20}, eps);
}

inline GradcheckResult check_self_attention(double eps) {
  Rng rng(104);
  ItaConfig cfg;
  cfg.width = 8;
  cfg.heads = 2;
  cfg.offset_hidden = 4;
  const std::size_t h = 4, w = 4, c = 3;
  ParamStore store;
  auto p = SelfAttentionParams::create(store, "a", c, cfg, rng);
  for (auto* t : {&p.offsets.w2, &p.offsets.b2}) {
    auto v = t->mutable_data();
    for (auto& x : v) x = 0.5 * rng.normal();
  }
  Tensor slide = random_leaf(rng, h * w, c);
  Tensor wt = random_const(rng, h * w, cfg.width);
  auto f = [&] { return probe(deformable_self_attention(slide, h, w, p, 2, 2), wt); };
  return gradcheck(f, with_params(store, {slide}), eps);
}

inline GradcheckResult check_ita_merge(double eps) {
  Rng rng(105);
  const std::size_t n = 9, c = 5, k = 3;
  ParamStore store;
  auto sig = Linear::create(store, "sig", c, 1, ParamGroup::kShared, rng);
  Tensor z = random_leaf(rng, n, c);
  const auto assignment = dpc_knn(detach(z), 3, k).assignment;
  Tensor w = random_const(rng, k, c);
  auto f = [&] { return probe(significance_and_merge(z, assignment, k, sig).prototypes, w); };
  return gradcheck(f, with_params(store, {z}), eps);
}

inline GradcheckResult check_kl_mse(double eps) {
  Rng rng(106);
  DistillConfig cfg;
  cfg.tau = 2.0;
  Tensor teacher_logits = random_const(rng, 3, 4);
  Tensor teacher_reps = random_const(rng, 3, 6);
  Tensor student_logits = random_leaf(rng, 3, 4);
  Tensor student_reps = random_leaf(rng, 3, 6);
  auto f = [&] {
    return add(distill_kl(teacher_logits, student_logits, cfg), representation_mse(teacher_reps, student_reps));
  };
  return gradcheck(f, {student_logits, student_reps}, eps);
}

inline GradcheckResult check_ce(double eps) {
  Rng rng(107);
  Tensor logits = random_leaf(rng, 4, 3);
  auto f = [&] { return ce_loss(logits, {0, 2, 1, 2}); };
  return gradcheck(f, {logits}, eps);
}

inline GradcheckResult check_survival(double eps) {
  Rng rng(108);
  Tensor logits = random_leaf(rng, 4, kSurvivalBins);
  const std::vector<SurvivalLabel> labels{{0, false}, {3, true}, {1, true}, {2, false}};
  auto f = [&] { return survival_nll(logits, labels); };
  return gradcheck(f, {logits}, eps);
}

}  // namespace detail

inline const std::vector<std::string>& gradcheck_modules() {
  static const std::vector<std::string> names{"dmsf", "selection", "dev", "self_attention",
                                              "ita_merge", "kl_mse", "ce", "survival"};
  return names;
}

inline ModuleGradcheck run_gradcheck(const std::string& module, double eps = 1e-5) {
  require(eps > 0.0, "bad_config", "gradcheck epsilon must be positive");
  static const std::vector<std::pair<std::string, std::function<GradcheckResult(double)>>> table{
      {"dmsf", detail::check_dmsf},
      {"selection", detail::check_selection},
      {"dev", detail::check_dev},
      {"self_attention", detail::check_self_attention},
      {"ita_merge", detail::check_ita_merge},
      {"kl_mse", detail::check_kl_mse},
      {"ce", detail::check_ce},
      {"survival", detail::check_survival}};
  for (const auto& [name, fn] : table)
    if (name == module) return {name, fn(eps)};
  throw Error("unknown_module", "no gradcheck instance for module '" + module + "'");
}

}  // namespace dmml
