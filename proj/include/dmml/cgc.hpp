#pragma once

// Confidence-guided gradient coordination between the tumor (T) and
// microenvironment (E) subspace parameter sets.

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "dmml/error.hpp"
#include "dmml/nn.hpp"
#include "dmml/tensor.hpp"

namespace dmml {

// One structurally matched (T, E) parameter pair and its span in the bundle.
struct RegistrySlice {
  std::string tumor_name;
  std::string tme_name;
  std::size_t offset = 0;
  std::size_t size = 0;
};

// g_t and g_e share one coordinate space: element i of g_t is the gradient of
// the T-branch parameter that occupies the same structural position as the
// E-branch parameter behind element i of g_e.
struct GradientBundle {
  std::vector<double> g_t;
  std::vector<double> g_e;
  std::vector<RegistrySlice> registry;
};

struct ConfidencePair {
  double s_t = 0.0;
  double s_e = 0.0;
};

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size(), "shape_mismatch", "dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

// Batch sums of the softmax probability assigned to the true label by each
// subspace head.
inline ConfidencePair confidence_scores(const Tensor& logits_t, const Tensor& logits_e,
                                        const std::vector<std::size_t>& labels) {
  detail::check_same_shape(logits_t, logits_e, "confidence_scores");
  require(labels.size() == logits_t.rows(), "shape_mismatch", "confidence_scores: label count != batch size");
  auto true_prob_sum = [&](const Tensor& logits) {
    Tensor p = softmax_rows(detach(logits));
    double s = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      require(labels[i] < logits.cols(), "label_out_of_range", "confidence_scores: label out of range");
      s += p(i, labels[i]);
    }
    return s;
  };
  return {true_prob_sum(logits_t), true_prob_sum(logits_e)};
}

inline constexpr double kZeroGradNorm = 1e-12;

// cosine(g_t, g_e); 0 when either vector is (numerically) zero.
inline double detect_conflict(const GradientBundle& bundle) {
  const double nt = norm(bundle.g_t), ne = norm(bundle.g_e);
  if (nt < kZeroGradNorm || ne < kZeroGradNorm) return 0.0;
  return dot(bundle.g_t, bundle.g_e) / (nt * ne);
}

// x1 - (<x1,x2>/||x2||^2) x2
inline std::vector<double> project_orthogonal(const std::vector<double>& x1, const std::vector<double>& x2) {
  const double n2 = dot(x2, x2);
  require(n2 > 0.0, "zero_vector", "project_orthogonal: reference vector is zero");
  const double k = dot(x1, x2) / n2;
  std::vector<double> out(x1.size());
  for (std::size_t i = 0; i < x1.size(); ++i) out[i] = x1[i] - k * x2[i];
  return out;
}

// Under conflict (cosine < 0) the strictly less confident subspace's gradient
// is replaced by its projection onto the orthogonal complement of the other.
inline GradientBundle coordinate(const GradientBundle& bundle, const ConfidencePair& conf) {
  GradientBundle out = bundle;
  if (detect_conflict(bundle) >= 0.0) return out;
  if (conf.s_t < conf.s_e) out.g_t = project_orthogonal(bundle.g_t, bundle.g_e);
  else if (conf.s_e < conf.s_t) out.g_e = project_orthogonal(bundle.g_e, bundle.g_t);
  return out;
}

// Pairs T and E parameters by registration order within their groups; the two
// branches must be structurally identical.
inline GradientBundle gather_bundle(const ParamStore& store) {
  std::vector<const ParamEntry*> ts, es;
  for (const auto& e : store.entries()) {
    if (e.group == ParamGroup::kTumor) ts.push_back(&e);
    if (e.group == ParamGroup::kTme) es.push_back(&e);
  }
  require(ts.size() == es.size(), "registry_mismatch", "T and E parameter sets differ in count");
  GradientBundle b;
  std::size_t off = 0;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const Tensor& t = ts[i]->tensor;
    const Tensor& e = es[i]->tensor;
    require(t.rows() == e.rows() && t.cols() == e.cols(), "registry_mismatch",
            "T/E parameter shapes differ: " + ts[i]->name + " vs " + es[i]->name);
    b.registry.push_back({ts[i]->name, es[i]->name, off, t.size()});
    auto append = [](std::vector<double>& dst, const Tensor& src) {
      if (src.grad().size() == src.size()) dst.insert(dst.end(), src.grad().begin(), src.grad().end());
      else dst.insert(dst.end(), src.size(), 0.0);
    };
    append(b.g_t, t);
    append(b.g_e, e);
    off += t.size();
  }
  return b;
}

// Writes (possibly coordinated) subspace gradients back into the registry.
inline void scatter_bundle(const GradientBundle& bundle, ParamStore& store) {
  for (const auto& s : bundle.registry) {
    Tensor t = store.at(s.tumor_name).tensor;
    Tensor e = store.at(s.tme_name).tensor;
    auto gt = t.mutable_grad();
    auto ge = e.mutable_grad();
    for (std::size_t i = 0; i < s.size; ++i) {
      gt[i] = bundle.g_t[s.offset + i];
      ge[i] = bundle.g_e[s.offset + i];
    }
  }
}

}  // namespace dmml
