#pragma once

// Task heads and losses: diagnosis/grading cross-entropy, the dual-expert
// magnification blend, and the discrete-time hazard NLL for survival.

#include <cmath>
#include <string>
#include <vector>

#include "dmml/error.hpp"
#include "dmml/nn.hpp"
#include "dmml/tensor.hpp"

namespace dmml {

enum class TaskKind { kDiagnosis, kGrading, kSurvival };

inline std::size_t class_count(TaskKind t) {
  switch (t) {
    case TaskKind::kDiagnosis: return 4;
    case TaskKind::kGrading: return 3;
    case TaskKind::kSurvival: return 4;
  }
  return 0;
}

inline std::string to_string(TaskKind t) {
  switch (t) {
    case TaskKind::kDiagnosis: return "diagnosis";
    case TaskKind::kGrading: return "grading";
    case TaskKind::kSurvival: return "survival";
  }
  return "?";
}

inline TaskKind parse_task(const std::string& s) {
  if (s == "diagnosis") return TaskKind::kDiagnosis;
  if (s == "grading") return TaskKind::kGrading;
  if (s == "survival") return TaskKind::kSurvival;
  throw Error("bad_config", "unknown task kind: " + s);
}

struct SurvivalLabel {
  std::size_t bin = 0;
  bool censored = false;
};

inline constexpr std::size_t kSurvivalBins = 4;

// Single affine map to logits; batch order is preserved row for row.
inline Tensor classifier_head(const Tensor& rep, const Linear& params) { return params(rep); }

// alpha * logits10 + (1 - alpha) * logits20 with alpha = logistic(gate).
inline Tensor dual_expert_combine(const Tensor& logits10, const Tensor& logits20, const Tensor& gate) {
  detail::check_same_shape(logits10, logits20, "dual_expert_combine");
  Tensor alpha = sigmoid(gate);
  return add(mul_scalar(logits10, alpha), mul_scalar(logits20, add_scalar(scale(alpha, -1.0), 1.0)));
}

// Mean over the batch of -log softmax(logits)[label].
inline Tensor ce_loss(const Tensor& logits, const std::vector<std::size_t>& labels) {
  const std::size_t b = logits.rows(), c = logits.cols();
  require(labels.size() == b, "shape_mismatch", "ce_loss: label count != batch size");
  require(b > 0, "empty_input", "ce_loss: empty batch");
  std::vector<double> probs(b * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    require(labels[i] < c, "label_out_of_range", "ce_loss: label " + std::to_string(labels[i]) + " out of range");
    double mx = logits(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += (probs[i * c + j] = std::exp(logits(i, j) - mx));
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= s;
    loss += -(logits(i, labels[i]) - mx - std::log(s));
  }
  loss /= static_cast<double>(b);
  return detail::make_op(1, 1, {loss}, {logits}, [probs, labels, b, c](Node& self) {
    Node& p = *self.parents[0];
    const double g = self.grad[0] / static_cast<double>(b);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < c; ++j)
        p.grad[i * c + j] += g * (probs[i * c + j] - (j == labels[i] ? 1.0 : 0.0));
  });
}

inline constexpr double kHazardClamp = 1e-7;

// Discrete-time hazard negative log-likelihood. With h_j = logistic(logit_j)
// and S(j) = prod_{m<=j} (1 - h_m): an event in bin y costs
// -log S(y-1) - log h_y, a censoring in bin y costs -log S(y).
inline Tensor survival_nll(const Tensor& hazard_logits, const std::vector<SurvivalLabel>& labels) {
  const std::size_t b = hazard_logits.rows(), nb = hazard_logits.cols();
  require(labels.size() == b, "shape_mismatch", "survival_nll: label count != batch size");
  require(b > 0, "empty_input", "survival_nll: empty batch");
  // coef[i][j] = d loss_i / d logit_j
  std::vector<double> coef(b * nb, 0.0);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const auto& lab = labels[i];
    require(lab.bin < nb, "label_out_of_range", "survival_nll: bin " + std::to_string(lab.bin) + " out of range");
    for (std::size_t j = 0; j <= lab.bin; ++j) {
      const double raw = logistic(hazard_logits(i, j));
      const double h = std::clamp(raw, kHazardClamp, 1.0 - kHazardClamp);
      const bool inside = raw >= kHazardClamp && raw <= 1.0 - kHazardClamp;
      const bool event_term = (j == lab.bin && !lab.censored);
      if (event_term) {
        loss -= std::log(h);
        if (inside) coef[i * nb + j] -= (1.0 - h);  // d(-log h)/dlogit
      } else {
        loss -= std::log(1.0 - h);
        if (inside) coef[i * nb + j] += h;  // d(-log(1-h))/dlogit
      }
    }
  }
  loss /= static_cast<double>(b);
  return detail::make_op(1, 1, {loss}, {hazard_logits}, [coef, b](Node& self) {
    Node& p = *self.parents[0];
    const double g = self.grad[0] / static_cast<double>(b);
    for (std::size_t i = 0; i < coef.size(); ++i) p.grad[i] += g * coef[i];
  });
}

// Per-bin hazards h_j = logistic(logit_j), row-wise.
inline std::vector<double> hazards(const Tensor& hazard_logits, std::size_t row) {
  std::vector<double> h(hazard_logits.cols());
  for (std::size_t j = 0; j < h.size(); ++j) h[j] = logistic(hazard_logits(row, j));
  return h;
}

// Risk for concordance: cumulative hazard sum_j h_j.
inline double cumulative_hazard_risk(const Tensor& hazard_logits, std::size_t row) {
  double s = 0.0;
  for (double h : hazards(hazard_logits, row)) s += h;
  return s;
}

}  // namespace dmml
