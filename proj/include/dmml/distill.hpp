#pragma once

// Subspace knowledge distillation: temperature-softened KL on predictions and
// MSE between the teacher's concatenated subspace features and the student
// representation.

#include <cmath>
#include <vector>

#include "dmml/error.hpp"
#include "dmml/tensor.hpp"

namespace dmml {

struct DistillConfig {
  double tau = 2.0;
  double w_task = 1.0;
  double w_mse = 1.0;
  double w_kl = 1.0;
  bool tau_sq_scale = true;  // multiply the KL term by tau^2
};

// Row-wise softmax(logits / tau), max-subtracted.
inline Tensor soften(const Tensor& logits, double tau) {
  require(tau > 0.0, "bad_temperature", "soften: tau must be positive");
  return softmax_rows(scale(logits, 1.0 / tau));
}

// Batch mean of sum_i p(i) log(p(i)/q(i)). p is treated as a constant target;
// entries with p(i) = 0 contribute nothing.
inline Tensor kl_loss(const Tensor& p_teacher, const Tensor& p_student) {
  detail::check_same_shape(p_teacher, p_student, "kl_loss");
  const std::size_t b = p_teacher.rows(), c = p_teacher.cols();
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double p = p_teacher(i, j), q = p_student(i, j);
      if (p <= 0.0) continue;
      require(q > 0.0, "zero_probability", "kl_loss: student assigns zero probability where teacher is positive");
      loss += p * std::log(p / q);
    }
  loss /= static_cast<double>(b);
  return detail::make_op(1, 1, {loss}, {p_teacher, p_student}, [b, c](Node& self) {
    Node& pt = *self.parents[0];
    Node& ps = *self.parents[1];
    if (!ps.requires_grad) return;
    const double g = self.grad[0] / static_cast<double>(b);
    for (std::size_t i = 0; i < b * c; ++i) {
      if (pt.value[i] > 0.0) ps.grad[i] -= g * pt.value[i] / ps.value[i];
    }
  });
}

// KL between softened teacher and softened student logits; teacher detached.
inline Tensor distill_kl(const Tensor& teacher_logits, const Tensor& student_logits, const DistillConfig& cfg) {
  Tensor pt = soften(detach(teacher_logits), cfg.tau);
  Tensor kl = kl_loss(pt, soften(student_logits, cfg.tau));
  return cfg.tau_sq_scale ? scale(kl, cfg.tau * cfg.tau) : kl;
}

// Mean over the batch of ||teacher - student||^2; the teacher side is a constant.
inline Tensor representation_mse(const Tensor& teacher_reps, const Tensor& student_reps) {
  require(teacher_reps.rows() == student_reps.rows() && teacher_reps.cols() == student_reps.cols(),
          "width_mismatch", "representation_mse: teacher is " + std::to_string(teacher_reps.cols()) +
                                " wide, student " + std::to_string(student_reps.cols()));
  Tensor diff = sub(student_reps, detach(teacher_reps));
  return scale(sum_all(square(diff)), 1.0 / static_cast<double>(teacher_reps.rows()));
}

inline Tensor distill_loss(const Tensor& task, const Tensor& mse, const Tensor& kl, const DistillConfig& cfg) {
  for (const Tensor* t : {&task, &mse, &kl})
    require(std::isfinite(t->item()), "nan_loss", "distill_loss: non-finite component");
  return add(add(scale(task, cfg.w_task), scale(mse, cfg.w_mse)), scale(kl, cfg.w_kl));
}

}  // namespace dmml
