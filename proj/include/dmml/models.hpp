#pragma once

// The multi-modal teacher (two DMSF branches, subspace heads, dual-expert
// classifier) and the slide-only student (ITA, dual-expert classifier).

#include <string>
#include <vector>

#include "dmml/dmsf.hpp"
#include "dmml/igc.hpp"
#include "dmml/ita.hpp"
#include "dmml/nn.hpp"
#include "dmml/objectives.hpp"
#include "dmml/rng.hpp"
#include "dmml/tensor.hpp"

namespace dmml {

// Model-ready inputs for one case.
struct CaseInput {
  Tensor genes_t;  // [1, gene_width], zero-padded
  Tensor genes_e;  // [1, gene_width], zero-padded
  SlideInput s10;
  SlideInput s20;
};

struct TeacherDims {
  std::size_t gene_width = 0;
  std::size_t slide_c = 0;
  std::size_t classes = 0;
};

struct TeacherOutput {
  Tensor logits;    // dual-expert combined [B, classes]
  Tensor logits10;  // [B, classes]
  Tensor logits20;
  Tensor aux_t;     // subspace heads on X_R^T / X_R^E
  Tensor aux_e;
  Tensor x_r_t;     // [B, rep_dim]
  Tensor x_r_e;
  AttentionRecord attn_t;
  AttentionRecord attn_e;

  Tensor concat_reps() const { return concat_cols({x_r_t, x_r_e}); }
};

class TeacherModel {
 public:
  TeacherModel(const DmsfConfig& cfg, const TeacherDims& dims, std::uint64_t seed) : cfg_(cfg), dims_(dims) {
    require(dims.gene_width >= 1 && dims.slide_c >= 1 && dims.classes >= 2, "bad_config", "teacher dims invalid");
    Rng rng(seed);
    // T and E are registered in the same structural order so CGC can pair them.
    tumor_ = DmsfBranch::create(store_, "teacher.T", dims.gene_width, dims.slide_c, cfg, ParamGroup::kTumor, rng);
    tme_ = DmsfBranch::create(store_, "teacher.E", dims.gene_width, dims.slide_c, cfg, ParamGroup::kTme, rng);
    aux_t_ = Linear::create(store_, "teacher.T.aux_head", cfg.rep_dim, dims.classes, ParamGroup::kTumor, rng);
    aux_e_ = Linear::create(store_, "teacher.E.aux_head", cfg.rep_dim, dims.classes, ParamGroup::kTme, rng);
    head_ = Linear::create(store_, "teacher.head", 2 * cfg.rep_dim, dims.classes, ParamGroup::kShared, rng);
    gate_ = store_.add("teacher.gate", 1, 1, ParamGroup::kShared, {0.0});
  }
  TeacherModel(const TeacherModel&) = delete;
  TeacherModel& operator=(const TeacherModel&) = delete;
  TeacherModel(TeacherModel&&) = default;
  TeacherModel& operator=(TeacherModel&&) = default;

  TeacherOutput forward(const std::vector<const CaseInput*>& batch) const {
    require(!batch.empty(), "empty_input", "teacher forward on empty batch");
    std::vector<Tensor> t10, t20, e10, e20, xt, xe, at10, at20, ae10, ae20;
    for (const CaseInput* c : batch) {
      auto o = dmsf_forward(c->genes_t, c->genes_e, c->s10, c->s20, tumor_, tme_, cfg_);
      t10.push_back(o.rep_t10);
      t20.push_back(o.rep_t20);
      e10.push_back(o.rep_e10);
      e20.push_back(o.rep_e20);
      xt.push_back(o.x_r_t);
      xe.push_back(o.x_r_e);
      at10.push_back(o.attn_t10);
      at20.push_back(o.attn_t20);
      ae10.push_back(o.attn_e10);
      ae20.push_back(o.attn_e20);
    }
    TeacherOutput out;
    out.logits10 = head_(concat_cols({concat_rows(t10), concat_rows(e10)}));
    out.logits20 = head_(concat_cols({concat_rows(t20), concat_rows(e20)}));
    out.logits = dual_expert_combine(out.logits10, out.logits20, gate_);
    out.x_r_t = concat_rows(xt);
    out.x_r_e = concat_rows(xe);
    out.aux_t = aux_t_(out.x_r_t);
    out.aux_e = aux_e_(out.x_r_e);
    out.attn_t = {concat_rows(at10), concat_rows(at20), Subspace::kTumor};
    out.attn_e = {concat_rows(ae10), concat_rows(ae20), Subspace::kTme};
    return out;
  }

  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const DmsfConfig& config() const { return cfg_; }
  const TeacherDims& dims() const { return dims_; }
  const DmsfBranch& tumor_branch() const { return tumor_; }
  const DmsfBranch& tme_branch() const { return tme_; }

 private:
  DmsfConfig cfg_;
  TeacherDims dims_;
  ParamStore store_;
  DmsfBranch tumor_, tme_;
  Linear aux_t_, aux_e_, head_;
  Tensor gate_;
};

struct StudentOutput {
  Tensor logits;  // [B, classes]
  Tensor logits10;
  Tensor logits20;
  Tensor rep;     // [B, rep_dim]
  std::vector<ItaOutput> cases;
};

class StudentModel {
 public:
  StudentModel(const ItaConfig& cfg, std::size_t slide_c, std::size_t classes, std::uint64_t seed)
      : cfg_(cfg), classes_(classes) {
    require(slide_c >= 1 && classes >= 2, "bad_config", "student dims invalid");
    Rng rng(seed);
    ita_ = ItaParams::create(store_, "student", slide_c, cfg, rng);
    head_ = Linear::create(store_, "student.head", cfg.rep_dim, classes, ParamGroup::kShared, rng);
    gate_ = store_.add("student.gate", 1, 1, ParamGroup::kShared, {0.0});
  }
  StudentModel(const StudentModel&) = delete;
  StudentModel& operator=(const StudentModel&) = delete;
  StudentModel(StudentModel&&) = default;
  StudentModel& operator=(StudentModel&&) = default;

  // Reads only the slide grids of each case.
  StudentOutput forward(const std::vector<const CaseInput*>& batch) const {
    require(!batch.empty(), "empty_input", "student forward on empty batch");
    StudentOutput out;
    std::vector<Tensor> r10, r20, r;
    for (const CaseInput* c : batch) {
      out.cases.push_back(ita_forward(c->s10, c->s20, ita_, cfg_));
      r10.push_back(out.cases.back().rep10);
      r20.push_back(out.cases.back().rep20);
      r.push_back(out.cases.back().rep);
    }
    out.logits10 = head_(concat_rows(r10));
    out.logits20 = head_(concat_rows(r20));
    out.logits = dual_expert_combine(out.logits10, out.logits20, gate_);
    out.rep = concat_rows(r);
    return out;
  }

  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const ItaConfig& config() const { return cfg_; }
  const ItaParams& ita() const { return ita_; }
  std::size_t classes() const { return classes_; }

 private:
  ItaConfig cfg_;
  std::size_t classes_;
  ParamStore store_;
  ItaParams ita_;
  Linear head_;
  Tensor gate_;
};

// Snapshot of every parameter value, in registry order.
inline std::vector<std::vector<double>> snapshot(const ParamStore& store) {
  std::vector<std::vector<double>> out;
  for (const auto& e : store.entries()) out.emplace_back(e.tensor.data().begin(), e.tensor.data().end());
  return out;
}

inline void restore(ParamStore& store, const std::vector<std::vector<double>>& values) {
  require(values.size() == store.entries().size(), "registry_mismatch", "parameter count differs from registry");
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto dst = store.entries()[i].tensor.mutable_data();
    require(dst.size() == values[i].size(), "registry_mismatch",
            "parameter size differs for " + store.entries()[i].name);
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

}  // namespace dmml
