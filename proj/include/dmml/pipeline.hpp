#pragma once

// Two-stage training: the multi-modal teacher (task + subspace heads + DEV
// with gradient coordination), then the slide-only student (warmup on the task
// loss, distillation from the frozen teacher). Cross-validated; every
// preprocessing fit is logged with the case ids it saw.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dmml/cgc.hpp"
#include "dmml/checkpoint.hpp"
#include "dmml/cohort.hpp"
#include "dmml/config.hpp"
#include "dmml/distill.hpp"
#include "dmml/igc.hpp"
#include "dmml/ingest.hpp"
#include "dmml/metrics.hpp"
#include "dmml/models.hpp"
#include "dmml/objectives.hpp"
#include "dmml/rng.hpp"

namespace dmml {

// ---- audit -------------------------------------------------------------------

struct FitRecord {
  std::string what;
  std::size_t fold = 0;
  std::vector<std::string> case_ids;
};

struct RunAudit {
  FileAudit files;
  std::vector<FitRecord> fits;

  json to_json() const {
    json j;
    j["file_reads"] = files.reads;
    j["fits"] = json::array();
    for (const auto& f : fits) j["fits"].push_back({{"what", f.what}, {"fold", f.fold}, {"case_ids", f.case_ids}});
    return j;
  }
};

// ---- folds -------------------------------------------------------------------

struct FoldSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

inline std::size_t stratum(const Case& c, TaskKind task) {
  switch (task) {
    case TaskKind::kDiagnosis: return c.diagnosis;
    case TaskKind::kGrading: return c.grade;
    case TaskKind::kSurvival: return c.surv_bin;
  }
  return 0;
}

// Label-stratified k-fold split; within the remaining folds a stratified
// val_fraction is held out for model selection.
inline std::vector<FoldSplit> make_folds(const Cohort& cohort, TaskKind task, std::size_t k, double val_fraction,
                                         std::uint64_t seed) {
  const std::size_t n = cohort.cases.size();
  require(k >= 2 && n >= 2 * k, "bad_config",
          "need at least 2 cases per fold (" + std::to_string(n) + " cases, " + std::to_string(k) + " folds)");
  Rng rng(derive_seed(seed, 11));
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) groups[stratum(cohort.cases[i], task)].push_back(i);
  std::vector<std::size_t> fold_of(n);
  std::size_t next = 0;
  for (auto& [label, members] : groups) {
    rng.shuffle(members);
    for (std::size_t i : members) fold_of[i] = next++ % k;
  }
  std::vector<FoldSplit> out(k);
  for (std::size_t f = 0; f < k; ++f) {
    std::map<std::size_t, std::vector<std::size_t>> rest;
    for (std::size_t i = 0; i < n; ++i) {
      if (fold_of[i] == f) out[f].test.push_back(i);
      else rest[stratum(cohort.cases[i], task)].push_back(i);
    }
    std::size_t total_val = 0, largest = 0, largest_size = 0;
    std::map<std::size_t, std::size_t> nv;
    for (auto& [label, members] : rest) {
      rng.shuffle(members);
      nv[label] = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(members.size())));
      total_val += nv[label];
      if (members.size() > largest_size) largest = label, largest_size = members.size();
    }
    // Small cohorts can round every stratum to zero.
    if (total_val == 0 && largest_size >= 2) nv[largest] = 1;
    for (auto& [label, members] : rest)
      for (std::size_t j = 0; j < members.size(); ++j) (j < nv[label] ? out[f].val : out[f].train).push_back(members[j]);
    require(!out[f].val.empty() && out[f].train.size() >= 2, "bad_config", "fold too small for a validation split");
    std::sort(out[f].train.begin(), out[f].train.end());
    std::sort(out[f].val.begin(), out[f].val.end());
  }
  return out;
}

inline std::vector<std::string> ids_of(const Cohort& c, const std::vector<std::size_t>& idx) {
  std::vector<std::string> out;
  for (std::size_t i : idx) out.push_back(c.cases[i].case_id);
  return out;
}

inline std::vector<std::size_t> indices_of(const Cohort& c, const std::vector<std::string>& ids) {
  std::map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < c.cases.size(); ++i) pos[c.cases[i].case_id] = i;
  std::vector<std::size_t> out;
  for (const auto& id : ids) {
    auto it = pos.find(id);
    require(it != pos.end(), "unknown_case", "case " + id + " from the checkpoint is not in the cohort");
    out.push_back(it->second);
  }
  return out;
}

// ---- preprocessing -------------------------------------------------------------

// Fits HVG selection, gene z-scores (if with_genes) and per-channel slide
// moments on the given training cases only.
inline Preprocessing fit_preprocessing(const Cohort& cohort, const std::vector<std::size_t>& train, bool with_genes,
                                       double hvg_fraction, std::size_t fold, RunAudit& audit) {
  require(!train.empty(), "empty_input", "fit_preprocessing: no training cases");
  const auto ids = ids_of(cohort, train);
  Preprocessing p;
  const std::size_t c = cohort.dims.c;
  p.slide_mean.assign(c, 0.0);
  p.slide_std.assign(c, 0.0);
  double count = 0.0;
  for (std::size_t i : train)
    for (const SlideGrid* g : {&cohort.cases[i].grid10, &cohort.cases[i].grid20})
      for (std::size_t q = 0; q < g->patches(); ++q) {
        for (std::size_t k = 0; k < c; ++k) p.slide_mean[k] += g->data[q * c + k];
        count += 1.0;
      }
  for (auto& m : p.slide_mean) m /= count;
  for (std::size_t i : train)
    for (const SlideGrid* g : {&cohort.cases[i].grid10, &cohort.cases[i].grid20})
      for (std::size_t q = 0; q < g->patches(); ++q)
        for (std::size_t k = 0; k < c; ++k) {
          const double d = g->data[q * c + k] - p.slide_mean[k];
          p.slide_std[k] += d * d;
        }
  for (auto& s : p.slide_std) {
    s = std::sqrt(s / std::max(count - 1.0, 1.0));
    if (s < 1e-8) s = 1.0;
  }
  audit.fits.push_back({"slide_moments", fold, ids});
  if (!with_genes) return p;

  require(!cohort.genes_missing(), "missing_genes", "gene expression was not loaded");
  require(!cohort.geneset.empty(), "missing_geneset", "cohort has no tumor/TME gene set");
  const std::size_t ng = cohort.dims.n_genes;
  std::vector<double> expr;
  expr.reserve(train.size() * ng);
  for (std::size_t i : train) expr.insert(expr.end(), cohort.cases[i].genes.begin(), cohort.cases[i].genes.end());
  p.hvg_idx = select_hvgs(expr, train.size(), ng, hvg_fraction);
  audit.fits.push_back({"hvg", fold, ids});

  const auto part = partition_genes(cohort.gene_ids, cohort.geneset);
  std::vector<bool> is_t(ng, false), is_e(ng, false);
  for (std::size_t g : part.tumor_idx) is_t[g] = true;
  for (std::size_t g : part.tme_idx) is_e[g] = true;
  for (std::size_t g : p.hvg_idx) {
    if (is_t[g]) p.tumor_idx.push_back(g);
    if (is_e[g]) p.tme_idx.push_back(g);
  }
  p.gene_width = std::max<std::size_t>({p.tumor_idx.size(), p.tme_idx.size(), 1});

  std::vector<std::vector<double>> rows;
  for (std::size_t i : train) {
    std::vector<double> r;
    for (std::size_t g : p.hvg_idx) r.push_back(cohort.cases[i].genes[g]);
    rows.push_back(std::move(r));
  }
  p.genes = ZScore::fit(rows);
  audit.fits.push_back({"gene_zscore", fold, ids});
  return p;
}

inline bool same_gene_preprocessing(const Preprocessing& a, const Preprocessing& b) {
  return a.hvg_idx == b.hvg_idx && a.tumor_idx == b.tumor_idx && a.tme_idx == b.tme_idx &&
         a.genes.mean == b.genes.mean && a.genes.stdev == b.genes.stdev;
}

inline bool same_slide_preprocessing(const Preprocessing& a, const Preprocessing& b) {
  return a.slide_mean == b.slide_mean && a.slide_std == b.slide_std;
}

inline SlideInput prepare_slide(const SlideGrid& g, const Preprocessing& p, std::size_t n_patches,
                                std::uint64_t seed) {
  const SlideGrid src = n_patches ? sample_patches(g, n_patches, seed) : g;
  std::vector<double> v(src.data.size());
  for (std::size_t q = 0; q < src.patches(); ++q) {
    const bool valid = src.valid.empty() || src.valid[q];
    for (std::size_t k = 0; k < src.c; ++k)
      v[q * src.c + k] = valid ? (src.data[q * src.c + k] - p.slide_mean[k]) / p.slide_std[k] : 0.0;
  }
  return {Tensor::from(src.patches(), src.c, std::move(v)), src.h, src.w};
}

inline CaseInput prepare_case(const Case& c, const Preprocessing& p, const RunConfig& cfg, std::size_t index) {
  CaseInput in;
  in.s10 = prepare_slide(c.grid10, p, cfg.n_patches, derive_seed(cfg.seed, 5000 + 2 * index));
  in.s20 = prepare_slide(c.grid20, p, cfg.n_patches, derive_seed(cfg.seed, 5001 + 2 * index));
  if (p.has_genes()) {
    require(!c.genes.empty(), "missing_genes", "case " + c.case_id + " has no gene expression loaded");
    std::vector<double> sel;
    for (std::size_t g : p.hvg_idx) sel.push_back(c.genes[g]);
    sel = p.genes.apply(sel);
    std::map<std::size_t, double> z;
    for (std::size_t k = 0; k < p.hvg_idx.size(); ++k) z[p.hvg_idx[k]] = sel[k];
    std::vector<double> t(p.gene_width, 0.0), e(p.gene_width, 0.0);
    for (std::size_t k = 0; k < p.tumor_idx.size(); ++k) t[k] = z[p.tumor_idx[k]];
    for (std::size_t k = 0; k < p.tme_idx.size(); ++k) e[k] = z[p.tme_idx[k]];
    in.genes_t = Tensor::from(1, p.gene_width, std::move(t));
    in.genes_e = Tensor::from(1, p.gene_width, std::move(e));
  }
  return in;
}

// ---- task plumbing -------------------------------------------------------------

inline std::vector<std::size_t> class_labels(const Cohort& c, const std::vector<std::size_t>& idx, TaskKind task) {
  std::vector<std::size_t> out;
  for (std::size_t i : idx) out.push_back(stratum(c.cases[i], task));
  return out;
}

inline std::vector<SurvivalLabel> survival_labels(const Cohort& c, const std::vector<std::size_t>& idx) {
  std::vector<SurvivalLabel> out;
  for (std::size_t i : idx) out.push_back({c.cases[i].surv_bin, c.cases[i].censored});
  return out;
}

inline Tensor task_loss(const Tensor& logits, const Cohort& c, const std::vector<std::size_t>& idx, TaskKind task) {
  if (task == TaskKind::kSurvival) return survival_nll(logits, survival_labels(c, idx));
  return ce_loss(logits, class_labels(c, idx, task));
}

// Metrics on held-out cases from final logits. Classification: macro metrics;
// survival: C-index on observed times with cumulative-hazard risk.
struct TaskScores {
  std::optional<ClassificationMetrics> cls;
  double c_index = std::nan("");
  double primary = std::nan("");  // AUC or C-index
};

inline TaskScores score_logits(const Tensor& logits, const Cohort& c, const std::vector<std::size_t>& idx,
                               TaskKind task) {
  TaskScores s;
  if (task == TaskKind::kSurvival) {
    std::vector<double> risks, times;
    std::vector<bool> events;
    for (std::size_t r = 0; r < idx.size(); ++r) {
      risks.push_back(cumulative_hazard_risk(logits, r));
      times.push_back(c.cases[idx[r]].surv_time);
      events.push_back(!c.cases[idx[r]].censored);
    }
    try {
      s.c_index = concordance_index(risks, times, events);
    } catch (const Error&) {
      s.c_index = 0.5;
    }
    s.primary = s.c_index;
    return s;
  }
  Tensor p = softmax_rows(detach(logits));
  s.cls = classification_metrics({p.data().begin(), p.data().end()}, logits.cols(), class_labels(c, idx, task));
  s.primary = std::isnan(s.cls->auc) ? s.cls->accuracy : s.cls->auc;
  return s;
}

// ---- generic training loop -----------------------------------------------------

struct StepLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  json parts;  // named loss components
};

struct Validation {
  double metric = 0.0;  // higher is better
  double loss = 0.0;    // breaks metric ties
};

struct TrainOutcome {
  std::vector<std::vector<double>> best_params;
  std::size_t best_epoch = 0;
  Validation best_val;
  std::vector<StepLog> steps;
  json history = json::array();
};

struct StepResult {
  double loss = 0.0;
  json parts;
};

// Shuffles `train` every epoch with a stream derived from (seed, stream),
// calls step on consecutive batches, validates after each epoch and keeps the
// parameters of the best validation epoch: highest metric, then lowest loss.
inline TrainOutcome run_training(ParamStore& store, const RunConfig& cfg, const std::vector<std::size_t>& train,
                                 std::uint64_t stream,
                                 const std::function<StepResult(const std::vector<std::size_t>&)>& step,
                                 const std::function<Validation()>& validate, const std::string& tag) {
  TrainOutcome out;
  AdamW opt(cfg.optimizer);
  std::vector<std::size_t> order = train;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, stream * 1000 + epoch));
    rng.shuffle(order);
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(b),
                                     order.begin() + static_cast<std::ptrdiff_t>(std::min(b + cfg.batch_size, order.size())));
      store.zero_grad();
      StepResult r = step(batch);
      if (!std::isfinite(r.loss)) {
        std::string ids;
        for (std::size_t i : batch) ids += (ids.empty() ? "" : ",") + std::to_string(i);
        throw Error("nan_loss", tag + ": non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                                    std::to_string(b / cfg.batch_size) + " (case indices " + ids + ")");
      }
      opt.step(store);
      out.steps.push_back({epoch, r.loss, r.parts});
      sum += r.loss;
      ++batches;
    }
    const Validation val = validate();
    out.history.push_back({{"epoch", epoch},
                           {"train_loss", sum / static_cast<double>(batches)},
                           {"val_metric", val.metric},
                           {"val_loss", val.loss}});
    const bool better = val.metric > out.best_val.metric ||
                        (val.metric == out.best_val.metric && val.loss < out.best_val.loss);
    if (out.best_params.empty() || better) {
      out.best_val = val;
      out.best_epoch = epoch;
      out.best_params = snapshot(store);
    }
  }
  restore(store, out.best_params);
  return out;
}

inline std::vector<const CaseInput*> gather(const std::vector<CaseInput>& inputs, const std::vector<std::size_t>& idx) {
  std::vector<const CaseInput*> out;
  for (std::size_t i : idx) out.push_back(&inputs[i]);
  return out;
}

// Forward in chunks without keeping graphs alive longer than needed.
template <typename Model>
Tensor predict_logits(const Model& m, const std::vector<CaseInput>& inputs, const std::vector<std::size_t>& idx,
                      std::size_t chunk = 16) {
  std::vector<Tensor> parts;
  for (std::size_t b = 0; b < idx.size(); b += chunk) {
    std::vector<std::size_t> sub(idx.begin() + static_cast<std::ptrdiff_t>(b),
                                 idx.begin() + static_cast<std::ptrdiff_t>(std::min(b + chunk, idx.size())));
    parts.push_back(detach(m.forward(gather(inputs, sub)).logits));
  }
  return concat_rows(parts);
}

struct FoldData {
  FoldSplit split;
  Preprocessing prep;
  std::vector<CaseInput> inputs;  // indexed like cohort.cases; only fold cases filled
};

template <typename Model>
Validation validate_task(const Model& m, const Cohort& cohort, const FoldData& d, TaskKind task) {
  Tensor logits = predict_logits(m, d.inputs, d.split.val);
  return {score_logits(logits, cohort, d.split.val, task).primary, task_loss(logits, cohort, d.split.val, task).item()};
}

// ---- teacher ------------------------------------------------------------------

struct TeacherStepParts {
  double task = 0, aux_t = 0, aux_e = 0, dev = 0, cosine = 0;
  bool projected = false;
};

inline TeacherModel make_teacher(const RunConfig& cfg, const Preprocessing& p, std::size_t slide_c, std::size_t fold) {
  return TeacherModel(cfg.dmsf, {p.gene_width, slide_c, class_count(cfg.task)}, derive_seed(cfg.seed, 100 + fold));
}

inline StudentModel make_student(const RunConfig& cfg, std::size_t slide_c, std::size_t fold) {
  return StudentModel(cfg.ita, slide_c, class_count(cfg.task), derive_seed(cfg.seed, 200 + fold));
}

inline Tensor aux_loss(const Tensor& logits, const Cohort& c, const std::vector<std::size_t>& idx, TaskKind task) {
  // Subspace heads are classifiers; for survival they classify the event bin.
  return ce_loss(logits, class_labels(c, idx, task));
}

// One teacher step: task + subspace-head losses + DEV, backward, then CGC on
// the aligned T/E gradient bundle.
inline StepResult teacher_step(TeacherModel& model, const Cohort& cohort, const std::vector<CaseInput>& inputs,
                               const std::vector<std::size_t>& batch, const RunConfig& cfg) {
  auto out = model.forward(gather(inputs, batch));
  Tensor task = task_loss(out.logits, cohort, batch, cfg.task);
  Tensor at = aux_loss(out.aux_t, cohort, batch, cfg.task);
  Tensor ae = aux_loss(out.aux_e, cohort, batch, cfg.task);
  Tensor dev = dev_loss({cross_scale_similarity(out.attn_t, cfg.igc.normalize),
                         cross_scale_similarity(out.attn_e, cfg.igc.normalize)},
                        cfg.igc.lambda);
  Tensor total = add(add(task, add(at, ae)), dev);
  StepResult r{total.item(), {}};
  if (!std::isfinite(r.loss)) return r;
  backward(total);
  double cosine = 0.0;
  bool projected = false;
  if (cfg.cgc) {
    auto bundle = gather_bundle(model.params());
    cosine = detect_conflict(bundle);
    const auto conf = confidence_scores(out.aux_t, out.aux_e, class_labels(cohort, batch, cfg.task));
    if (cosine < 0.0 && conf.s_t != conf.s_e) {
      scatter_bundle(coordinate(bundle, conf), model.params());
      projected = true;
    }
  }
  r.parts = {{"task", task.item()}, {"aux_t", at.item()}, {"aux_e", ae.item()},
             {"dev", dev.item()},   {"cosine", cosine},    {"projected", projected}};
  return r;
}

inline FoldData prepare_fold(const Cohort& cohort, const FoldSplit& split, const RunConfig& cfg, bool with_genes,
                             std::size_t fold, RunAudit& audit) {
  FoldData d;
  d.split = split;
  d.prep = fit_preprocessing(cohort, split.train, with_genes, cfg.hvg_fraction, fold, audit);
  d.inputs.resize(cohort.cases.size());
  for (const auto* part : {&split.train, &split.val, &split.test})
    for (std::size_t i : *part) d.inputs[i] = prepare_case(cohort.cases[i], d.prep, cfg, i);
  return d;
}

// Student inference passes with_genes = false so no gene input is built.
inline FoldData restore_fold(const Cohort& cohort, const FoldModel& fm, const RunConfig& cfg, bool with_genes = true) {
  FoldData d;
  d.split = {indices_of(cohort, fm.train_ids), indices_of(cohort, fm.val_ids), indices_of(cohort, fm.test_ids)};
  d.prep = fm.prep;
  if (!with_genes) {
    d.prep.hvg_idx.clear();
    d.prep.tumor_idx.clear();
    d.prep.tme_idx.clear();
    d.prep.genes = {};
  }
  d.inputs.resize(cohort.cases.size());
  for (const auto* part : {&d.split.train, &d.split.val, &d.split.test})
    for (std::size_t i : *part) d.inputs[i] = prepare_case(cohort.cases[i], d.prep, cfg, i);
  return d;
}

inline json steps_to_json(const std::vector<StepLog>& steps) {
  json a = json::array();
  for (const auto& s : steps) {
    json e = s.parts;
    e["epoch"] = s.epoch;
    e["loss"] = s.loss;
    a.push_back(std::move(e));
  }
  return a;
}

struct TrainLog {
  std::vector<std::vector<StepLog>> fold_steps;
};

inline Checkpoint train_teacher(const Cohort& cohort, const RunConfig& cfg, RunAudit& audit,
                                TrainLog* log = nullptr) {
  cfg.validate();
  const auto splits = make_folds(cohort, cfg.task, cfg.folds, cfg.val_fraction, cfg.seed);
  Checkpoint ck;
  ck.stage = Stage::kTeacher;
  ck.config = cfg;
  for (std::size_t f = 0; f < splits.size(); ++f) {
    FoldData d = prepare_fold(cohort, splits[f], cfg, true, f, audit);
    TeacherModel model = make_teacher(cfg, d.prep, cohort.dims.c, f);
    auto outcome = run_training(
        model.params(), cfg, d.split.train, 10 + f,
        [&](const std::vector<std::size_t>& batch) { return teacher_step(model, cohort, d.inputs, batch, cfg); },
        [&] { return validate_task(model, cohort, d, cfg.task); }, "train-teacher fold " + std::to_string(f));
    FoldModel fm{ids_of(cohort, d.split.train), ids_of(cohort, d.split.val), ids_of(cohort, d.split.test),
                 d.prep, to_blobs(model.params()), {}, outcome.history};
    ck.folds.push_back(std::move(fm));
    if (log) log->fold_steps.push_back(std::move(outcome.steps));
  }
  return ck;
}

// ---- student ------------------------------------------------------------------

// Frozen-teacher targets for the distillation loss, row-aligned with `idx`.
struct TeacherTargets {
  std::map<std::size_t, std::size_t> row;  // case index -> row
  Tensor logits;                            // [n, classes]
  Tensor reps;                              // [n, 2 * rep_dim]
  Tensor x_r_t, x_r_e;
};

inline TeacherTargets teacher_targets(const TeacherModel& teacher, const std::vector<CaseInput>& inputs,
                                      const std::vector<std::size_t>& idx) {
  TeacherTargets t;
  std::vector<Tensor> lg, xt, xe;
  for (std::size_t b = 0; b < idx.size(); b += 16) {
    std::vector<std::size_t> sub(idx.begin() + static_cast<std::ptrdiff_t>(b),
                                 idx.begin() + static_cast<std::ptrdiff_t>(std::min(b + 16, idx.size())));
    auto o = teacher.forward(gather(inputs, sub));
    lg.push_back(detach(o.logits));
    xt.push_back(detach(o.x_r_t));
    xe.push_back(detach(o.x_r_e));
  }
  for (std::size_t r = 0; r < idx.size(); ++r) t.row[idx[r]] = r;
  t.logits = concat_rows(lg);
  t.x_r_t = concat_rows(xt);
  t.x_r_e = concat_rows(xe);
  t.reps = concat_cols({t.x_r_t, t.x_r_e});
  return t;
}

inline Tensor select_rows(const Tensor& m, const std::vector<std::size_t>& rows) {
  std::vector<double> v;
  for (std::size_t r : rows) v.insert(v.end(), m.data().begin() + static_cast<std::ptrdiff_t>(r * m.cols()),
                                      m.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * m.cols()));
  return Tensor::from(rows.size(), m.cols(), std::move(v));
}

// Task loss alone (warmup), or the weighted distillation objective when
// targets are given.
inline StepResult student_step(const StudentModel& model, const Cohort& cohort, const std::vector<CaseInput>& inputs,
                               const std::vector<std::size_t>& batch, const RunConfig& cfg,
                               const TeacherTargets* targets) {
  auto out = model.forward(gather(inputs, batch));
  Tensor task = task_loss(out.logits, cohort, batch, cfg.task);
  if (!targets) {
    StepResult r{task.item(), {{"task", task.item()}}};
    if (std::isfinite(r.loss)) backward(task);
    return r;
  }
  std::vector<std::size_t> rows;
  for (std::size_t i : batch) rows.push_back(targets->row.at(i));
  Tensor mse = representation_mse(select_rows(targets->reps, rows), out.rep);
  Tensor kl = distill_kl(select_rows(targets->logits, rows), out.logits, cfg.distill);
  Tensor total = distill_loss(task, mse, kl, cfg.distill);
  StepResult r{total.item(), {{"task", task.item()}, {"mse", mse.item()}, {"kl", kl.item()}}};
  if (std::isfinite(r.loss)) backward(total);
  return r;
}

// Student training from the given initial parameters; warmup and distillation
// share the batch-order stream so zero distillation weights reproduce warmup.
inline TrainOutcome train_student_fold(StudentModel& model, const Cohort& cohort, const FoldData& d,
                                       const RunConfig& cfg, std::size_t fold, const TeacherTargets* targets,
                                       const std::string& tag) {
  return run_training(
      model.params(), cfg, d.split.train, 20 + fold,
      [&](const std::vector<std::size_t>& batch) { return student_step(model, cohort, d.inputs, batch, cfg, targets); },
      [&] { return validate_task(model, cohort, d, cfg.task); }, tag);
}

inline Checkpoint warmup_student(const Cohort& cohort, const RunConfig& cfg, RunAudit& audit,
                                 TrainLog* log = nullptr) {
  cfg.validate();
  const auto splits = make_folds(cohort, cfg.task, cfg.folds, cfg.val_fraction, cfg.seed);
  Checkpoint ck;
  ck.stage = Stage::kStudentWarmup;
  ck.config = cfg;
  for (std::size_t f = 0; f < splits.size(); ++f) {
    FoldData d = prepare_fold(cohort, splits[f], cfg, false, f, audit);
    StudentModel model = make_student(cfg, cohort.dims.c, f);
    auto outcome = train_student_fold(model, cohort, d, cfg, f, nullptr, "warmup-student fold " + std::to_string(f));
    ck.folds.push_back({ids_of(cohort, d.split.train), ids_of(cohort, d.split.val), ids_of(cohort, d.split.test),
                        d.prep, to_blobs(model.params()), {}, outcome.history});
    if (log) log->fold_steps.push_back(std::move(outcome.steps));
  }
  return ck;
}

inline Checkpoint distill_student(const Cohort& cohort, const Checkpoint& teacher_ck, const Checkpoint& warmup_ck,
                                  const RunConfig& cfg, RunAudit& audit, TrainLog* log = nullptr) {
  cfg.validate();
  require(teacher_ck.stage == Stage::kTeacher, "stage_mismatch", "distill: first checkpoint is not a teacher");
  require(warmup_ck.stage == Stage::kStudentWarmup, "stage_mismatch", "distill: second checkpoint is not a warmup student");
  require(teacher_ck.folds.size() == warmup_ck.folds.size(), "preprocessing_mismatch",
          "teacher and warmup checkpoints have different fold counts");
  require(teacher_ck.config.task == cfg.task && warmup_ck.config.task == cfg.task, "task_mismatch",
          "checkpoint task differs from the run config");
  Checkpoint ck;
  ck.stage = Stage::kStudentDistilled;
  ck.config = cfg;
  for (std::size_t f = 0; f < teacher_ck.folds.size(); ++f) {
    const FoldModel& tf = teacher_ck.folds[f];
    const FoldModel& wf = warmup_ck.folds[f];
    require(tf.train_ids == wf.train_ids && tf.val_ids == wf.val_ids && tf.test_ids == wf.test_ids,
            "preprocessing_mismatch", "fold " + std::to_string(f) + ": teacher and warmup splits differ");
    require(same_slide_preprocessing(tf.prep, wf.prep), "preprocessing_mismatch",
            "fold " + std::to_string(f) + ": slide statistics differ between checkpoints");
    FoldSplit split{indices_of(cohort, tf.train_ids), indices_of(cohort, tf.val_ids), indices_of(cohort, tf.test_ids)};
    FoldData d = prepare_fold(cohort, split, cfg, true, f, audit);
    require(same_gene_preprocessing(d.prep, tf.prep) && same_slide_preprocessing(d.prep, tf.prep),
            "preprocessing_mismatch",
            "fold " + std::to_string(f) + ": teacher preprocessing (HVG indices / moments) does not match this cohort");

    TeacherModel teacher = make_teacher(teacher_ck.config, tf.prep, cohort.dims.c, f);
    load_blobs(tf.params, teacher.params());
    const auto targets = teacher_targets(teacher, d.inputs, d.split.train);

    StudentModel model = make_student(cfg, cohort.dims.c, f);
    load_blobs(wf.params, model.params());
    auto outcome = train_student_fold(model, cohort, d, cfg, f, &targets, "distill fold " + std::to_string(f));
    FoldModel fm{tf.train_ids, tf.val_ids, tf.test_ids, d.prep, to_blobs(model.params()), {}, outcome.history};
    const std::size_t rd = teacher_ck.config.dmsf.rep_dim;
    fm.extras.push_back({"teacher_x_r_t", split.train.size(), rd, {targets.x_r_t.data().begin(), targets.x_r_t.data().end()}});
    fm.extras.push_back({"teacher_x_r_e", split.train.size(), rd, {targets.x_r_e.data().begin(), targets.x_r_e.data().end()}});
    ck.folds.push_back(std::move(fm));
    if (log) log->fold_steps.push_back(std::move(outcome.steps));
  }
  return ck;
}

// ---- evaluation ---------------------------------------------------------------

enum class Setting { kUnimodal, kMissing, kMultimodal };

inline std::string to_string(Setting s) {
  switch (s) {
    case Setting::kUnimodal: return "unimodal";
    case Setting::kMissing: return "missing_modality";
    case Setting::kMultimodal: return "multimodal";
  }
  return "?";
}

inline Setting parse_setting(const std::string& s) {
  if (s == "unimodal") return Setting::kUnimodal;
  if (s == "missing" || s == "missing_modality") return Setting::kMissing;
  if (s == "multimodal") return Setting::kMultimodal;
  throw Error("bad_setting", "unknown evaluation setting: " + s);
}

// Which checkpoint stage each setting evaluates: slide-trained student,
// distilled student (trained with genes, tested without), teacher.
inline Stage stage_for(Setting s) {
  switch (s) {
    case Setting::kUnimodal: return Stage::kStudentWarmup;
    case Setting::kMissing: return Stage::kStudentDistilled;
    case Setting::kMultimodal: return Stage::kTeacher;
  }
  return Stage::kTeacher;
}

inline bool needs_genes(Setting s) { return s == Setting::kMultimodal; }

struct FoldEval {
  std::size_t fold = 0;
  std::size_t n_test = 0;
  std::map<std::string, double> metrics;
  json per_class;
};

struct EvalReport {
  TaskKind task = TaskKind::kDiagnosis;
  Setting setting = Setting::kUnimodal;
  Stage stage = Stage::kTeacher;
  std::vector<FoldEval> folds;
  std::map<std::string, std::pair<double, double>> summary;  // mean, sample std
  json extra;

  json to_json() const {
    json j;
    j["task"] = dmml::to_string(task);
    j["setting"] = dmml::to_string(setting);
    j["stage"] = dmml::to_string(stage);
    j["averaging"] = "macro";
    j["folds"] = json::array();
    for (const auto& f : folds)
      j["folds"].push_back({{"fold", f.fold}, {"n_test", f.n_test}, {"metrics", f.metrics}, {"per_class", f.per_class}});
    for (const auto& [k, v] : summary) j["summary"][k] = {{"mean", v.first}, {"std", v.second}};
    if (!extra.is_null()) j["extra"] = extra;
    return j;
  }
};

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0};
}

inline FoldEval fold_eval(const Tensor& logits, const Cohort& cohort, const std::vector<std::size_t>& test,
                          TaskKind task, std::size_t fold) {
  FoldEval fe;
  fe.fold = fold;
  fe.n_test = test.size();
  auto s = score_logits(logits, cohort, test, task);
  if (s.cls) {
    fe.metrics = {{"accuracy", s.cls->accuracy}, {"auc", s.cls->auc}, {"sensitivity", s.cls->sensitivity},
                  {"specificity", s.cls->specificity}, {"f1", s.cls->f1}};
    fe.per_class = {{"auc", s.cls->auc_per_class},
                    {"sensitivity", s.cls->sensitivity_per_class},
                    {"specificity", s.cls->specificity_per_class},
                    {"f1", s.cls->f1_per_class}};
  } else {
    fe.metrics = {{"c_index", s.c_index}};
  }
  return fe;
}

inline EvalReport evaluate(const Checkpoint& ck, const Cohort& cohort, Setting setting) {
  require(ck.stage == stage_for(setting), "setting_mismatch",
          "setting " + to_string(setting) + " evaluates a " + to_string(stage_for(setting)) + " checkpoint, got " +
              to_string(ck.stage));
  require(!needs_genes(setting) || !cohort.genes_missing(), "missing_genes",
          "multimodal evaluation needs gene expression");
  EvalReport rep;
  rep.task = ck.config.task;
  rep.setting = setting;
  rep.stage = ck.stage;
  json pcc = json::array();
  for (std::size_t f = 0; f < ck.folds.size(); ++f) {
    const FoldData d = restore_fold(cohort, ck.folds[f], ck.config, ck.stage == Stage::kTeacher);
    Tensor logits;
    if (ck.stage == Stage::kTeacher) {
      TeacherModel m = make_teacher(ck.config, d.prep, cohort.dims.c, f);
      load_blobs(ck.folds[f].params, m.params());
      logits = predict_logits(m, d.inputs, d.split.test);
    } else {
      StudentModel m = make_student(ck.config, cohort.dims.c, f);
      load_blobs(ck.folds[f].params, m.params());
      logits = predict_logits(m, d.inputs, d.split.test);
    }
    rep.folds.push_back(fold_eval(logits, cohort, d.split.test, ck.config.task, f));
    if (ck.config.task == TaskKind::kGrading && needs_genes(setting) && d.split.test.size() >= 3) {
      // Malignancy score: probability of the highest grade.
      Tensor p = softmax_rows(logits);
      std::vector<double> score, expr;
      for (std::size_t r = 0; r < d.split.test.size(); ++r) {
        score.push_back(p(r, p.cols() - 1));
        for (std::size_t g : d.prep.hvg_idx) expr.push_back(cohort.cases[d.split.test[r]].genes[g]);
      }
      const auto r = gene_pcc(score, expr, d.prep.hvg_idx.size());
      json genes = json::array();
      for (std::size_t k = 0; k < r.size(); ++k) genes.push_back({{"gene", cohort.gene_ids[d.prep.hvg_idx[k]]}, {"pcc", r[k]}});
      pcc.push_back({{"fold", f}, {"genes", genes}});
    }
  }
  std::map<std::string, std::vector<double>> by_metric;
  for (const auto& fe : rep.folds)
    for (const auto& [k, v] : fe.metrics) by_metric[k].push_back(v);
  for (const auto& [k, v] : by_metric) rep.summary[k] = mean_std(v);
  if (!pcc.empty()) rep.extra["gene_pcc"] = pcc;
  return rep;
}

inline std::string eval_csv(const EvalReport& r) {
  std::string out = "task,setting,stage,fold,metric,value\n";
  auto num = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return std::string(buf);
  };
  for (const auto& f : r.folds)
    for (const auto& [k, v] : f.metrics)
      out += to_string(r.task) + "," + to_string(r.setting) + "," + to_string(r.stage) + "," + std::to_string(f.fold) +
             "," + k + "," + num(v) + "\n";
  for (const auto& [k, v] : r.summary) {
    out += to_string(r.task) + "," + to_string(r.setting) + "," + to_string(r.stage) + ",mean," + k + "," + num(v.first) + "\n";
    out += to_string(r.task) + "," + to_string(r.setting) + "," + to_string(r.stage) + ",std," + k + "," + num(v.second) + "\n";
  }
  return out;
}

// ---- interpretability -----------------------------------------------------------

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  const double na = norm(a), nb = norm(b);
  return na > 0 && nb > 0 ? dot(a, b) / (na * nb) : 0.0;
}

struct CaseClusters {
  std::string case_id;
  std::size_t fold = 0;
  std::vector<std::size_t> assignment;  // per 10x patch
  std::vector<bool> prototype_tumor;    // per cluster
  std::vector<bool> tumor_mask;         // predicted
  std::optional<Overlap> overlap;       // vs planted mask, when available
};

// A prototype is labeled tumor when its projection is, on average over the
// teacher's training cases, more cosine-similar to [X_R^T; 0] than to [0; X_R^E].
inline std::vector<bool> label_prototypes(const StudentModel& model, const Tensor& prototypes, const Blob& ref_t,
                                          const Blob& ref_e) {
  Tensor proj = detach(model.ita().project(prototypes));
  const std::size_t rd = ref_t.cols;
  require(proj.cols() == 2 * rd, "width_mismatch", "prototype projection width differs from the teacher target");
  std::vector<bool> out;
  for (std::size_t k = 0; k < proj.rows(); ++k) {
    const auto v = proj.row(k);
    const std::vector<double> vt(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(rd));
    const std::vector<double> ve(v.begin() + static_cast<std::ptrdiff_t>(rd), v.end());
    const double nv = norm(v);
    double st = 0.0, se = 0.0;
    for (std::size_t r = 0; r < ref_t.rows; ++r) {
      const std::vector<double> t(ref_t.values.begin() + static_cast<std::ptrdiff_t>(r * rd),
                                  ref_t.values.begin() + static_cast<std::ptrdiff_t>((r + 1) * rd));
      const std::vector<double> e(ref_e.values.begin() + static_cast<std::ptrdiff_t>(r * rd),
                                  ref_e.values.begin() + static_cast<std::ptrdiff_t>((r + 1) * rd));
      const double nt = norm(t), ne = norm(e);
      if (nv > 0 && nt > 0) st += dot(vt, t) / (nv * nt);
      if (nv > 0 && ne > 0) se += dot(ve, e) / (nv * ne);
    }
    out.push_back(st > se);
  }
  return out;
}

struct ClusterExport {
  std::vector<CaseClusters> cases;
  double mean_dice = std::nan("");
  double mean_recall = std::nan("");
};

// Clusters every test-fold case at 10x with its fold's student and labels the
// prototypes by subspace.
inline ClusterExport cluster_export(const Checkpoint& ck, const Cohort& cohort) {
  require(ck.stage == Stage::kStudentDistilled, "stage_mismatch",
          "cluster-export needs a distilled student checkpoint (it carries the teacher reference)");
  ClusterExport ex;
  std::vector<double> dice, recall;
  for (std::size_t f = 0; f < ck.folds.size(); ++f) {
    const Blob* rt = ck.extra(f, "teacher_x_r_t");
    const Blob* re = ck.extra(f, "teacher_x_r_e");
    require(rt && re, "bad_checkpoint", "distilled checkpoint lacks teacher reference representations");
    const FoldData d = restore_fold(cohort, ck.folds[f], ck.config, false);
    StudentModel m = make_student(ck.config, cohort.dims.c, f);
    load_blobs(ck.folds[f].params, m.params());
    for (std::size_t i : d.split.test) {
      const auto& in = d.inputs[i];
      auto s = ita_scale(in.s10, m.ita(), ck.config.ita);
      CaseClusters cc;
      cc.case_id = cohort.cases[i].case_id;
      cc.fold = f;
      cc.assignment = s.clusters.assignment;
      cc.prototype_tumor = label_prototypes(m, s.clusters.prototypes, *rt, *re);
      for (std::size_t a : cc.assignment) cc.tumor_mask.push_back(cc.prototype_tumor[a]);
      const auto& truth = cohort.cases[i].tumor_mask10;
      if (!truth.empty() && truth.size() == cc.tumor_mask.size()) {
        cc.overlap = cluster_overlap(cc.tumor_mask, truth);
        dice.push_back(cc.overlap->dice);
        recall.push_back(cc.overlap->recall);
      }
      ex.cases.push_back(std::move(cc));
    }
  }
  if (!dice.empty()) {
    ex.mean_dice = mean_std(dice).first;
    ex.mean_recall = mean_std(recall).first;
  }
  return ex;
}

}  // namespace dmml
