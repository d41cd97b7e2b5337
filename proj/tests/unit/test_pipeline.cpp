#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "common/test_util.hpp"
#include "dmml/pipeline.hpp"

namespace {

using namespace dmml;
using dmml::testing::error_code_of;
using dmml::testing::TempDir;
using dmml::testing::tiny_run_config;

struct Runs {
  RunConfig cfg = tiny_run_config();
  Cohort cohort = generate_cohort(cfg.synth);
};

double mean_loss(const std::vector<StepLog>& steps, std::size_t epoch) {
  double s = 0;
  int n = 0;
  for (const auto& st : steps)
    if (st.epoch == epoch) s += st.loss, ++n;
  return s / n;
}

TEST(Folds, StratifiedAndDisjoint) {
  Runs r;
  r.cfg.synth.n_cases = 40;
  r.cohort = generate_cohort(r.cfg.synth);
  for (auto task : {TaskKind::kDiagnosis, TaskKind::kGrading, TaskKind::kSurvival}) {
    const auto folds = make_folds(r.cohort, task, 4, 0.2, 3);
    ASSERT_EQ(folds.size(), 4u);
    std::vector<int> in_test(40, 0);
    for (const auto& f : folds) {
      std::set<std::size_t> all;
      for (const auto* part : {&f.train, &f.val, &f.test})
        for (auto i : *part) ASSERT_TRUE(all.insert(i).second);
      EXPECT_EQ(all.size(), 40u);
      for (auto i : f.test) ++in_test[i];
    }
    for (int c : in_test) EXPECT_EQ(c, 1);
    // Per label, test-fold counts differ by at most one.
    std::map<std::size_t, std::vector<std::size_t>> per_label;
    for (std::size_t f = 0; f < 4; ++f) {
      std::map<std::size_t, std::size_t> cnt;
      for (auto i : folds[f].test) ++cnt[stratum(r.cohort.cases[i], task)];
      for (std::size_t i = 0; i < 40; ++i) per_label[stratum(r.cohort.cases[i], task)].resize(4);
      for (auto [l, c] : cnt) per_label[l][f] = c;
    }
    for (auto& [l, counts] : per_label) {
      const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
      EXPECT_LE(*hi - *lo, 1u);
    }
  }
  EXPECT_EQ(error_code_of([&] { make_folds(r.cohort, TaskKind::kDiagnosis, 1, 0.2, 0); }), "bad_config");
}

TEST(Pipeline, TeacherLossDecreasesAndIsDeterministic) {
  Runs r;
  r.cfg.epochs = 6;
  RunAudit a1, a2;
  TrainLog l1, l2;
  const auto c1 = train_teacher(r.cohort, r.cfg, a1, &l1);
  const auto c2 = train_teacher(r.cohort, r.cfg, a2, &l2);
  EXPECT_EQ(serialize(c1), serialize(c2));
  for (const auto& steps : l1.fold_steps) EXPECT_LT(mean_loss(steps, 5), mean_loss(steps, 0));

  auto other = r.cfg;
  other.seed = 99;
  RunAudit a3;
  EXPECT_NE(serialize(train_teacher(r.cohort, other, a3)), serialize(c1));
}

TEST(Pipeline, StudentLossDecreases) {
  Runs r;
  r.cfg.epochs = 6;
  RunAudit a;
  TrainLog log;
  warmup_student(r.cohort, r.cfg, a, &log);
  for (const auto& steps : log.fold_steps) EXPECT_LT(mean_loss(steps, 5), mean_loss(steps, 0));
}

TEST(Pipeline, CheckpointRoundTripIsByteIdentical) {
  Runs r;
  RunAudit a;
  const auto ck = train_teacher(r.cohort, r.cfg, a);
  TempDir dir("ckpt");
  save_checkpoint(ck, dir.path() / "a.ckpt");
  const auto back = load_checkpoint(dir.path() / "a.ckpt");
  save_checkpoint(back, dir.path() / "b.ckpt");
  EXPECT_EQ(dmml::testing::read_bytes(dir.path() / "a.ckpt"), dmml::testing::read_bytes(dir.path() / "b.ckpt"));
  EXPECT_EQ(evaluate(back, r.cohort, Setting::kMultimodal).to_json(),
            evaluate(ck, r.cohort, Setting::kMultimodal).to_json());

  std::string bytes = serialize(ck);
  EXPECT_EQ(error_code_of([&] { deserialize(bytes.substr(0, bytes.size() / 2)); }), "bad_checkpoint");
  bytes[0] = 'X';
  EXPECT_EQ(error_code_of([&] { deserialize(bytes); }), "bad_checkpoint");
}

TEST(Pipeline, FitsNeverSeeHeldOutCases) {
  Runs r;
  RunAudit a;
  const auto tk = train_teacher(r.cohort, r.cfg, a);
  const auto wk = warmup_student(r.cohort, r.cfg, a);
  distill_student(r.cohort, tk, wk, r.cfg, a);
  ASSERT_FALSE(a.fits.empty());
  for (const auto& fit : a.fits) {
    const auto& fm = tk.folds.at(fit.fold);
    std::set<std::string> held(fm.test_ids.begin(), fm.test_ids.end());
    held.insert(fm.val_ids.begin(), fm.val_ids.end());
    for (const auto& id : fit.case_ids) EXPECT_FALSE(held.contains(id)) << fit.what << " fold " << fit.fold << " " << id;
    EXPECT_EQ(std::set<std::string>(fit.case_ids.begin(), fit.case_ids.end()),
              std::set<std::string>(fm.train_ids.begin(), fm.train_ids.end()));
  }
}

TEST(Pipeline, UnimodalEvaluationNeverReadsGenes) {
  Runs r;
  TempDir dir("cohort");
  write_cohort(r.cohort, dir.path());
  for (const auto& e : std::filesystem::directory_iterator(dir.path()))
    if (e.path().string().ends_with(".genes.f32")) std::filesystem::remove(e.path());
  RunAudit audit;
  const auto cohort = load_cohort(dir.path(), {false, &audit.files});
  EXPECT_TRUE(cohort.genes_missing());
  const auto wk = warmup_student(cohort, r.cfg, audit);
  const auto rep = evaluate(wk, cohort, Setting::kUnimodal);
  EXPECT_FALSE(audit.files.touched_suffix(".genes.f32"));
  EXPECT_TRUE(audit.files.touched_suffix(".grid10.f32"));
  EXPECT_EQ(rep.folds.size(), r.cfg.folds);
}

TEST(Pipeline, FoldMetricCountAndSettingChecks) {
  Runs r;
  RunAudit a;
  const auto tk = train_teacher(r.cohort, r.cfg, a);
  const auto rep = evaluate(tk, r.cohort, Setting::kMultimodal);
  ASSERT_EQ(rep.folds.size(), r.cfg.folds);
  std::size_t tested = 0;
  for (const auto& f : rep.folds) {
    tested += f.n_test;
    EXPECT_TRUE(f.metrics.contains("accuracy"));
  }
  EXPECT_EQ(tested, r.cohort.cases.size());
  for (const auto& [k, v] : rep.summary) EXPECT_GE(v.second, 0.0) << k;
  EXPECT_EQ(error_code_of([&] { evaluate(tk, r.cohort, Setting::kUnimodal); }), "setting_mismatch");
  EXPECT_EQ(error_code_of([&] { evaluate(tk, r.cohort, Setting::kMissing); }), "setting_mismatch");

  const auto csv = eval_csv(rep);
  EXPECT_EQ(csv.rfind("task,setting,stage,fold,metric,value\n", 0), 0u);
  EXPECT_NE(csv.find(",mean,accuracy,"), std::string::npos);
}

TEST(Pipeline, DistillRejectsMismatchedPreprocessing) {
  Runs r;
  RunAudit a;
  const auto tk = train_teacher(r.cohort, r.cfg, a);
  const auto wk = warmup_student(r.cohort, r.cfg, a);
  auto other = r.cfg;
  other.hvg_fraction = 0.6;
  EXPECT_EQ(error_code_of([&] { distill_student(r.cohort, tk, wk, other, a); }), "preprocessing_mismatch");
  EXPECT_EQ(error_code_of([&] { distill_student(r.cohort, wk, tk, r.cfg, a); }), "stage_mismatch");

  auto seeded = r.cfg;
  seeded.seed = 5;  // different folds
  const auto wk5 = warmup_student(r.cohort, seeded, a);
  EXPECT_EQ(error_code_of([&] { distill_student(r.cohort, tk, wk5, r.cfg, a); }), "preprocessing_mismatch");
}

TEST(Pipeline, ZeroDistillWeightsReproduceWarmup) {
  Runs r;
  r.cfg.epochs = 3;
  RunAudit a;
  TrainLog warm_log, dist_log;
  const auto wk = warmup_student(r.cohort, r.cfg, a, &warm_log);
  // Untrained teacher, and a "warmup" checkpoint reset to the initial student.
  auto tk_cfg = r.cfg;
  tk_cfg.epochs = 1;
  auto tk = train_teacher(r.cohort, tk_cfg, a);
  for (std::size_t f = 0; f < tk.folds.size(); ++f) {
    const auto d = restore_fold(r.cohort, tk.folds[f], tk.config);
    tk.folds[f].params = to_blobs(make_teacher(tk.config, d.prep, r.cohort.dims.c, f).params());
  }
  auto init = wk;
  for (std::size_t f = 0; f < init.folds.size(); ++f)
    init.folds[f].params = to_blobs(make_student(r.cfg, r.cohort.dims.c, f).params());
  auto cfg = r.cfg;
  cfg.distill.w_kl = 0.0;
  cfg.distill.w_mse = 0.0;
  const auto dk = distill_student(r.cohort, tk, init, cfg, a, &dist_log);
  ASSERT_EQ(dist_log.fold_steps.size(), warm_log.fold_steps.size());
  for (std::size_t f = 0; f < warm_log.fold_steps.size(); ++f) {
    ASSERT_EQ(dist_log.fold_steps[f].size(), warm_log.fold_steps[f].size());
    for (std::size_t s = 0; s < warm_log.fold_steps[f].size(); ++s)
      EXPECT_DOUBLE_EQ(dist_log.fold_steps[f][s].loss, warm_log.fold_steps[f][s].loss);
    EXPECT_EQ(dk.folds[f].params.size(), wk.folds[f].params.size());
    for (std::size_t p = 0; p < wk.folds[f].params.size(); ++p)
      for (std::size_t i = 0; i < wk.folds[f].params[p].values.size(); ++i)
        ASSERT_NEAR(dk.folds[f].params[p].values[i], wk.folds[f].params[p].values[i], 1e-12);
  }
}

TEST(Pipeline, LargeDevWeightShrinksDiagonalVariance) {
  Runs r;
  r.cfg.epochs = 5;
  r.cfg.igc.lambda = 1e6;
  RunAudit a;
  TrainLog log;
  train_teacher(r.cohort, r.cfg, a, &log);
  for (const auto& steps : log.fold_steps) {
    const double first = steps.front().parts.at("dev").get<double>();
    double last = 0;
    int n = 0;
    for (const auto& s : steps)
      if (s.epoch == 4) last += s.parts.at("dev").get<double>(), ++n;
    EXPECT_LT(last / n, 0.5 * first);
  }
}

TEST(Pipeline, ClusterExportNeedsDistilledCheckpoint) {
  Runs r;
  RunAudit a;
  const auto tk = train_teacher(r.cohort, r.cfg, a);
  const auto wk = warmup_student(r.cohort, r.cfg, a);
  EXPECT_EQ(error_code_of([&] { cluster_export(wk, r.cohort); }), "stage_mismatch");
  const auto dk = distill_student(r.cohort, tk, wk, r.cfg, a);
  const auto ex = cluster_export(dk, r.cohort);
  ASSERT_EQ(ex.cases.size(), r.cohort.cases.size());
  for (const auto& c : ex.cases) {
    EXPECT_EQ(c.assignment.size(), r.cfg.synth.grid_h10 * r.cfg.synth.grid_w10);
    EXPECT_EQ(c.prototype_tumor.size(), r.cfg.ita.clusters);
    for (auto k : c.assignment) EXPECT_LT(k, r.cfg.ita.clusters);
    ASSERT_TRUE(c.overlap.has_value());
    EXPECT_GE(c.overlap->dice, 0.0);
    EXPECT_LE(c.overlap->dice, 1.0);
  }
  EXPECT_TRUE(std::isfinite(ex.mean_dice));
}

TEST(Settings, ParseAndStage) {
  EXPECT_EQ(parse_setting("unimodal"), Setting::kUnimodal);
  EXPECT_EQ(parse_setting("missing"), Setting::kMissing);
  EXPECT_EQ(parse_setting("missing_modality"), Setting::kMissing);
  EXPECT_EQ(parse_setting("multimodal"), Setting::kMultimodal);
  EXPECT_EQ(error_code_of([] { parse_setting("bimodal"); }), "bad_setting");
  EXPECT_EQ(stage_for(Setting::kUnimodal), Stage::kStudentWarmup);
  EXPECT_EQ(stage_for(Setting::kMissing), Stage::kStudentDistilled);
  EXPECT_EQ(stage_for(Setting::kMultimodal), Stage::kTeacher);
  EXPECT_TRUE(needs_genes(Setting::kMultimodal));
  EXPECT_FALSE(needs_genes(Setting::kMissing));
}

TEST(Config, JsonRoundTripAndUnknownKeys) {
  auto cfg = tiny_run_config();
  cfg.task = TaskKind::kSurvival;
  cfg.igc.lambda = 0.25;
  cfg.distill.tau = 3.0;
  const auto j = to_json(cfg);
  EXPECT_EQ(to_json(config_from_json(j)), j);

  auto bad = j;
  bad["epoch"] = 3;
  EXPECT_EQ(error_code_of([&] { config_from_json(bad); }), "bad_config");
  bad = j;
  bad["ita"]["cluster"] = 3;
  EXPECT_EQ(error_code_of([&] { config_from_json(bad); }), "bad_config");
  bad = j;
  bad["ita"]["rep_dim"] = 7;
  EXPECT_EQ(error_code_of([&] { config_from_json(bad); }), "bad_config");
  bad = j;
  bad["folds"] = "three";
  EXPECT_EQ(error_code_of([&] { config_from_json(bad); }), "bad_config");
  EXPECT_EQ(error_code_of([] { load_config("/nonexistent/cfg.json"); }), "missing_file");
}

}  // namespace
