// Runs the acceptance criteria and prints one PASS/FAIL line per criterion.
// Exit status is nonzero when any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "common/oracles.hpp"
#include "common/reductions.hpp"
#include "dmml/cgc.hpp"
#include "dmml/gradcheck_suite.hpp"
#include "dmml/igc.hpp"
#include "dmml/metrics.hpp"
#include "dmml/pipeline.hpp"

namespace fs = std::filesystem;
using namespace dmml;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

void write_file(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p, std::ios::binary | std::ios::trunc) << text;
}

// ---- 1 ----------------------------------------------------------------------

Verdict gradient_suite() {
  double worst = 0.0;
  std::string worst_module, per;
  for (const auto& m : gradcheck_modules()) {
    const auto r = run_gradcheck(m, 1e-5);
    per += (per.empty() ? "" : " ") + m + "=" + fmt(r.result.max_rel_error, 2);
    if (!(r.result.max_rel_error <= worst)) {
      worst = r.result.max_rel_error;
      worst_module = m;
    }
  }
  return {worst < 1e-4, "max rel error " + fmt(worst, 3) + " (" + worst_module + "); " + per};
}

// ---- 2 ----------------------------------------------------------------------

Verdict cgc_properties() {
  std::mt19937_64 gen(20240601);
  std::normal_distribution<> nd;
  double worst_cos = 0.0;
  std::size_t conflicts = 0, identity_violations = 0, norm_violations = 0, degenerate = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t d = 1 + gen() % 10000;
    std::vector<double> t(d), e(d);
    for (auto& x : t) x = nd(gen);
    for (auto& x : e) x = nd(gen);
    if (trial % 2 == 0) {
      const double mix = 0.05 + 0.9 * std::uniform_real_distribution<>()(gen);
      for (std::size_t i = 0; i < d; ++i) e[i] -= mix * t[i];
    }
    const double st = std::exp(2 * nd(gen)), se = std::exp(2 * nd(gen));
    for (auto& x : t) x *= st;
    for (auto& x : e) x *= se;
    ConfidencePair conf{std::uniform_real_distribution<>(0, 4)(gen), std::uniform_real_distribution<>(0, 4)(gen)};
    if (trial % 50 == 0) conf.s_e = conf.s_t;
    const double cos0 = dot(t, e) / (norm(t) * norm(e));
    const auto out = coordinate({t, e, {}}, conf);
    if (norm(out.g_t) > norm(t) * (1 + 1e-12) || norm(out.g_e) > norm(e) * (1 + 1e-12)) ++norm_violations;
    if (cos0 >= 0.0 || conf.s_t == conf.s_e) {
      if (out.g_t != t || out.g_e != e) ++identity_violations;
      continue;
    }
    ++conflicts;
    const bool t_less = conf.s_t < conf.s_e;
    const auto& less = t_less ? out.g_t : out.g_e;
    const auto& more = t_less ? e : t;
    if ((t_less ? out.g_e : out.g_t) != more) ++identity_violations;
    // A projection that cancels to roundoff has no direction; count it as orthogonal.
    if (norm(less) <= 1e-12 * norm(t_less ? t : e)) {
      ++degenerate;
      continue;
    }
    worst_cos = std::max(worst_cos, std::abs(dot(less, more)) / (norm(less) * norm(more)));
  }
  const bool ok = conflicts > 300 && worst_cos < 1e-6 && identity_violations == 0 && norm_violations == 0;
  return {ok, std::to_string(conflicts) + " conflicts, max |cos| " + fmt(worst_cos, 3) + ", " +
                  std::to_string(degenerate) + " degenerate, identity violations " +
                  std::to_string(identity_violations) + ", norm violations " + std::to_string(norm_violations)};
}

// ---- 3 ----------------------------------------------------------------------

Verdict dpc_oracle() {
  std::mt19937_64 gen(77);
  std::normal_distribution<> nd;
  std::size_t mismatches = 0, tie_instances = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + gen() % 63, c = 1 + gen() % 5;
    const std::size_t k = 1 + gen() % 7;
    const std::size_t clusters = 1 + gen() % std::min<std::size_t>(8, n);
    oracle::Mat z(n, std::vector<double>(c));
    const int kind = trial % 4;  // 0 gaussian, 1 integer lattice, 2 duplicated rows, 3 all equal
    for (auto& r : z)
      for (auto& x : r) x = kind == 1 ? static_cast<double>(gen() % 3) : nd(gen);
    if (kind == 2)
      for (std::size_t i = 1; i < n; i += 2) z[i] = z[i - 1];
    if (kind == 3)
      for (auto& r : z) r = z[0];
    if (kind != 0) ++tie_instances;
    std::vector<double> flat;
    for (const auto& r : z) flat.insert(flat.end(), r.begin(), r.end());
    const auto got = dpc_knn(Tensor::from(n, c, flat), k, clusters);
    const auto want = oracle::dpc(z, std::min(k, n - 1), clusters);
    if (got.rho != want.rho || got.xi != want.xi || got.score != want.score || got.centers != want.centers ||
        got.assignment != want.assignment)
      ++mismatches;
  }
  return {mismatches == 0, "100 instances (" + std::to_string(tie_instances) + " with ties), " +
                               std::to_string(mismatches) + " mismatches"};
}

// ---- 4 ----------------------------------------------------------------------

Verdict dev_semantics() {
  std::mt19937_64 gen(5);
  std::normal_distribution<> nd;
  std::vector<double> v(6 * 10);
  for (auto& x : v) x = nd(gen);
  const auto a = Tensor::from(6, 10, v);
  const double same = dev_loss({cross_scale_similarity({a, a, Subspace::kTumor}),
                                cross_scale_similarity({a, a, Subspace::kTme})},
                               1.0)
                          .item();
  const double hand = dev_loss({Tensor::from(2, 2, {1.0, 0.3, -0.2, 3.0})}, 1.0).item();
  return {std::abs(same) < 1e-12 && hand > 0.0 && hand == 1.0,
          "identical scales " + fmt(same, 3) + ", diagonals {1,3} -> " + fmt(hand, 17)};
}

// ---- 5 ----------------------------------------------------------------------

Verdict zero_offset() {
  double worst = 0.0;
  std::uint64_t seed = 1;
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{5, 4}, {2, 3}, {8, 8}, {3, 11}, {1, 6}})
    worst = std::max(worst, oracle::cross_attention_zero_offset_deviation(seed++, h, w));
  for (auto [kh, kw] : {std::pair<std::size_t, std::size_t>{8, 8}, {6, 7}, {3, 4}, {2, 2}, {1, 1}})
    worst = std::max(worst, oracle::self_attention_zero_offset_deviation(seed++, 6, 7, kh, kw));
  return {worst < 1e-6, "max |deviation| " + fmt(worst, 3) + " over 5 cross and 5 self instances"};
}

// ---- 6, 8, 9 ------------------------------------------------------------------

struct SeedRun {
  std::uint64_t seed = 0;
  double teacher_auc = 0, teacher_acc = 0, distilled_acc = 0, warmup_acc = 0;
  double dice = std::nan("");
  Checkpoint teacher;
  RunAudit audit;
};

std::vector<SeedRun> g_runs;  // shared by 6, 8 and 9

Verdict end_to_end(const fs::path& out) {
  for (std::uint64_t seed : {0, 1, 2}) {
    RunConfig cfg;
    cfg.seed = seed;
    cfg.synth.seed = seed;
    cfg.validate();
    const auto cohort = generate_cohort(cfg.synth);
    SeedRun r;
    r.seed = seed;
    r.teacher = train_teacher(cohort, cfg, r.audit);
    const auto wk = warmup_student(cohort, cfg, r.audit);
    const auto dk = distill_student(cohort, r.teacher, wk, cfg, r.audit);
    const auto te = evaluate(r.teacher, cohort, Setting::kMultimodal);
    const auto de = evaluate(dk, cohort, Setting::kMissing);
    const auto we = evaluate(wk, cohort, Setting::kUnimodal);
    r.teacher_auc = te.summary.at("auc").first;
    r.teacher_acc = te.summary.at("accuracy").first;
    r.distilled_acc = de.summary.at("accuracy").first;
    r.warmup_acc = we.summary.at("accuracy").first;
    const auto ex = cluster_export(dk, cohort);
    r.dice = ex.mean_dice;

    const fs::path dir = out / ("seed" + std::to_string(seed));
    save_checkpoint(r.teacher, dir / "teacher.ckpt");
    save_checkpoint(wk, dir / "student_warmup.ckpt");
    save_checkpoint(dk, dir / "student_distilled.ckpt");
    for (const auto* rep : {&te, &de, &we})
      write_file(dir / ("eval_" + to_string(rep->setting) + ".json"), rep->to_json().dump(2) + "\n");
    write_file(dir / "audit.json", r.audit.to_json().dump(2) + "\n");
    json cl = {{"mean_dice", ex.mean_dice}, {"mean_recall", ex.mean_recall}};
    write_file(dir / "clusters.json", cl.dump(2) + "\n");
    std::cout << "  seed " << seed << ": teacher auc " << fmt(r.teacher_auc) << " acc " << fmt(r.teacher_acc)
              << " | distilled acc " << fmt(r.distilled_acc) << " | warmup acc " << fmt(r.warmup_acc) << " | dice "
              << fmt(r.dice) << std::endl;
    g_runs.push_back(std::move(r));
  }
  double auc = 0, t = 0, d = 0, w = 0;
  for (const auto& r : g_runs) {
    auc += r.teacher_auc / 3;
    t += r.teacher_acc / 3;
    d += r.distilled_acc / 3;
    w += r.warmup_acc / 3;
  }
  const bool ok = auc >= 0.95 && t >= d && d >= w && (d - w) >= 0.02;
  return {ok, "teacher auc " + fmt(auc) + "; mean acc teacher " + fmt(t) + " >= distilled " + fmt(d) +
                  " >= warmup " + fmt(w) + "; distilled - warmup " + fmt(100 * (d - w), 3) + " points"};
}

Verdict interpretability() {
  if (g_runs.empty()) return {false, "no end-to-end runs"};
  double dice = 0.0;
  std::string per;
  for (const auto& r : g_runs) {
    dice += r.dice / static_cast<double>(g_runs.size());
    per += (per.empty() ? "" : ", ") + fmt(r.dice, 3);
  }
  return {dice >= 0.5, "mean Dice " + fmt(dice, 3) + " (per seed " + per + ")"};
}

Verdict determinism() {
  if (g_runs.empty()) return {false, "no end-to-end runs"};
  // Repeat the seed-0 teacher and compare bytes.
  RunConfig cfg;
  cfg.seed = g_runs[0].seed;
  cfg.synth.seed = g_runs[0].seed;
  cfg.validate();
  const auto cohort = generate_cohort(cfg.synth);
  RunAudit audit;
  const auto again = train_teacher(cohort, cfg, audit);
  const bool same = serialize(again) == serialize(g_runs[0].teacher);

  std::size_t fits = 0, leaks = 0;
  for (const auto& r : g_runs)
    for (const auto& fit : r.audit.fits) {
      ++fits;
      const auto& fm = r.teacher.folds.at(fit.fold);
      std::set<std::string> test(fm.test_ids.begin(), fm.test_ids.end());
      for (const auto& id : fit.case_ids) leaks += test.contains(id);
    }
  return {same && leaks == 0 && fits > 0, std::string("repeat teacher checkpoint ") +
                                              (same ? "byte-identical" : "DIFFERS") + "; " + std::to_string(fits) +
                                              " audited fits, " + std::to_string(leaks) + " test-fold ids"};
}

// ---- 7 ----------------------------------------------------------------------

Verdict survival(const fs::path& out) {
  RunConfig cfg;
  cfg.task = TaskKind::kSurvival;
  cfg.synth.noise_sigma = 0.0;
  cfg.validate();
  const auto cohort = generate_cohort(cfg.synth);
  RunAudit audit;
  const auto tk = train_teacher(cohort, cfg, audit);
  const auto rep = evaluate(tk, cohort, Setting::kMultimodal);
  write_file(out / "survival" / "eval_multimodal.json", rep.to_json().dump(2) + "\n");
  const double c = rep.summary.at("c_index").first;

  std::mt19937_64 gen(31);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + gen() % 40;
    std::vector<double> risk(n), time(n);
    std::vector<bool> event(n);
    for (std::size_t i = 0; i < n; ++i) {
      risk[i] = trial % 2 ? static_cast<double>(gen() % 4) : std::normal_distribution<>()(gen);
      time[i] = trial % 3 ? 1.0 + static_cast<double>(gen() % 6) : std::exponential_distribution<>(1.0)(gen) + 0.01;
      event[i] = gen() % 4 != 0;
    }
    event[0] = true;
    if (time[0] >= *std::max_element(time.begin(), time.end())) time[0] = 0.5 * *std::min_element(time.begin(), time.end());
    const double want = oracle::concordance(risk, time, event);
    double got = std::nan("");
    try {
      got = concordance_index(risk, time, event);
    } catch (const Error&) {
    }
    if (!(got == want)) ++mismatches;
  }
  return {c >= 0.85 && mismatches == 0,
          "noise-free teacher C-index " + fmt(c) + "; oracle mismatches " + std::to_string(mismatches) + "/50"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string out = "acceptance_run";
  std::vector<int> only;
  app.add_option("--out", out, "Directory for checkpoints and reports");
  app.add_option("--only", only, "Run only these criteria");
  CLI11_PARSE(app, argc, argv);
  const fs::path dir(out);
  fs::create_directories(dir);

  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"gradient suite", gradient_suite},
      {"CGC properties", cgc_properties},
      {"DPC-KNN oracle equivalence", dpc_oracle},
      {"DEV semantics", dev_semantics},
      {"zero-offset reductions", zero_offset},
      {"end-to-end synthetic recovery", [&] { return end_to_end(dir); }},
      {"survival sanity", [&] { return survival(dir); }},
      {"interpretability (cluster Dice)", interpretability},
      {"determinism and hygiene", determinism},
  };
  bool all = true;
  json summary = json::array();
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    all = all && v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << " " << id << " " << criteria[i].first << ": " << v.detail << " ["
              << fmt(secs, 3) << " s]" << std::endl;
    summary.push_back({{"criterion", id}, {"name", criteria[i].first}, {"pass", v.pass}, {"detail", v.detail},
                       {"seconds", secs}});
  }
  write_file(dir / "acceptance.json", summary.dump(2) + "\n");
  return all ? 0 : 1;
}
