// Command-line front end: synth, training stages, evaluation, gradcheck,
// cluster export and reporting.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dmml/gradcheck_suite.hpp"
#include "dmml/pipeline.hpp"
#include "dmml/report.hpp"

namespace fs = std::filesystem;
using dmml::json;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
};

dmml::RunConfig run_config(const Globals& g) {
  dmml::RunConfig cfg = g.config.empty() ? dmml::RunConfig{} : dmml::load_config(g.config);
  if (g.seed) {
    cfg.seed = *g.seed;
    cfg.synth.seed = *g.seed;
  }
  cfg.validate();
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  dmml::require(static_cast<bool>(out), "io_error", "cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  std::ifstream in(path);
  dmml::require(static_cast<bool>(in), "missing_file", "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw dmml::Error("bad_json", path.string() + ": " + e.what());
  }
}

dmml::Cohort load(const std::string& dir, bool genes, dmml::RunAudit& audit) {
  return dmml::load_cohort(fs::path(dir), {genes, &audit.files});
}

json training_log(const dmml::Checkpoint& ck, const dmml::TrainLog& log) {
  json j;
  j["stage"] = dmml::to_string(ck.stage);
  j["folds"] = json::array();
  for (std::size_t f = 0; f < ck.folds.size(); ++f)
    j["folds"].push_back({{"fold", f},
                          {"history", ck.folds[f].history},
                          {"steps", f < log.fold_steps.size() ? dmml::steps_to_json(log.fold_steps[f]) : json::array()}});
  return j;
}

void finish_stage(const Globals& g, const dmml::Checkpoint& ck, const dmml::TrainLog& log,
                  const dmml::RunAudit& audit) {
  const std::string tag = dmml::to_string(ck.stage);
  const fs::path out(g.out);
  dmml::save_checkpoint(ck, out / (tag + ".ckpt"));
  write_json(out / (tag + "_log.json"), training_log(ck, log));
  write_json(out / ("audit_" + tag + ".json"), audit.to_json());
  std::cout << (out / (tag + ".ckpt")).string() << "\n";
}

json cluster_json(const dmml::ClusterExport& ex) {
  json j;
  j["mean_dice"] = ex.mean_dice;
  j["mean_recall"] = ex.mean_recall;
  j["cases"] = json::array();
  for (const auto& c : ex.cases) {
    json e{{"case_id", c.case_id},
           {"fold", c.fold},
           {"assignment", c.assignment},
           {"prototype_subspace", json::array()}};
    for (bool t : c.prototype_tumor) e["prototype_subspace"].push_back(t ? "tumor" : "tme");
    if (c.overlap) {
      e["dice"] = c.overlap->dice;
      e["recall"] = c.overlap->recall;
    }
    j["cases"].push_back(std::move(e));
  }
  return j;
}

std::string cluster_csv(const dmml::ClusterExport& ex) {
  std::string s = "case_id,fold,patch,cluster,subspace\n";
  for (const auto& c : ex.cases)
    for (std::size_t p = 0; p < c.assignment.size(); ++p)
      s += c.case_id + "," + std::to_string(c.fold) + "," + std::to_string(p) + "," + std::to_string(c.assignment[p]) +
           "," + (c.tumor_mask[p] ? "tumor" : "tme") + "\n";
  return s;
}

void run_report(const Globals& g, const std::vector<std::string>& inputs) {
  std::vector<fs::path> files;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(in))
        if (e.path().extension() == ".json") found.push_back(e.path());
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    } else {
      files.emplace_back(in);
    }
  }
  std::vector<dmml::ReportRow> rows;
  const fs::path out(g.out);
  std::size_t curves = 0;
  for (const auto& f : files) {
    const json j = read_json(f);
    if (j.is_object() && j.contains("summary") && j.contains("setting")) {
      auto r = dmml::rows_from_eval(j);
      rows.insert(rows.end(), r.begin(), r.end());
    } else if (j.is_object() && j.contains("folds") && j.contains("stage")) {
      const std::string stem = f.stem().string();
      write_text(out / (stem + "_val_metric.svg"),
                 dmml::svg_line_chart(dmml::history_series(j, "val_metric"), stem + ": validation metric", "epoch",
                                      "metric"));
      write_text(out / (stem + "_train_loss.svg"),
                 dmml::svg_line_chart(dmml::history_series(j, "train_loss"), stem + ": training loss", "epoch", "loss"));
      ++curves;
    }
  }
  dmml::require(!rows.empty() || curves > 0, "empty_input", "report: no evaluation reports or training logs found");
  write_text(out / "report.csv", dmml::report_csv(rows));
  write_json(out / "report.json", dmml::report_json(rows));
  if (!rows.empty()) write_text(out / "metrics.svg", dmml::svg_bar_chart(rows, "Held-out metrics (mean +/- std over folds)"));
  std::cout << dmml::report_csv(rows);
}

int fail(const std::string& code, const std::string& message, int status = 1) {
  std::cerr << json{{"error", code}, {"message", message}}.dump() << "\n";
  return status;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Disentangled multi-modal learning on slide/gene cohorts"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Overrides the run and synth seeds");
  app.add_option("--out", g.out, "Output directory");

  std::string cohort_dir, teacher_path, warmup_path, ckpt_path, setting = "unimodal", module;
  double eps = 1e-5;
  std::vector<std::string> inputs;

  auto* synth = app.add_subcommand("synth", "Write a synthetic cohort to --out");
  auto* teacher = app.add_subcommand("train-teacher", "Stage I: multi-modal teacher");
  teacher->add_option("--cohort", cohort_dir)->required();
  auto* warmup = app.add_subcommand("warmup-student", "Stage II: slide-only student, task loss only");
  warmup->add_option("--cohort", cohort_dir)->required();
  auto* distill = app.add_subcommand("distill", "Stage II: distill the teacher into the warmed-up student");
  distill->add_option("--cohort", cohort_dir)->required();
  distill->add_option("--teacher", teacher_path)->required();
  distill->add_option("--warmup", warmup_path)->required();
  auto* eval = app.add_subcommand("evaluate", "Held-out metrics for one evaluation setting");
  eval->add_option("--cohort", cohort_dir)->required();
  eval->add_option("--ckpt", ckpt_path)->required();
  eval->add_option("--setting", setting)->check(CLI::IsMember({"unimodal", "missing", "missing_modality", "multimodal"}));
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference checks of every differentiable module");
  grad->add_option("--module", module, "One module (default: all)");
  grad->add_option("--eps", eps, "Central difference step");
  auto* clusters = app.add_subcommand("cluster-export", "Per-patch prototype clusters and subspace labels");
  clusters->add_option("--cohort", cohort_dir)->required();
  clusters->add_option("--ckpt", ckpt_path)->required();
  auto* report = app.add_subcommand("report", "Aggregate evaluation reports and plot metrics");
  report->add_option("inputs", inputs, "Evaluation JSON files, training logs or directories")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }

  try {
    const fs::path out(g.out);
    if (*synth) {
      const auto cfg = run_config(g);
      dmml::write_cohort(dmml::generate_cohort(cfg.synth), out);
      std::cout << out.string() << "\n";
    } else if (*teacher) {
      const auto cfg = run_config(g);
      dmml::RunAudit audit;
      dmml::TrainLog log;
      const auto cohort = load(cohort_dir, true, audit);
      finish_stage(g, dmml::train_teacher(cohort, cfg, audit, &log), log, audit);
    } else if (*warmup) {
      const auto cfg = run_config(g);
      dmml::RunAudit audit;
      dmml::TrainLog log;
      const auto cohort = load(cohort_dir, false, audit);
      finish_stage(g, dmml::warmup_student(cohort, cfg, audit, &log), log, audit);
    } else if (*distill) {
      const auto cfg = run_config(g);
      dmml::RunAudit audit;
      dmml::TrainLog log;
      const auto tk = dmml::load_checkpoint(teacher_path);
      const auto wk = dmml::load_checkpoint(warmup_path);
      const auto cohort = load(cohort_dir, true, audit);
      finish_stage(g, dmml::distill_student(cohort, tk, wk, cfg, audit, &log), log, audit);
    } else if (*eval) {
      const auto s = dmml::parse_setting(setting);
      const auto ck = dmml::load_checkpoint(ckpt_path);
      dmml::RunAudit audit;
      const auto cohort = load(cohort_dir, dmml::needs_genes(s), audit);
      const auto rep = dmml::evaluate(ck, cohort, s);
      const std::string name = "eval_" + dmml::to_string(s);
      write_json(out / (name + ".json"), rep.to_json());
      write_text(out / (name + ".csv"), dmml::eval_csv(rep));
      write_json(out / ("audit_" + name + ".json"), audit.to_json());
      std::cout << rep.to_json()["summary"].dump(2) << "\n";
    } else if (*grad) {
      json j = json::object();
      const auto names = module.empty() ? dmml::gradcheck_modules() : std::vector<std::string>{module};
      for (const auto& m : names) {
        const auto r = dmml::run_gradcheck(m, eps);
        j[m] = {{"max_rel_error", r.result.max_rel_error}, {"checked", r.result.checked}};
        std::cout << m << " max_rel_error=" << r.result.max_rel_error << " entries=" << r.result.checked << "\n";
      }
      write_json(out / "gradcheck.json", {{"eps", eps}, {"modules", j}});
    } else if (*clusters) {
      const auto ck = dmml::load_checkpoint(ckpt_path);
      dmml::RunAudit audit;
      const auto cohort = load(cohort_dir, false, audit);
      const auto ex = dmml::cluster_export(ck, cohort);
      write_json(out / "clusters.json", cluster_json(ex));
      write_text(out / "clusters.csv", cluster_csv(ex));
      std::cout << "mean_dice=" << dmml::format_number(ex.mean_dice)
                << " mean_recall=" << dmml::format_number(ex.mean_recall) << "\n";
    } else if (*report) {
      run_report(g, inputs);
    }
  } catch (const dmml::Error& e) {
    return fail(e.code(), e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
  return 0;
}
