#pragma once

// Run configuration, read from and written to JSON. Unknown keys are rejected
// so typos do not silently fall back to defaults.

#include <cstdint>
#include <fstream>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "dmml/data_synth.hpp"
#include "dmml/distill.hpp"
#include "dmml/dmsf.hpp"
#include "dmml/error.hpp"
#include "dmml/ita.hpp"
#include "dmml/nn.hpp"
#include "dmml/objectives.hpp"

namespace dmml {

using json = nlohmann::json;

struct IgcConfig {
  double lambda = 0.1;
  bool normalize = true;
};

struct RunConfig {
  TaskKind task = TaskKind::kDiagnosis;
  std::size_t folds = 3;
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  // Share of each training split held out for best-epoch selection.
  double val_fraction = 0.2;
  double hvg_fraction = 0.30;
  std::size_t n_patches = 0;  // 0 keeps the full grids
  bool cgc = true;
  std::uint64_t seed = 0;
  AdamWConfig optimizer;
  DmsfConfig dmsf;
  ItaConfig ita;
  IgcConfig igc;
  DistillConfig distill;
  SynthConfig synth;

  void validate() const {
    require(folds >= 2, "bad_config", "folds must be >= 2");
    require(epochs >= 1, "bad_config", "epochs must be >= 1");
    require(batch_size >= 1, "bad_config", "batch_size must be >= 1");
    require(val_fraction > 0.0 && val_fraction < 1.0, "bad_config", "val_fraction must be in (0,1)");
    require(hvg_fraction > 0.0 && hvg_fraction <= 1.0, "bad_config", "hvg_fraction must be in (0,1]");
    require(optimizer.lr > 0.0 && optimizer.weight_decay >= 0.0, "bad_config", "optimizer settings out of range");
    require(dmsf.heads >= 1 && dmsf.width % dmsf.heads == 0, "bad_config", "dmsf.heads must divide dmsf.width");
    require(ita.heads >= 1 && ita.width % ita.heads == 0, "bad_config", "ita.heads must divide ita.width");
    require(dmsf.query_h >= 1 && dmsf.query_w >= 1 && dmsf.rep_dim >= 1, "bad_config", "dmsf dims must be >= 1");
    require(dmsf.offset_scale >= 0.0 && ita.offset_scale >= 0.0, "bad_config", "offset scales must be >= 0");
    require(ita.clusters >= 1 && ita.neighbors >= 1 && ita.key_h >= 1 && ita.key_w >= 1, "bad_config",
            "ita.clusters, ita.neighbors and the key grid must be >= 1");
    require(ita.rep_dim == 2 * dmsf.rep_dim, "bad_config",
            "ita.rep_dim must equal twice dmsf.rep_dim (the distillation target width)");
    require(igc.lambda >= 0.0, "bad_config", "igc.lambda must be >= 0");
    require(distill.tau > 0.0, "bad_config", "distill.tau must be > 0");
    require(distill.w_task >= 0.0 && distill.w_mse >= 0.0 && distill.w_kl >= 0.0, "bad_config",
            "distill weights must be >= 0");
    synth.validate();
  }
};

namespace detail {

// Copies j[key] into out when present and records the key as consumed.
template <typename T>
void read_key(const json& j, const char* key, T& out, std::set<std::string>& seen) {
  seen.insert(key);
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error("bad_config", std::string("config key '") + key + "': " + e.what());
  }
}

inline void reject_unknown(const json& j, const std::set<std::string>& seen, const std::string& where) {
  require(j.is_object(), "bad_config", "config section '" + where + "' must be an object");
  for (const auto& [k, v] : j.items())
    require(seen.contains(k), "bad_config", "unknown config key '" + where + (where.empty() ? "" : ".") + k + "'");
}

}  // namespace detail

inline json to_json(const RunConfig& c) {
  return {
      {"task", to_string(c.task)},
      {"folds", c.folds},
      {"epochs", c.epochs},
      {"batch_size", c.batch_size},
      {"val_fraction", c.val_fraction},
      {"hvg_fraction", c.hvg_fraction},
      {"n_patches", c.n_patches},
      {"cgc", c.cgc},
      {"seed", c.seed},
      {"optimizer", {{"lr", c.optimizer.lr}, {"weight_decay", c.optimizer.weight_decay},
                     {"beta1", c.optimizer.beta1}, {"beta2", c.optimizer.beta2}, {"eps", c.optimizer.eps}}},
      {"dmsf", {{"query_h", c.dmsf.query_h}, {"query_w", c.dmsf.query_w}, {"width", c.dmsf.width},
                {"heads", c.dmsf.heads}, {"offset_hidden", c.dmsf.offset_hidden}, {"rep_dim", c.dmsf.rep_dim},
                {"offset_scale", c.dmsf.offset_scale}}},
      {"ita", {{"key_h", c.ita.key_h}, {"key_w", c.ita.key_w}, {"width", c.ita.width}, {"heads", c.ita.heads},
               {"offset_hidden", c.ita.offset_hidden}, {"offset_scale", c.ita.offset_scale},
               {"clusters", c.ita.clusters}, {"neighbors", c.ita.neighbors}, {"pool_hidden", c.ita.pool_hidden},
               {"rep_dim", c.ita.rep_dim}}},
      {"igc", {{"lambda", c.igc.lambda}, {"normalize", c.igc.normalize}}},
      {"distill", {{"tau", c.distill.tau}, {"w_task", c.distill.w_task}, {"w_mse", c.distill.w_mse},
                   {"w_kl", c.distill.w_kl}, {"tau_sq_scale", c.distill.tau_sq_scale}}},
      {"synth", {{"n_cases", c.synth.n_cases}, {"grid_h10", c.synth.grid_h10}, {"grid_w10", c.synth.grid_w10},
                 {"embed_dim", c.synth.embed_dim}, {"n_tumor_genes", c.synth.n_tumor_genes},
                 {"n_tme_genes", c.synth.n_tme_genes}, {"latent_dim", c.synth.latent_dim},
                 {"noise_sigma", c.synth.noise_sigma}, {"seed", c.synth.seed},
                 {"label_margin", c.synth.label_margin}, {"hazard_scale", c.synth.hazard_scale},
                 {"censor_rate", c.synth.censor_rate}, {"patch_jitter", c.synth.patch_jitter},
                 {"stain_sigma", c.synth.stain_sigma}}},
  };
}

inline RunConfig config_from_json(const json& j) {
  RunConfig c;
  std::set<std::string> seen;
  std::string task = to_string(c.task);
  detail::read_key(j, "task", task, seen);
  c.task = parse_task(task);
  detail::read_key(j, "folds", c.folds, seen);
  detail::read_key(j, "epochs", c.epochs, seen);
  detail::read_key(j, "batch_size", c.batch_size, seen);
  detail::read_key(j, "val_fraction", c.val_fraction, seen);
  detail::read_key(j, "hvg_fraction", c.hvg_fraction, seen);
  detail::read_key(j, "n_patches", c.n_patches, seen);
  detail::read_key(j, "cgc", c.cgc, seen);
  detail::read_key(j, "seed", c.seed, seen);
  auto section = [&](const char* name, auto&& body) {
    seen.insert(name);
    if (!j.contains(name)) return;
    const json& s = j.at(name);
    std::set<std::string> inner;
    body(s, inner);
    detail::reject_unknown(s, inner, name);
  };
  section("optimizer", [&](const json& s, std::set<std::string>& k) {
    detail::read_key(s, "lr", c.optimizer.lr, k);
    detail::read_key(s, "weight_decay", c.optimizer.weight_decay, k);
    detail::read_key(s, "beta1", c.optimizer.beta1, k);
    detail::read_key(s, "beta2", c.optimizer.beta2, k);
    detail::read_key(s, "eps", c.optimizer.eps, k);
  });
  section("dmsf", [&](const json& s, std::set<std::string>& k) {
    detail::read_key(s, "query_h", c.dmsf.query_h, k);
    detail::read_key(s, "query_w", c.dmsf.query_w, k);
    detail::read_key(s, "width", c.dmsf.width, k);
    detail::read_key(s, "heads", c.dmsf.heads, k);
    detail::read_key(s, "offset_hidden", c.dmsf.offset_hidden, k);
    detail::read_key(s, "rep_dim", c.dmsf.rep_dim, k);
    detail::read_key(s, "offset_scale", c.dmsf.offset_scale, k);
  });
  section("ita", [&](const json& s, std::set<std::string>& k) {
    detail::read_key(s, "key_h", c.ita.key_h, k);
    detail::read_key(s, "key_w", c.ita.key_w, k);
    detail::read_key(s, "width", c.ita.width, k);
    detail::read_key(s, "heads", c.ita.heads, k);
    detail::read_key(s, "offset_hidden", c.ita.offset_hidden, k);
    detail::read_key(s, "offset_scale", c.ita.offset_scale, k);
    detail::read_key(s, "clusters", c.ita.clusters, k);
    detail::read_key(s, "neighbors", c.ita.neighbors, k);
    detail::read_key(s, "pool_hidden", c.ita.pool_hidden, k);
    detail::read_key(s, "rep_dim", c.ita.rep_dim, k);
  });
  section("igc", [&](const json& s, std::set<std::string>& k) {
    detail::read_key(s, "lambda", c.igc.lambda, k);
    detail::read_key(s, "normalize", c.igc.normalize, k);
  });
  section("distill", [&](const json& s, std::set<std::string>& k) {
    detail::read_key(s, "tau", c.distill.tau, k);
    detail::read_key(s, "w_task", c.distill.w_task, k);
    detail::read_key(s, "w_mse", c.distill.w_mse, k);
    detail::read_key(s, "w_kl", c.distill.w_kl, k);
    detail::read_key(s, "tau_sq_scale", c.distill.tau_sq_scale, k);
  });
  section("synth", [&](const json& s, std::set<std::string>& k) {
    detail::read_key(s, "n_cases", c.synth.n_cases, k);
    detail::read_key(s, "grid_h10", c.synth.grid_h10, k);
    detail::read_key(s, "grid_w10", c.synth.grid_w10, k);
    detail::read_key(s, "embed_dim", c.synth.embed_dim, k);
    detail::read_key(s, "n_tumor_genes", c.synth.n_tumor_genes, k);
    detail::read_key(s, "n_tme_genes", c.synth.n_tme_genes, k);
    detail::read_key(s, "latent_dim", c.synth.latent_dim, k);
    detail::read_key(s, "noise_sigma", c.synth.noise_sigma, k);
    detail::read_key(s, "seed", c.synth.seed, k);
    detail::read_key(s, "label_margin", c.synth.label_margin, k);
    detail::read_key(s, "hazard_scale", c.synth.hazard_scale, k);
    detail::read_key(s, "censor_rate", c.synth.censor_rate, k);
    detail::read_key(s, "patch_jitter", c.synth.patch_jitter, k);
    detail::read_key(s, "stain_sigma", c.synth.stain_sigma, k);
  });
  detail::reject_unknown(j, seen, "");
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "missing_file", "cannot open config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error("bad_config", "config " + path + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

}  // namespace dmml
