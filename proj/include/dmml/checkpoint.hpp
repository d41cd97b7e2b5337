#pragma once

// Checkpoint file: "DMMLCKPT", u32 version, u64 header length, a JSON header,
// then every blob's values as little-endian f64 in header order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dmml/config.hpp"
#include "dmml/error.hpp"
#include "dmml/ingest.hpp"
#include "dmml/nn.hpp"

namespace dmml {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

enum class Stage { kTeacher, kStudentWarmup, kStudentDistilled };

inline std::string to_string(Stage s) {
  switch (s) {
    case Stage::kTeacher: return "teacher";
    case Stage::kStudentWarmup: return "student_warmup";
    case Stage::kStudentDistilled: return "student_distilled";
  }
  return "?";
}

inline Stage parse_stage(const std::string& s) {
  if (s == "teacher") return Stage::kTeacher;
  if (s == "student_warmup") return Stage::kStudentWarmup;
  if (s == "student_distilled") return Stage::kStudentDistilled;
  throw Error("bad_checkpoint", "unknown stage tag: " + s);
}

struct Blob {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
};

// Statistics fitted on a fold's training cases.
struct Preprocessing {
  std::vector<std::size_t> hvg_idx;    // empty for slide-only models
  std::vector<std::size_t> tumor_idx;  // gene indices feeding the T branch
  std::vector<std::size_t> tme_idx;
  std::size_t gene_width = 0;
  ZScore genes;                        // moments over hvg_idx, same order
  std::vector<double> slide_mean;      // per embedding channel
  std::vector<double> slide_std;

  bool has_genes() const { return !hvg_idx.empty(); }
};

struct FoldModel {
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;
  std::vector<std::string> test_ids;
  Preprocessing prep;
  std::vector<Blob> params;  // model registry order
  std::vector<Blob> extras;  // auxiliary arrays (e.g. teacher reference reps)
  json history = json::array();
};

struct Checkpoint {
  Stage stage = Stage::kTeacher;
  RunConfig config;
  std::vector<FoldModel> folds;

  const Blob* extra(std::size_t fold, const std::string& name) const {
    for (const auto& b : folds.at(fold).extras)
      if (b.name == name) return &b;
    return nullptr;
  }
};

inline constexpr char kCheckpointMagic[8] = {'D', 'M', 'M', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::vector<Blob> to_blobs(const ParamStore& store) {
  std::vector<Blob> out;
  for (const auto& e : store.entries())
    out.push_back({e.name, e.tensor.rows(), e.tensor.cols(), {e.tensor.data().begin(), e.tensor.data().end()}});
  return out;
}

inline void load_blobs(const std::vector<Blob>& blobs, ParamStore& store) {
  require(blobs.size() == store.entries().size(), "registry_mismatch",
          "checkpoint has " + std::to_string(blobs.size()) + " parameters, model has " +
              std::to_string(store.entries().size()));
  for (std::size_t i = 0; i < blobs.size(); ++i) {
    auto& e = store.entries()[i];
    require(blobs[i].name == e.name && blobs[i].rows == e.tensor.rows() && blobs[i].cols == e.tensor.cols(),
            "registry_mismatch", "checkpoint parameter " + blobs[i].name + " does not match model " + e.name);
    auto dst = e.tensor.mutable_data();
    std::copy(blobs[i].values.begin(), blobs[i].values.end(), dst.begin());
  }
}

namespace detail {

inline json prep_to_json(const Preprocessing& p) {
  return {{"hvg_idx", p.hvg_idx},       {"tumor_idx", p.tumor_idx},   {"tme_idx", p.tme_idx},
          {"gene_width", p.gene_width}, {"gene_mean", p.genes.mean},  {"gene_std", p.genes.stdev},
          {"slide_mean", p.slide_mean}, {"slide_std", p.slide_std}};
}

inline Preprocessing prep_from_json(const json& j) {
  Preprocessing p;
  j.at("hvg_idx").get_to(p.hvg_idx);
  j.at("tumor_idx").get_to(p.tumor_idx);
  j.at("tme_idx").get_to(p.tme_idx);
  j.at("gene_width").get_to(p.gene_width);
  j.at("gene_mean").get_to(p.genes.mean);
  j.at("gene_std").get_to(p.genes.stdev);
  j.at("slide_mean").get_to(p.slide_mean);
  j.at("slide_std").get_to(p.slide_std);
  return p;
}

inline json blob_header(const std::vector<Blob>& blobs) {
  json a = json::array();
  for (const auto& b : blobs) a.push_back({{"name", b.name}, {"rows", b.rows}, {"cols", b.cols}});
  return a;
}

inline std::vector<Blob> blobs_from_header(const json& a) {
  std::vector<Blob> out;
  for (const auto& e : a) {
    Blob b;
    e.at("name").get_to(b.name);
    e.at("rows").get_to(b.rows);
    e.at("cols").get_to(b.cols);
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace detail

inline std::string serialize(const Checkpoint& ck) {
  json h;
  h["stage"] = to_string(ck.stage);
  h["config"] = to_json(ck.config);
  h["folds"] = json::array();
  for (const auto& f : ck.folds) {
    h["folds"].push_back({{"train_ids", f.train_ids},
                          {"val_ids", f.val_ids},
                          {"test_ids", f.test_ids},
                          {"preprocessing", detail::prep_to_json(f.prep)},
                          {"params", detail::blob_header(f.params)},
                          {"extras", detail::blob_header(f.extras)},
                          {"history", f.history}});
  }
  const std::string header = h.dump();
  std::ostringstream out(std::ios::binary);
  out.write(kCheckpointMagic, 8);
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t len = header.size();
  out.write(reinterpret_cast<const char*>(&version), 4);
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& f : ck.folds)
    for (const auto* group : {&f.params, &f.extras})
      for (const auto& b : *group) {
        require(b.values.size() == b.rows * b.cols, "bad_checkpoint", "blob " + b.name + " has wrong size");
        out.write(reinterpret_cast<const char*>(b.values.data()), static_cast<std::streamsize>(b.values.size() * 8));
      }
  return out.str();
}

inline Checkpoint deserialize(const std::string& bytes) {
  require(bytes.size() >= 20 && std::memcmp(bytes.data(), kCheckpointMagic, 8) == 0, "bad_checkpoint",
          "not a checkpoint file (bad magic)");
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  std::memcpy(&version, bytes.data() + 8, 4);
  std::memcpy(&len, bytes.data() + 12, 8);
  require(version == kCheckpointVersion, "unsupported_version",
          "checkpoint version " + std::to_string(version) + " is not supported");
  require(20 + len <= bytes.size(), "bad_checkpoint", "truncated checkpoint header");
  Checkpoint ck;
  std::size_t pos = 20 + len;
  try {
    const json h = json::parse(bytes.substr(20, len));
    ck.stage = parse_stage(h.at("stage").get<std::string>());
    ck.config = config_from_json(h.at("config"));
    for (const auto& jf : h.at("folds")) {
      FoldModel f;
      jf.at("train_ids").get_to(f.train_ids);
      jf.at("val_ids").get_to(f.val_ids);
      jf.at("test_ids").get_to(f.test_ids);
      f.prep = detail::prep_from_json(jf.at("preprocessing"));
      f.params = detail::blobs_from_header(jf.at("params"));
      f.extras = detail::blobs_from_header(jf.at("extras"));
      f.history = jf.at("history");
      ck.folds.push_back(std::move(f));
    }
  } catch (const json::exception& e) {
    throw Error("bad_checkpoint", std::string("malformed checkpoint header: ") + e.what());
  }
  for (auto& f : ck.folds)
    for (auto* group : {&f.params, &f.extras})
      for (auto& b : *group) {
        const std::size_t n = b.rows * b.cols;
        require(pos + n * 8 <= bytes.size(), "bad_checkpoint", "truncated checkpoint data at blob " + b.name);
        b.values.resize(n);
        std::memcpy(b.values.data(), bytes.data() + pos, n * 8);
        pos += n * 8;
      }
  require(pos == bytes.size(), "bad_checkpoint", "trailing bytes after checkpoint data");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string bytes = serialize(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), "io_error", "cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "missing_file", "cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize(buf.str());
}

}  // namespace dmml
