#pragma once

// Cohort loading and preprocessing.
//
// On-disk layout: a directory holding `manifest.json`, one raw little-endian
// float32 file per array named `<case_id>.<field>.f32`, and an optional
// two-column geneset TSV.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dmml/cohort.hpp"
#include "dmml/error.hpp"
#include "dmml/rng.hpp"

namespace dmml {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kManifestVersion = 1;

struct CaseEntry {
  std::string case_id;
  std::string grid10;
  std::string grid20;
  std::string genes;
  std::string tumor_mask10;  // empty if absent
  std::size_t diagnosis = 0;
  std::size_t grade = 0;
  std::size_t surv_bin = 0;
  double surv_time = 0.0;
  bool censored = false;
};

struct CohortManifest {
  int version = kManifestVersion;
  fs::path root;
  CohortDims dims;
  std::vector<std::string> gene_ids;
  std::string geneset;  // relative path, empty if absent
  std::optional<SynthMetadata> synth;
  std::vector<CaseEntry> cases;
};

struct GenePartition {
  std::vector<std::size_t> tumor_idx;
  std::vector<std::size_t> tme_idx;
  std::size_t excluded = 0;  // genes in gene_ids absent from the geneset
};

// Records every file read, so tests can assert what a code path touched.
struct FileAudit {
  std::vector<std::string> reads;
  bool touched_suffix(const std::string& suffix) const {
    return std::any_of(reads.begin(), reads.end(), [&](const std::string& r) {
      return r.size() >= suffix.size() && r.compare(r.size() - suffix.size(), suffix.size(), suffix) == 0;
    });
  }
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "f32 arrays are stored little-endian");

inline std::vector<double> read_f32(const fs::path& path, std::size_t expected, FileAudit* audit) {
  std::error_code ec;
  const auto bytes = fs::file_size(path, ec);
  require(!ec, "missing_file", "missing array file: " + path.string());
  require(bytes == expected * 4, "dim_mismatch",
          "array " + path.filename().string() + " holds " + std::to_string(bytes / 4) + " floats, expected " +
              std::to_string(expected));
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "missing_file", "cannot open " + path.string());
  std::vector<float> buf(expected);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
  require(static_cast<bool>(in), "io_error", "short read on " + path.string());
  if (audit) audit->reads.push_back(path.filename().string());
  return {buf.begin(), buf.end()};
}

inline void write_f32(const fs::path& path, const std::vector<double>& values) {
  std::vector<float> buf(values.begin(), values.end());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), "io_error", "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
}

inline void check_file_size(const fs::path& path, std::size_t floats) {
  std::error_code ec;
  const auto bytes = fs::file_size(path, ec);
  require(!ec, "missing_file", "missing array file: " + path.string());
  require(bytes == floats * 4, "dim_mismatch",
          "array " + path.filename().string() + " holds " + std::to_string(bytes / 4) + " floats, manifest declares " +
              std::to_string(floats));
}

inline fs::path manifest_path(const fs::path& p) { return fs::is_directory(p) ? p / "manifest.json" : p; }

}  // namespace detail

// Validates array sizes up front; gene arrays only when with_genes is set.
inline CohortManifest load_manifest(const fs::path& path, bool with_genes = true) {
  const fs::path mpath = detail::manifest_path(path);
  std::ifstream in(mpath);
  require(static_cast<bool>(in), "missing_file", "cannot open manifest " + mpath.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error("bad_manifest", std::string("manifest is not valid JSON: ") + e.what());
  }
  CohortManifest m;
  m.root = mpath.parent_path();
  try {
    m.version = j.at("version").get<int>();
    require(m.version == kManifestVersion, "unsupported_version",
            "unsupported manifest version " + std::to_string(m.version));
    const auto& d = j.at("dims");
    m.dims = {d.at("h10").get<std::size_t>(), d.at("w10").get<std::size_t>(), d.at("h20").get<std::size_t>(),
              d.at("w20").get<std::size_t>(), d.at("c").get<std::size_t>(), d.at("n_genes").get<std::size_t>()};
    m.gene_ids = j.at("gene_ids").get<std::vector<std::string>>();
    if (j.contains("geneset")) m.geneset = j.at("geneset").get<std::string>();
    if (j.contains("synth")) {
      SynthMetadata s;
      s.tumor_gene_idx = j["synth"].at("tumor_gene_idx").get<std::vector<std::size_t>>();
      s.tme_gene_idx = j["synth"].at("tme_gene_idx").get<std::vector<std::size_t>>();
      m.synth = s;
    }
    for (const auto& c : j.at("cases")) {
      CaseEntry e;
      e.case_id = c.at("case_id").get<std::string>();
      e.grid10 = c.at("grid10").get<std::string>();
      e.grid20 = c.at("grid20").get<std::string>();
      e.genes = c.at("genes").get<std::string>();
      if (c.contains("tumor_mask10")) e.tumor_mask10 = c.at("tumor_mask10").get<std::string>();
      const auto& l = c.at("labels");
      e.diagnosis = l.at("diagnosis").get<std::size_t>();
      e.grade = l.at("grade").get<std::size_t>();
      e.surv_bin = l.at("surv_bin").get<std::size_t>();
      e.surv_time = l.at("surv_time").get<double>();
      e.censored = c.at("censored").get<bool>();
      m.cases.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw Error("bad_manifest", std::string("manifest schema error: ") + e.what());
  }

  require(m.gene_ids.size() == m.dims.n_genes, "dim_mismatch",
          "gene_ids has " + std::to_string(m.gene_ids.size()) + " entries, dims.n_genes is " +
              std::to_string(m.dims.n_genes));
  std::set<std::string> ids;
  for (const auto& c : m.cases) {
    require(ids.insert(c.case_id).second, "duplicate_case_id", "duplicate case_id: " + c.case_id);
    require(c.diagnosis < 4 && c.grade < 3 && c.surv_bin < 4, "label_out_of_range",
            "labels out of range for case " + c.case_id);
    detail::check_file_size(m.root / c.grid10, m.dims.h10 * m.dims.w10 * m.dims.c);
    detail::check_file_size(m.root / c.grid20, m.dims.h20 * m.dims.w20 * m.dims.c);
    if (with_genes) detail::check_file_size(m.root / c.genes, m.dims.n_genes);
    if (!c.tumor_mask10.empty()) detail::check_file_size(m.root / c.tumor_mask10, m.dims.h10 * m.dims.w10);
  }
  if (!m.geneset.empty())
    require(fs::exists(m.root / m.geneset), "missing_file", "missing geneset file: " + m.geneset);
  return m;
}

struct LoadOptions {
  bool genes = true;
  FileAudit* audit = nullptr;
};

inline std::vector<GeneSetEntry> read_geneset(const fs::path& path);

inline Cohort load_cohort(const CohortManifest& m, const LoadOptions& opt = {}) {
  Cohort cohort;
  cohort.dims = m.dims;
  cohort.gene_ids = m.gene_ids;
  cohort.synth = m.synth;
  if (!m.geneset.empty()) cohort.geneset = read_geneset(m.root / m.geneset);
  const auto& d = m.dims;
  for (const auto& e : m.cases) {
    Case c;
    c.case_id = e.case_id;
    c.grid10 = {d.h10, d.w10, d.c, detail::read_f32(m.root / e.grid10, d.h10 * d.w10 * d.c, opt.audit), {}};
    c.grid20 = {d.h20, d.w20, d.c, detail::read_f32(m.root / e.grid20, d.h20 * d.w20 * d.c, opt.audit), {}};
    if (opt.genes) c.genes = detail::read_f32(m.root / e.genes, d.n_genes, opt.audit);
    if (!e.tumor_mask10.empty()) {
      const auto mask = detail::read_f32(m.root / e.tumor_mask10, d.h10 * d.w10, opt.audit);
      c.tumor_mask10.resize(mask.size());
      for (std::size_t i = 0; i < mask.size(); ++i) c.tumor_mask10[i] = mask[i] != 0.0;
    }
    c.diagnosis = e.diagnosis;
    c.grade = e.grade;
    c.surv_bin = e.surv_bin;
    c.surv_time = e.surv_time;
    c.censored = e.censored;
    cohort.cases.push_back(std::move(c));
  }
  return cohort;
}

inline Cohort load_cohort(const fs::path& path, const LoadOptions& opt = {}) {
  return load_cohort(load_manifest(path, opt.genes), opt);
}

inline void write_geneset(const fs::path& path, const std::vector<GeneSetEntry>& entries) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), "io_error", "cannot write " + path.string());
  out << "# gene_id\tlabel\n";
  for (const auto& e : entries) out << e.gene_id << '\t' << e.label << '\n';
}

// Writes manifest.json, per-array f32 files and geneset.tsv into `dir`.
inline void write_cohort(const Cohort& cohort, const fs::path& dir) {
  fs::create_directories(dir);
  require(!cohort.genes_missing(), "missing_genes", "cannot write a cohort loaded without genes");
  json j;
  j["version"] = kManifestVersion;
  const auto& d = cohort.dims;
  j["dims"] = {{"h10", d.h10}, {"w10", d.w10}, {"h20", d.h20}, {"w20", d.w20}, {"c", d.c}, {"n_genes", d.n_genes}};
  j["gene_ids"] = cohort.gene_ids;
  if (!cohort.geneset.empty()) {
    j["geneset"] = "geneset.tsv";
    write_geneset(dir / "geneset.tsv", cohort.geneset);
  }
  if (cohort.synth) {
    j["synth"] = {{"tumor_gene_idx", cohort.synth->tumor_gene_idx}, {"tme_gene_idx", cohort.synth->tme_gene_idx}};
  }
  j["cases"] = json::array();
  for (const auto& c : cohort.cases) {
    json e;
    e["case_id"] = c.case_id;
    e["grid10"] = c.case_id + ".grid10.f32";
    e["grid20"] = c.case_id + ".grid20.f32";
    e["genes"] = c.case_id + ".genes.f32";
    e["labels"] = {{"diagnosis", c.diagnosis}, {"grade", c.grade}, {"surv_bin", c.surv_bin}, {"surv_time", c.surv_time}};
    e["censored"] = c.censored;
    detail::write_f32(dir / (c.case_id + ".grid10.f32"), c.grid10.data);
    detail::write_f32(dir / (c.case_id + ".grid20.f32"), c.grid20.data);
    detail::write_f32(dir / (c.case_id + ".genes.f32"), c.genes);
    if (!c.tumor_mask10.empty()) {
      e["tumor_mask10"] = c.case_id + ".tumor_mask10.f32";
      std::vector<double> mask(c.tumor_mask10.begin(), c.tumor_mask10.end());
      detail::write_f32(dir / (c.case_id + ".tumor_mask10.f32"), mask);
    }
    j["cases"].push_back(std::move(e));
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  require(static_cast<bool>(out), "io_error", "cannot write manifest in " + dir.string());
  out << j.dump(2) << '\n';
}

// Indices of the ceil(fraction * n_genes) genes with the highest unbiased
// sample variance; descending variance, ties by ascending index.
inline std::vector<std::size_t> select_hvgs(const std::vector<double>& expr, std::size_t n_cases,
                                            std::size_t n_genes, double fraction) {
  require(fraction > 0.0 && fraction <= 1.0, "bad_fraction", "select_hvgs: fraction must be in (0,1]");
  require(n_cases >= 2, "too_few_cases", "select_hvgs: needs at least 2 cases");
  require(expr.size() == n_cases * n_genes, "shape_mismatch", "select_hvgs: matrix shape mismatch");
  std::vector<double> var(n_genes, 0.0);
  for (std::size_t g = 0; g < n_genes; ++g) {
    double mu = 0.0;
    for (std::size_t i = 0; i < n_cases; ++i) mu += expr[i * n_genes + g];
    mu /= static_cast<double>(n_cases);
    double s = 0.0;
    for (std::size_t i = 0; i < n_cases; ++i) s += (expr[i * n_genes + g] - mu) * (expr[i * n_genes + g] - mu);
    var[g] = s / static_cast<double>(n_cases - 1);
  }
  std::vector<std::size_t> idx(n_genes);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return var[a] > var[b]; });
  const auto keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n_genes) - 1e-9));
  idx.resize(std::max<std::size_t>(keep, 1));
  return idx;
}

inline std::vector<GeneSetEntry> parse_geneset(std::istream& in) {
  std::vector<GeneSetEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    require(tab != std::string::npos && line.find('\t', tab + 1) == std::string::npos && tab > 0,
            "malformed_geneset", "geneset line " + std::to_string(lineno) + ": expected `gene_id<TAB>label`");
    GeneSetEntry e{line.substr(0, tab), line.substr(tab + 1)};
    require(e.label == "TUMOR" || e.label == "TME", "unknown_label",
            "geneset line " + std::to_string(lineno) + ": unknown label '" + e.label + "'");
    out.push_back(std::move(e));
  }
  return out;
}

inline std::vector<GeneSetEntry> read_geneset(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "missing_file", "cannot open geneset " + path.string());
  return parse_geneset(in);
}

inline GenePartition partition_genes(const std::vector<std::string>& gene_ids,
                                     const std::vector<GeneSetEntry>& geneset) {
  std::map<std::string, std::string> label;
  for (const auto& e : geneset) {
    auto [it, fresh] = label.emplace(e.gene_id, e.label);
    require(fresh || it->second == e.label, "conflicting_label",
            "gene " + e.gene_id + " listed as both " + it->second + " and " + e.label);
  }
  GenePartition p;
  for (std::size_t i = 0; i < gene_ids.size(); ++i) {
    auto it = label.find(gene_ids[i]);
    if (it == label.end()) ++p.excluded;
    else (it->second == "TUMOR" ? p.tumor_idx : p.tme_idx).push_back(i);
  }
  return p;
}

inline GenePartition partition_genes(const std::vector<std::string>& gene_ids, const fs::path& geneset_file) {
  return partition_genes(gene_ids, read_geneset(geneset_file));
}

// Draws n patches. With at least n patches available the draw is without
// replacement; otherwise every patch is repeated floor(n/N) times and the
// remaining n mod N slots are filled by distinct random patches. The result is
// laid out on the smallest near-square grid holding n tokens; trailing slots
// are zero and flagged invalid.
inline SlideGrid sample_patches(const SlideGrid& grid, std::size_t n, std::uint64_t seed) {
  require(n > 0, "bad_sample_count", "sample_patches: n must be positive");
  require(grid.patches() > 0, "empty_input", "sample_patches: empty grid");
  const std::size_t total = grid.patches();
  Rng rng(seed);
  std::vector<std::size_t> pool(total);
  std::iota(pool.begin(), pool.end(), 0);
  std::vector<std::size_t> picks;
  if (total >= n) {
    for (std::size_t i = 0; i < n; ++i) std::swap(pool[i], pool[i + rng.below(total - i)]);
    picks.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n));
  } else {
    for (std::size_t r = 0; r < n / total; ++r) picks.insert(picks.end(), pool.begin(), pool.end());
    const std::size_t extra = n % total;
    for (std::size_t i = 0; i < extra; ++i) std::swap(pool[i], pool[i + rng.below(total - i)]);
    picks.insert(picks.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(extra));
    rng.shuffle(picks);
  }
  const auto side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
  const std::size_t h = (n + side - 1) / side;
  SlideGrid out{h, side, grid.c, std::vector<double>(h * side * grid.c, 0.0), std::vector<bool>(h * side, false)};
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(grid.data.begin() + static_cast<std::ptrdiff_t>(picks[i] * grid.c), grid.c,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * grid.c));
    out.valid[i] = true;
  }
  return out;
}

// Per-gene z-score moments fitted on a set of cases.
struct ZScore {
  std::vector<double> mean;
  std::vector<double> stdev;

  static ZScore fit(const std::vector<std::vector<double>>& rows) {
    require(!rows.empty(), "empty_input", "ZScore::fit: no rows");
    const std::size_t g = rows[0].size();
    ZScore z{std::vector<double>(g, 0.0), std::vector<double>(g, 0.0)};
    for (const auto& r : rows)
      for (std::size_t k = 0; k < g; ++k) z.mean[k] += r[k];
    for (auto& m : z.mean) m /= static_cast<double>(rows.size());
    for (const auto& r : rows)
      for (std::size_t k = 0; k < g; ++k) z.stdev[k] += (r[k] - z.mean[k]) * (r[k] - z.mean[k]);
    for (auto& s : z.stdev) {
      s = std::sqrt(s / static_cast<double>(std::max<std::size_t>(rows.size() - 1, 1)));
      if (s < 1e-8) s = 1.0;
    }
    return z;
  }

  std::vector<double> apply(const std::vector<double>& x) const {
    std::vector<double> y(x.size());
    for (std::size_t k = 0; k < x.size(); ++k) y[k] = (x[k] - mean[k]) / stdev[k];
    return y;
  }
};

}  // namespace dmml
