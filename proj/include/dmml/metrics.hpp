#pragma once

// Evaluation metrics: macro one-vs-rest classification metrics, concordance
// index, per-gene Pearson correlation and mask overlap.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "dmml/error.hpp"

namespace dmml {

struct ClassificationMetrics {
  double accuracy = 0.0;
  double auc = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
  double f1 = 0.0;
  // Per-class values; NaN for classes absent from the labels.
  std::vector<double> auc_per_class;
  std::vector<double> sensitivity_per_class;
  std::vector<double> specificity_per_class;
  std::vector<double> f1_per_class;
};

// Mann-Whitney AUC of `scores` separating positives from negatives; ties
// contribute 1/2. NaN if either side is empty.
inline double rank_auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = avg;
    i = j + 1;
  }
  double npos = 0, rank_sum = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (positive[i]) {
      npos += 1;
      rank_sum += rank[i];
    }
  const double nneg = static_cast<double>(n) - npos;
  if (npos == 0 || nneg == 0) return std::nan("");
  return (rank_sum - npos * (npos + 1) / 2.0) / (npos * nneg);
}

// probs is row-major [batch, classes].
inline ClassificationMetrics classification_metrics(const std::vector<double>& probs, std::size_t classes,
                                                    const std::vector<std::size_t>& labels) {
  const std::size_t b = labels.size();
  require(b > 0, "empty_input", "classification_metrics: empty batch");
  require(probs.size() == b * classes, "shape_mismatch", "classification_metrics: probs shape mismatch");
  std::vector<std::size_t> pred(b);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < b; ++i) {
    require(labels[i] < classes, "label_out_of_range", "classification_metrics: label out of range");
    double row_sum = 0.0;
    std::size_t best = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      const double p = probs[i * classes + c];
      row_sum += p;
      if (p > probs[i * classes + best]) best = c;
    }
    require(std::abs(row_sum - 1.0) <= 1e-4, "bad_probabilities", "classification_metrics: row does not sum to 1");
    pred[i] = best;
    correct += best == labels[i];
  }
  ClassificationMetrics m;
  m.accuracy = static_cast<double>(correct) / static_cast<double>(b);
  const double nan = std::nan("");
  double sum_auc = 0, sum_sens = 0, sum_spec = 0, sum_f1 = 0;
  std::size_t n_auc = 0, n_cls = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
    std::vector<double> scores(b);
    std::vector<bool> pos(b);
    for (std::size_t i = 0; i < b; ++i) {
      scores[i] = probs[i * classes + c];
      pos[i] = labels[i] == c;
      const bool p = pred[i] == c;
      if (pos[i] && p) ++tp;
      else if (pos[i]) ++fn;
      else if (p) ++fp;
      else ++tn;
    }
    if (tp + fn == 0) {
      m.auc_per_class.push_back(nan);
      m.sensitivity_per_class.push_back(nan);
      m.specificity_per_class.push_back(nan);
      m.f1_per_class.push_back(nan);
      continue;
    }
    const double sens = static_cast<double>(tp) / static_cast<double>(tp + fn);
    const double spec = tn + fp == 0 ? 1.0 : static_cast<double>(tn) / static_cast<double>(tn + fp);
    const double f1 = 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
    const double auc = rank_auc(scores, pos);
    m.auc_per_class.push_back(auc);
    m.sensitivity_per_class.push_back(sens);
    m.specificity_per_class.push_back(spec);
    m.f1_per_class.push_back(f1);
    sum_sens += sens;
    sum_spec += spec;
    sum_f1 += f1;
    ++n_cls;
    if (!std::isnan(auc)) {
      sum_auc += auc;
      ++n_auc;
    }
  }
  m.sensitivity = sum_sens / static_cast<double>(n_cls);
  m.specificity = sum_spec / static_cast<double>(n_cls);
  m.f1 = sum_f1 / static_cast<double>(n_cls);
  m.auc = n_auc ? sum_auc / static_cast<double>(n_auc) : nan;
  return m;
}

// Harrell's C over pairs (i, j) with time_i < time_j and event_i: the fraction
// with risk_i > risk_j, risk ties counting 1/2. O(n log n) via a Fenwick tree
// over risk ranks, sweeping from the latest time backwards.
inline double concordance_index(const std::vector<double>& risks, const std::vector<double>& times,
                                const std::vector<bool>& events) {
  const std::size_t n = risks.size();
  require(times.size() == n && events.size() == n, "shape_mismatch", "concordance_index: length mismatch");

  std::vector<double> sorted_risks(risks);
  std::sort(sorted_risks.begin(), sorted_risks.end());
  sorted_risks.erase(std::unique(sorted_risks.begin(), sorted_risks.end()), sorted_risks.end());
  const std::size_t m = sorted_risks.size();
  auto rank_of = [&](double r) {
    return static_cast<std::size_t>(std::lower_bound(sorted_risks.begin(), sorted_risks.end(), r) -
                                    sorted_risks.begin());
  };
  std::vector<std::int64_t> tree(m + 1, 0);
  auto add = [&](std::size_t pos) {
    for (std::size_t i = pos + 1; i <= m; i += i & (~i + 1)) ++tree[i];
  };
  auto prefix = [&](std::size_t count) {  // number of inserted ranks < count
    std::int64_t s = 0;
    for (std::size_t i = count; i > 0; i -= i & (~i + 1)) s += tree[i];
    return s;
  };

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return times[a] > times[b]; });

  std::int64_t twice_concordant = 0, comparable = 0, inserted = 0;
  for (std::size_t g = 0; g < n;) {
    std::size_t e = g;
    while (e < n && times[order[e]] == times[order[g]]) ++e;
    // Everything inserted so far has a strictly later time.
    for (std::size_t k = g; k < e; ++k) {
      const std::size_t i = order[k];
      if (!events[i]) continue;
      const std::size_t r = rank_of(risks[i]);
      const std::int64_t lower = prefix(r);
      const std::int64_t equal = prefix(r + 1) - lower;
      twice_concordant += 2 * lower + equal;
      comparable += inserted;
    }
    for (std::size_t k = g; k < e; ++k) {
      add(rank_of(risks[order[k]]));
      ++inserted;
    }
    g = e;
  }
  require(comparable > 0, "no_comparable_pairs", "concordance_index: no comparable pairs");
  return static_cast<double>(twice_concordant) / (2.0 * static_cast<double>(comparable));
}

// Pearson correlation of `scores` with each gene column of the row-major
// [cases, genes] matrix; zero-variance columns (or scores) give 0.
inline std::vector<double> gene_pcc(const std::vector<double>& scores, const std::vector<double>& expression,
                                    std::size_t genes) {
  const std::size_t n = scores.size();
  require(n >= 3, "too_few_cases", "gene_pcc: needs at least 3 cases");
  require(expression.size() == n * genes, "shape_mismatch", "gene_pcc: expression shape mismatch");
  const double ms = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double s : scores) ss += (s - ms) * (s - ms);
  std::vector<double> out(genes, 0.0);
  for (std::size_t g = 0; g < genes; ++g) {
    double mg = 0.0;
    for (std::size_t i = 0; i < n; ++i) mg += expression[i * genes + g];
    mg /= static_cast<double>(n);
    double sg = 0.0, cov = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = expression[i * genes + g] - mg;
      sg += d * d;
      cov += d * (scores[i] - ms);
    }
    if (sg > 0.0 && ss > 0.0) out[g] = cov / std::sqrt(sg * ss);
  }
  return out;
}

struct Overlap {
  double dice = 0.0;
  double recall = 0.0;
};

// Dice and recall of `assigned` against `truth`; 0 when a denominator is 0.
inline Overlap cluster_overlap(const std::vector<bool>& assigned, const std::vector<bool>& truth) {
  require(assigned.size() == truth.size(), "shape_mismatch", "cluster_overlap: mask shapes differ");
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    a += assigned[i];
    b += truth[i];
    both += assigned[i] && truth[i];
  }
  Overlap o;
  if (a + b > 0) o.dice = 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
  if (b > 0) o.recall = static_cast<double>(both) / static_cast<double>(b);
  return o;
}

}  // namespace dmml
