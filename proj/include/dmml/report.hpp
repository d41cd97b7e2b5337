#pragma once

// Aggregates evaluation reports into tables and renders SVG plots.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dmml/error.hpp"

namespace dmml {

using json = nlohmann::json;

struct ReportRow {
  std::string task;
  std::string setting;
  std::string stage;
  std::string metric;
  double mean = 0.0;
  double std = 0.0;
  std::size_t folds = 0;
};

// JSON has no NaN; undefined metrics are written as null.
inline double number_or_nan(const json& v) { return v.is_number() ? v.get<double>() : std::nan(""); }

// One row per summary metric of an evaluation report.
inline std::vector<ReportRow> rows_from_eval(const json& eval) {
  require(eval.is_object() && eval.contains("summary") && eval.contains("setting"), "bad_report",
          "input is not an evaluation report");
  std::vector<ReportRow> out;
  for (const auto& [metric, v] : eval.at("summary").items())
    out.push_back({eval.at("task").get<std::string>(), eval.at("setting").get<std::string>(),
                   eval.at("stage").get<std::string>(), metric, number_or_nan(v.at("mean")), number_or_nan(v.at("std")),
                   eval.at("folds").size()});
  return out;
}

inline std::string format_number(double v) {
  if (!std::isfinite(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline std::string report_csv(const std::vector<ReportRow>& rows) {
  std::string out = "task,setting,stage,metric,mean,std,folds\n";
  for (const auto& r : rows)
    out += r.task + "," + r.setting + "," + r.stage + "," + r.metric + "," + format_number(r.mean) + "," +
           format_number(r.std) + "," + std::to_string(r.folds) + "\n";
  return out;
}

inline json report_json(const std::vector<ReportRow>& rows) {
  json a = json::array();
  for (const auto& r : rows)
    a.push_back({{"task", r.task}, {"setting", r.setting}, {"stage", r.stage}, {"metric", r.metric},
                 {"mean", r.mean}, {"std", r.std}, {"folds", r.folds}});
  return a;
}

namespace detail {

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#b07aa1", "#9c755f"};
  return colors[i % 7];
}

inline std::string svg_text(double x, double y, const std::string& s, const char* anchor = "middle", int size = 12) {
  return "<text x=\"" + format_number(x) + "\" y=\"" + format_number(y) + "\" font-size=\"" + std::to_string(size) +
         "\" font-family=\"sans-serif\" text-anchor=\"" + anchor + "\">" + xml_escape(s) + "</text>\n";
}

inline std::string svg_line(double x1, double y1, double x2, double y2, const char* stroke = "#333",
                            double width = 1.0) {
  return "<line x1=\"" + format_number(x1) + "\" y1=\"" + format_number(y1) + "\" x2=\"" + format_number(x2) +
         "\" y2=\"" + format_number(y2) + "\" stroke=\"" + stroke + "\" stroke-width=\"" + format_number(width) +
         "\"/>\n";
}

}  // namespace detail

// Grouped bars: one group per metric, one bar per setting, whiskers = std.
inline std::string svg_bar_chart(const std::vector<ReportRow>& rows, const std::string& title) {
  std::vector<std::string> metrics, settings;
  for (const auto& r : rows) {
    if (std::find(metrics.begin(), metrics.end(), r.metric) == metrics.end()) metrics.push_back(r.metric);
    const std::string s = r.setting + " (" + r.stage + ")";
    if (std::find(settings.begin(), settings.end(), s) == settings.end()) settings.push_back(s);
  }
  double top = 1.0;
  for (const auto& r : rows)
    if (std::isfinite(r.mean)) top = std::max(top, r.mean + (std::isfinite(r.std) ? r.std : 0.0));
  const double W = 120.0 + 110.0 * static_cast<double>(std::max<std::size_t>(metrics.size(), 1));
  const double H = 320.0, left = 60.0, bottom = 250.0, plot_h = 200.0;
  const double group_w = 110.0, bar_w = 80.0 / static_cast<double>(std::max<std::size_t>(settings.size(), 1));
  auto y_of = [&](double v) { return bottom - plot_h * std::clamp(v / top, 0.0, 1.0); };

  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + format_number(W + 200) + "\" height=\"" +
                  format_number(H) + "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += detail::svg_text((W + 200) / 2, 20, title, "middle", 14);
  s += detail::svg_line(left, bottom, left + group_w * static_cast<double>(metrics.size()), bottom);
  s += detail::svg_line(left, bottom, left, bottom - plot_h);
  for (int t = 0; t <= 4; ++t) {
    const double v = top * t / 4.0;
    s += detail::svg_line(left - 4, y_of(v), left, y_of(v));
    s += detail::svg_text(left - 6, y_of(v) + 4, format_number(v), "end", 10);
  }
  for (std::size_t m = 0; m < metrics.size(); ++m) {
    const double gx = left + 15.0 + group_w * static_cast<double>(m);
    s += detail::svg_text(gx + 40.0, bottom + 16, metrics[m], "middle", 11);
    for (const auto& r : rows) {
      if (r.metric != metrics[m] || !std::isfinite(r.mean)) continue;
      const auto k = static_cast<std::size_t>(
          std::find(settings.begin(), settings.end(), r.setting + " (" + r.stage + ")") - settings.begin());
      const double x = gx + bar_w * static_cast<double>(k);
      s += "<rect x=\"" + format_number(x) + "\" y=\"" + format_number(y_of(r.mean)) + "\" width=\"" +
           format_number(bar_w - 2) + "\" height=\"" + format_number(bottom - y_of(r.mean)) + "\" fill=\"" +
           detail::palette(k) + "\"/>\n";
      if (std::isfinite(r.std) && r.std > 0) {
        const double cx = x + (bar_w - 2) / 2;
        s += detail::svg_line(cx, y_of(r.mean - r.std), cx, y_of(r.mean + r.std));
        s += detail::svg_line(cx - 3, y_of(r.mean + r.std), cx + 3, y_of(r.mean + r.std));
      }
    }
  }
  for (std::size_t k = 0; k < settings.size(); ++k) {
    const double y = 50.0 + 18.0 * static_cast<double>(k);
    s += "<rect x=\"" + format_number(W) + "\" y=\"" + format_number(y - 10) + "\" width=\"12\" height=\"12\" fill=\"" +
         detail::palette(k) + "\"/>\n";
    s += detail::svg_text(W + 18, y, settings[k], "start", 11);
  }
  return s + "</svg>\n";
}

struct Series {
  std::string name;
  std::vector<double> values;
};

// Polylines over a shared integer x axis.
inline std::string svg_line_chart(const std::vector<Series>& series, const std::string& title,
                                  const std::string& xlabel, const std::string& ylabel) {
  double lo = INFINITY, hi = -INFINITY;
  std::size_t n = 1;
  for (const auto& sr : series) {
    n = std::max(n, sr.values.size());
    for (double v : sr.values)
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
  }
  if (!std::isfinite(lo)) lo = 0.0, hi = 1.0;
  if (hi - lo < 1e-12) hi = lo + 1.0;
  const double W = 560, H = 340, left = 70, right = 400, top = 40, bottom = 280;
  auto x_of = [&](std::size_t i) {
    return n > 1 ? left + (right - left) * static_cast<double>(i) / static_cast<double>(n - 1) : (left + right) / 2;
  };
  auto y_of = [&](double v) { return bottom - (bottom - top) * (v - lo) / (hi - lo); };

  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + format_number(W) + "\" height=\"" +
                  format_number(H) + "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += detail::svg_text(W / 2, 20, title, "middle", 14);
  s += detail::svg_line(left, bottom, right, bottom);
  s += detail::svg_line(left, bottom, left, top);
  s += detail::svg_text((left + right) / 2, bottom + 32, xlabel, "middle", 11);
  s += "<text x=\"16\" y=\"" + format_number((top + bottom) / 2) +
       "\" font-size=\"11\" font-family=\"sans-serif\" text-anchor=\"middle\" transform=\"rotate(-90 16 " +
       format_number((top + bottom) / 2) + ")\">" + detail::xml_escape(ylabel) + "</text>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * t / 4.0;
    s += detail::svg_text(left - 6, y_of(v) + 4, format_number(v), "end", 10);
  }
  s += detail::svg_text(left, bottom + 16, "0", "middle", 10);
  s += detail::svg_text(right, bottom + 16, std::to_string(n - 1), "middle", 10);
  for (std::size_t k = 0; k < series.size(); ++k) {
    std::string pts;
    for (std::size_t i = 0; i < series[k].values.size(); ++i)
      if (std::isfinite(series[k].values[i]))
        pts += format_number(x_of(i)) + "," + format_number(y_of(series[k].values[i])) + " ";
    s += "<polyline fill=\"none\" stroke=\"" + std::string(detail::palette(k)) + "\" stroke-width=\"1.5\" points=\"" +
         pts + "\"/>\n";
    const double y = top + 18.0 * static_cast<double>(k);
    s += detail::svg_line(right + 15, y - 4, right + 35, y - 4, detail::palette(k), 2.0);
    s += detail::svg_text(right + 40, y, series[k].name, "start", 11);
  }
  return s + "</svg>\n";
}

// Per-fold validation curves from a training log ({"folds": [{"history": [...]}, ...]}).
inline std::vector<Series> history_series(const json& log, const std::string& key) {
  std::vector<Series> out;
  require(log.contains("folds"), "bad_report", "training log lacks folds");
  for (std::size_t f = 0; f < log.at("folds").size(); ++f) {
    Series sr{"fold " + std::to_string(f), {}};
    for (const auto& h : log.at("folds")[f].at("history")) sr.values.push_back(number_or_nan(h.at(key)));
    out.push_back(std::move(sr));
  }
  return out;
}

}  // namespace dmml
