#include <gtest/gtest.h>

#include <cmath>

#include "common/test_util.hpp"
#include "dmml/gradcheck_suite.hpp"
#include "dmml/report.hpp"

namespace {

using namespace dmml;
using dmml::testing::error_code_of;

json sample_eval() {
  return json::parse(R"({
    "task": "diagnosis", "setting": "unimodal", "stage": "student_warmup",
    "folds": [{"fold": 0}, {"fold": 1}, {"fold": 2}],
    "summary": {"accuracy": {"mean": 0.75, "std": 0.05}, "auc": {"mean": null, "std": null}}
  })");
}

TEST(Report, RowsFromEval) {
  const auto rows = rows_from_eval(sample_eval());
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].metric, "accuracy");
  EXPECT_EQ(rows[0].mean, 0.75);
  EXPECT_EQ(rows[0].folds, 3u);
  EXPECT_TRUE(std::isnan(rows[1].mean));
  EXPECT_EQ(error_code_of([] { rows_from_eval(json::object()); }), "bad_report");
}

TEST(Report, CsvAndNumbers) {
  EXPECT_EQ(format_number(0.5), "0.5");
  EXPECT_EQ(format_number(1.0 / 3.0), "0.333333");
  EXPECT_EQ(format_number(std::nan("")), "nan");
  EXPECT_EQ(report_csv(rows_from_eval(sample_eval())),
            "task,setting,stage,metric,mean,std,folds\n"
            "diagnosis,unimodal,student_warmup,accuracy,0.75,0.05,3\n"
            "diagnosis,unimodal,student_warmup,auc,nan,nan,3\n");
  const auto j = report_json(rows_from_eval(sample_eval()));
  ASSERT_EQ(j.size(), 2u);
  EXPECT_EQ(j[0]["metric"], "accuracy");
}

TEST(Report, SvgIsWellFormedAndEscaped) {
  auto rows = rows_from_eval(sample_eval());
  const auto bar = svg_bar_chart(rows, "a < b & c");
  EXPECT_EQ(bar.rfind("<svg", 0), 0u);
  EXPECT_NE(bar.find("a &lt; b &amp; c"), std::string::npos);
  EXPECT_NE(bar.find("</svg>"), std::string::npos);
  EXPECT_EQ(bar.find("nan"), std::string::npos);

  const auto log = json::parse(R"({"stage": "teacher", "folds": [
    {"history": [{"val_metric": 0.5}, {"val_metric": 0.7}]},
    {"history": [{"val_metric": 0.6}, {"val_metric": null}]}]})");
  const auto series = history_series(log, "val_metric");
  ASSERT_EQ(series.size(), 2u);
  EXPECT_EQ(series[0].values, (std::vector<double>{0.5, 0.7}));
  EXPECT_TRUE(std::isnan(series[1].values[1]));
  const auto line = svg_line_chart(series, "curves", "epoch", "metric");
  EXPECT_EQ(line.rfind("<svg", 0), 0u);
  EXPECT_EQ(std::count(line.begin(), line.end(), '\n') > 5, true);
  EXPECT_NE(line.find("fold 1"), std::string::npos);
}

TEST(Gradcheck, EveryModuleMatchesFiniteDifferences) {
  for (const auto& m : gradcheck_modules()) {
    const auto r = run_gradcheck(m);
    EXPECT_GT(r.result.checked, 0u) << m;
    EXPECT_LT(r.result.max_rel_error, 1e-4) << m;
  }
  EXPECT_EQ(error_code_of([] { run_gradcheck("nope"); }), "unknown_module");
  EXPECT_EQ(error_code_of([] { run_gradcheck("ce", 0.0); }), "bad_config");
}

}  // namespace
