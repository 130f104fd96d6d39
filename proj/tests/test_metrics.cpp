#include "nucleisam/metrics.hpp"

#include <gtest/gtest.h>

#include "oracles.hpp"

#include <random>
#include <set>

using namespace nucleisam;
using namespace nucleisam::oracles;

namespace {

TEST(Metrics, MatchSetEnumerationOracle) {
  std::mt19937_64 rng(11);
  for (int c = 0; c < 100; ++c) {
    auto m = random_pair(rng, 16, 16);
    const auto [d, j] = set_oracle(m);
    EXPECT_EQ(dice(m), d);
    EXPECT_EQ(iou(m), j);
    EXPECT_NEAR(dice(m), 2 * iou(m) / (1 + iou(m)), 1e-12);
  }
}

TEST(Metrics, Symmetric) {
  std::mt19937_64 rng(12);
  for (int c = 0; c < 50; ++c) {
    auto m = random_pair(rng, 8, 8);
    BinaryMaskPair swapped{8, 8, m.truth, m.prediction};
    EXPECT_EQ(dice(m), dice(swapped));
    EXPECT_EQ(iou(m), iou(swapped));
  }
}

TEST(Metrics, WorkedExample) {
  BinaryMaskPair m{1, 4, {1, 1, 0, 0}, {1, 0, 1, 0}};
  EXPECT_DOUBLE_EQ(dice(m), 0.5);
  EXPECT_DOUBLE_EQ(iou(m), 1.0 / 3.0);
}

TEST(Metrics, EdgeCases) {
  BinaryMaskPair empty{2, 2, {0, 0, 0, 0}, {0, 0, 0, 0}};
  EXPECT_EQ(dice(empty), 1.0);
  EXPECT_EQ(iou(empty), 1.0);
  BinaryMaskPair miss{2, 2, {0, 0, 0, 0}, {1, 0, 0, 0}};
  EXPECT_EQ(dice(miss), 0.0);
  EXPECT_EQ(iou(miss), 0.0);
  BinaryMaskPair same{2, 2, {1, 0, 1, 0}, {1, 0, 1, 0}};
  EXPECT_EQ(dice(same), 1.0);
  EXPECT_EQ(iou(same), 1.0);
  EXPECT_THROW(dice(BinaryMaskPair{2, 2, {0, 0, 0}, {0, 0, 0, 0}}), std::invalid_argument);
  EXPECT_THROW(dice(BinaryMaskPair{1, 2, {2, 0}, {0, 0}}), std::invalid_argument);
}

TEST(Aggregate, MeansAndFolds) {
  std::vector<MetricRow> rows{{"a", 1.0, 1.0, "f1"}, {"b", 0.5, 0.25, "f1"}, {"c", 0.0, 0.0, "f2"}};
  auto r = aggregate(rows, true);
  EXPECT_DOUBLE_EQ(r.mean_dice, 0.5);
  EXPECT_DOUBLE_EQ(r.mean_iou, 1.25 / 3);
  EXPECT_DOUBLE_EQ(r.fold_means.at("f1").first, 0.75);
  EXPECT_DOUBLE_EQ(r.fold_means.at("f2").first, 0.0);
  ASSERT_TRUE(r.overall.has_value());
  EXPECT_DOUBLE_EQ(r.overall->first, 0.375);
  EXPECT_DOUBLE_EQ(r.overall->second, (0.625 + 0.0) / 2);
  EXPECT_FALSE(aggregate(rows).overall.has_value());
  EXPECT_THROW(aggregate({}), std::invalid_argument);
}

TEST(Aggregate, CsvHasOneRowPerImage) {
  auto r = aggregate({{"x", 0.5, 1.0 / 3.0, ""}, {"y", 1.0, 1.0, ""}});
  EXPECT_EQ(report_csv(r), "sample_id,dice,iou\nx,0.5,0.3333333333\ny,1,1\n");
}

TEST(ResultTable, MarkdownAndCsvRoundTrip) {
  ResultTable t;
  t.title = "Transfer";
  t.row_header = "Source";
  t.row_labels = {"a", "b"};
  t.column_labels = {"x", "y"};
  t.cells[{"a", "x"}] = {0.8123, 0.7};
  t.cells[{"b", "y"}] = {0.5, 0.25};
  const auto md = t.markdown();
  EXPECT_NE(md.find("| Source | x Dice (%) | x IoU (%) | y Dice (%) | y IoU (%) |"), std::string::npos);
  EXPECT_NE(md.find("| a | 81.23 | 70.00 | -- | -- |"), std::string::npos) << md;
  auto back = ResultTable::from_csv(t.csv(), "Transfer");
  EXPECT_EQ(back.cells, t.cells);
  EXPECT_EQ(back.csv(), t.csv());
  EXPECT_THROW(ResultTable::from_csv("bad\n"), std::invalid_argument);
}

TEST(ResultTable, LabelsWithCommasAndQuotesRoundTrip) {
  ResultTable t;
  t.row_labels = {"Dual-Level (10,12)", "say \"hi\""};
  t.column_labels = {"TNBC"};
  t.cells[{"Dual-Level (10,12)", "TNBC"}] = {0.5, 0.25};
  t.cells[{"say \"hi\"", "TNBC"}] = {0.75, 0.5};
  const auto csv = t.csv();
  EXPECT_NE(csv.find("\"Dual-Level (10,12)\",TNBC,0.5,0.25"), std::string::npos) << csv;
  EXPECT_NE(csv.find("\"say \"\"hi\"\"\",TNBC"), std::string::npos) << csv;
  const auto back = ResultTable::from_csv(csv);
  EXPECT_EQ(back.row_labels, t.row_labels);
  EXPECT_EQ(back.cells, t.cells);
  EXPECT_THROW(ResultTable::from_csv("row,column,dice,iou\n\"open,x,1,1\n"), std::invalid_argument);
}

TEST(Csv, SplitLine) {
  EXPECT_EQ(split_csv_line("a,,\"b,c\""), (std::vector<std::string>{"a", "", "b,c"}));
  EXPECT_EQ(csv_field("plain"), "plain");
}

}  // namespace
