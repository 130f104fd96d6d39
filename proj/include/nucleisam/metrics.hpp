#pragma once

// Dice / IoU on binary masks plus per-image and per-fold aggregation.
// Both-empty pairs score 1.0 for both metrics.

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

namespace nucleisam {

struct BinaryMaskPair {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> prediction;  // values in {0, 1}
  std::vector<std::uint8_t> truth;
};

struct OverlapCounts {
  std::size_t intersection = 0, predicted = 0, actual = 0;
  std::size_t union_size() const { return predicted + actual - intersection; }
};

inline OverlapCounts overlap(const BinaryMaskPair& pair) {
  if (pair.prediction.size() != pair.truth.size() || pair.prediction.size() != pair.height * pair.width) {
    throw std::invalid_argument("mask pair shape mismatch: prediction " + std::to_string(pair.prediction.size()) +
                                " truth " + std::to_string(pair.truth.size()) + " pixels");
  }
  OverlapCounts c;
  for (std::size_t i = 0; i < pair.prediction.size(); ++i) {
    const auto p = pair.prediction[i], t = pair.truth[i];
    if (p > 1 || t > 1) throw std::invalid_argument("mask pair values must be 0 or 1");
    c.predicted += p;
    c.actual += t;
    c.intersection += p & t;
  }
  return c;
}

inline double dice(const BinaryMaskPair& pair) {
  const auto c = overlap(pair);
  if (c.predicted + c.actual == 0) return 1.0;
  return 2.0 * static_cast<double>(c.intersection) / static_cast<double>(c.predicted + c.actual);
}

inline double iou(const BinaryMaskPair& pair) {
  const auto c = overlap(pair);
  if (c.union_size() == 0) return 1.0;
  return static_cast<double>(c.intersection) / static_cast<double>(c.union_size());
}

struct MetricRow {
  std::string sample_id;
  double dice = 0;
  double iou = 0;
  std::string fold;  // optional grouping tag
  bool operator==(const MetricRow&) const = default;
};

struct MetricsReport {
  std::vector<MetricRow> rows;
  double mean_dice = 0;
  double mean_iou = 0;
  std::map<std::string, std::pair<double, double>> fold_means;  // fold -> (dice, iou)
  std::optional<std::pair<double, double>> overall;             // mean of fold means
  bool operator==(const MetricsReport&) const = default;
};

/// Arithmetic means over rows. When `by_fold` is set, rows are grouped by
/// their fold tag and `overall` is the unweighted mean of fold means.
inline MetricsReport aggregate(std::vector<MetricRow> rows, bool by_fold = false) {
  if (rows.empty()) throw std::invalid_argument("aggregate: no metric rows");
  MetricsReport r;
  for (const auto& row : rows) {
    r.mean_dice += row.dice;
    r.mean_iou += row.iou;
  }
  r.mean_dice /= static_cast<double>(rows.size());
  r.mean_iou /= static_cast<double>(rows.size());
  if (by_fold) {
    std::map<std::string, std::tuple<double, double, std::size_t>> acc;
    for (const auto& row : rows) {
      auto& [d, i, n] = acc[row.fold];
      d += row.dice;
      i += row.iou;
      ++n;
    }
    double od = 0, oi = 0;
    for (const auto& [fold, v] : acc) {
      const auto& [d, i, n] = v;
      r.fold_means[fold] = {d / static_cast<double>(n), i / static_cast<double>(n)};
      od += d / static_cast<double>(n);
      oi += i / static_cast<double>(n);
    }
    r.overall = std::make_pair(od / static_cast<double>(acc.size()), oi / static_cast<double>(acc.size()));
  }
  r.rows = std::move(rows);
  return r;
}

inline std::string format_metric(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

/// CSV field with RFC 4180 quoting when it holds a comma, quote or newline.
inline std::string csv_field(const std::string& v) {
  if (v.find_first_of(",\"\n") == std::string::npos) return v;
  std::string q = "\"";
  for (char c : v) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

/// Splits one CSV line, honouring quoted fields.
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  if (quoted) throw std::invalid_argument("csv: unterminated quote in '" + line + "'");
  return out;
}

/// Per-image CSV: sample_id,dice,iou[,fold]
inline std::string report_csv(const MetricsReport& r) {
  bool folds = false;
  for (const auto& row : r.rows) folds = folds || !row.fold.empty();
  std::ostringstream os;
  os << "sample_id,dice,iou" << (folds ? ",fold" : "") << "\n";
  for (const auto& row : r.rows) {
    os << csv_field(row.sample_id) << ',' << format_metric(row.dice) << ',' << format_metric(row.iou);
    if (folds) os << ',' << csv_field(row.fold);
    os << "\n";
  }
  return os.str();
}

/// Grid of (dice, iou) cells: rows are models/variants/sources, columns are
/// datasets. Missing cells render as "--".
struct ResultTable {
  std::string title;
  std::string row_header = "Model";
  std::vector<std::string> row_labels;
  std::vector<std::string> column_labels;
  std::map<std::pair<std::string, std::string>, std::pair<double, double>> cells;

  std::string markdown() const {
    std::ostringstream os;
    os << "## " << title << "\n\n| " << row_header << " |";
    for (const auto& c : column_labels) os << ' ' << c << " Dice (%) | " << c << " IoU (%) |";
    os << "\n|---|";
    for (std::size_t i = 0; i < column_labels.size(); ++i) os << "---:|---:|";
    os << "\n";
    for (const auto& r : row_labels) {
      os << "| " << r << " |";
      for (const auto& c : column_labels) {
        auto it = cells.find({r, c});
        if (it == cells.end()) {
          os << " -- | -- |";
        } else {
          os << ' ' << std::fixed << std::setprecision(2) << 100.0 * it->second.first << " | "
             << 100.0 * it->second.second << " |";
          os.unsetf(std::ios::fixed);
        }
      }
      os << "\n";
    }
    return os.str();
  }

  /// Long-form CSV: row,column,dice,iou
  std::string csv() const {
    std::ostringstream os;
    os << "row,column,dice,iou\n";
    for (const auto& r : row_labels)
      for (const auto& c : column_labels)
        if (auto it = cells.find({r, c}); it != cells.end()) {
          os << csv_field(r) << ',' << csv_field(c) << ',' << format_metric(it->second.first) << ',' << format_metric(it->second.second) << "\n";
        }
    return os.str();
  }

  /// Inverse of csv(); row and column order follow first appearance.
  static ResultTable from_csv(const std::string& text, std::string title = {}) {
    ResultTable t;
    t.title = std::move(title);
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);
    if (line != "row,column,dice,iou") throw std::invalid_argument("result table csv: unexpected header '" + line + "'");
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto f = split_csv_line(line);
      if (f.size() != 4) throw std::invalid_argument("result table csv: bad line '" + line + "'");
      if (std::find(t.row_labels.begin(), t.row_labels.end(), f[0]) == t.row_labels.end()) t.row_labels.push_back(f[0]);
      if (std::find(t.column_labels.begin(), t.column_labels.end(), f[1]) == t.column_labels.end()) {
        t.column_labels.push_back(f[1]);
      }
      t.cells[{f[0], f[1]}] = {std::stod(f[2]), std::stod(f[3])};
    }
    return t;
  }
};

}  // namespace nucleisam
