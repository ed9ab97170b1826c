#pragma once

#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mtlid/tensor.hpp"

namespace mtlid {

/// Rows are gold classes, columns predicted classes.
using ConfusionMatrix = std::vector<std::vector<std::size_t>>;

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
};

struct MetricsReport {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<ClassScores> per_class;
  ConfusionMatrix confusion;

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& row : confusion)
      for (auto v : row) n += v;
    return n;
  }
};

namespace detail {

inline void check_labels(std::span<const std::int32_t> gold, std::span<const std::int32_t> pred,
                         std::size_t classes) {
  if (gold.size() != pred.size()) {
    throw LabelError("gold and predicted label counts differ: " + std::to_string(gold.size()) +
                     " vs " + std::to_string(pred.size()));
  }
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i] < 0 || static_cast<std::size_t>(gold[i]) >= classes || pred[i] < 0 ||
        static_cast<std::size_t>(pred[i]) >= classes) {
      throw LabelError("label outside [0, " + std::to_string(classes) + ") at index " +
                       std::to_string(i));
    }
  }
}

inline double safe_div(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

}  // namespace detail

inline ConfusionMatrix confusion_matrix(std::span<const std::int32_t> gold,
                                        std::span<const std::int32_t> pred, std::size_t classes) {
  detail::check_labels(gold, pred, classes);
  ConfusionMatrix m(classes, std::vector<std::size_t>(classes, 0));
  for (std::size_t i = 0; i < gold.size(); ++i) ++m[gold[i]][pred[i]];
  return m;
}

/// Per-class precision/recall/F1 with 0/0 -> 0, averaged over every class
/// including those with no support.
inline MetricsReport report_from_confusion(ConfusionMatrix confusion) {
  const std::size_t classes = confusion.size();
  MetricsReport r;
  r.per_class.resize(classes);
  std::size_t correct = 0, total = 0;
  std::vector<std::size_t> predicted(classes, 0);
  for (std::size_t g = 0; g < classes; ++g) {
    for (std::size_t p = 0; p < classes; ++p) {
      predicted[p] += confusion[g][p];
      r.per_class[g].support += confusion[g][p];
      total += confusion[g][p];
    }
    correct += confusion[g][g];
  }
  double f1_sum = 0.0;
  for (std::size_t c = 0; c < classes; ++c) {
    auto& s = r.per_class[c];
    const double tp = static_cast<double>(confusion[c][c]);
    s.precision = detail::safe_div(tp, static_cast<double>(predicted[c]));
    s.recall = detail::safe_div(tp, static_cast<double>(s.support));
    s.f1 = detail::safe_div(2.0 * s.precision * s.recall, s.precision + s.recall);
    f1_sum += s.f1;
  }
  r.accuracy = detail::safe_div(static_cast<double>(correct), static_cast<double>(total));
  r.macro_f1 = classes ? f1_sum / static_cast<double>(classes) : 0.0;
  r.confusion = std::move(confusion);
  return r;
}

inline MetricsReport evaluate_predictions(std::span<const std::int32_t> gold,
                                          std::span<const std::int32_t> pred, std::size_t classes) {
  return report_from_confusion(confusion_matrix(gold, pred, classes));
}

inline double macro_f1(std::span<const std::int32_t> gold, std::span<const std::int32_t> pred,
                       std::size_t classes) {
  return evaluate_predictions(gold, pred, classes).macro_f1;
}

inline double accuracy(std::span<const std::int32_t> gold, std::span<const std::int32_t> pred,
                       std::size_t classes) {
  return evaluate_predictions(gold, pred, classes).accuracy;
}

/// Header line of labels, then one tab-separated row per gold class.
inline void write_confusion(std::ostream& os, const ConfusionMatrix& m,
                            const std::vector<std::string>& labels) {
  for (std::size_t i = 0; i < labels.size(); ++i) os << (i ? "\t" : "") << labels[i];
  os << '\n';
  for (const auto& row : m) {
    for (std::size_t j = 0; j < row.size(); ++j) os << (j ? "\t" : "") << row[j];
    os << '\n';
  }
}

}  // namespace mtlid
