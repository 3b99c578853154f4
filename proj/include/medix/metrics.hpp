#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "medix/tensor.hpp"

namespace medix {

/// Classification quality bundle. Headline precision/recall/F1 follow the
/// usual conventions: positive-class values for binary problems (k == 2,
/// class 1 positive), macro averages otherwise. The macro_* fields and the
/// per-class breakdown are always filled in, so weighted averages can be
/// recomputed externally. Classes that never occur in the labels are excluded
/// from macro means and flagged in `class_present`.
struct MetricsReport {
  Index total = 0;
  Index classes = 0;
  std::vector<std::vector<std::int64_t>> confusion;  // [true][predicted]
  double accuracy = 0;
  double precision = 0, recall = 0, f1 = 0, roc_auc = 0;
  double macro_precision = 0, macro_recall = 0, macro_f1 = 0;
  std::vector<double> class_precision, class_recall, class_f1, class_auc;
  std::vector<bool> class_present;
};

/// Mann-Whitney rank statistic with ties counted half. Labels are 0/1;
/// requires at least one of each.
inline double roc_auc_binary(std::span<const double> scores, std::span<const int> labels) {
  require(scores.size() == labels.size() && !scores.empty(), ErrorKind::shape, "roc_auc: size mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = midrank;
    i = j + 1;
  }
  double rank_sum = 0;
  std::size_t positives = 0;
  for (std::size_t k = 0; k < n; ++k)
    if (labels[k] == 1) {
      rank_sum += rank[k];
      ++positives;
    }
  const std::size_t negatives = n - positives;
  require(positives > 0 && negatives > 0, ErrorKind::data, "roc_auc: needs both classes");
  return (rank_sum - static_cast<double>(positives) * (static_cast<double>(positives) + 1.0) / 2.0) /
         (static_cast<double>(positives) * static_cast<double>(negatives));
}

/// Hard labels via argmax (ties to the lowest class index), then the full
/// metric bundle. ROC-AUC is one-vs-rest on the probability columns, macro
/// averaged for k > 2.
template <typename Scalar>
MetricsReport compute_metrics(const Tensor<Scalar>& probs, const std::vector<int>& labels) {
  require(probs.rank() == 2, ErrorKind::shape, "compute_metrics expects probs [N,k]");
  const Index n = probs.dim(0), k = probs.dim(1);
  require(n == static_cast<Index>(labels.size()) && n > 0, ErrorKind::shape, "probs/labels size mismatch");
  require(k >= 2, ErrorKind::shape, "need at least two classes");

  MetricsReport r;
  r.total = n;
  r.classes = k;
  r.confusion.assign(static_cast<std::size_t>(k), std::vector<std::int64_t>(static_cast<std::size_t>(k), 0));

  std::vector<int> predicted(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    int best = 0;
    for (Index j = 1; j < k; ++j)
      if (probs(i, j) > probs(i, best)) best = static_cast<int>(j);
    predicted[static_cast<std::size_t>(i)] = best;
    const int y = labels[static_cast<std::size_t>(i)];
    require(y >= 0 && y < k, ErrorKind::data, "label out of range");
    ++r.confusion[static_cast<std::size_t>(y)][static_cast<std::size_t>(best)];
  }

  std::int64_t trace = 0;
  for (Index c = 0; c < k; ++c) trace += r.confusion[static_cast<std::size_t>(c)][static_cast<std::size_t>(c)];
  r.accuracy = static_cast<double>(trace) / static_cast<double>(n);

  r.class_precision.assign(static_cast<std::size_t>(k), 0);
  r.class_recall.assign(static_cast<std::size_t>(k), 0);
  r.class_f1.assign(static_cast<std::size_t>(k), 0);
  r.class_auc.assign(static_cast<std::size_t>(k), std::numeric_limits<double>::quiet_NaN());
  r.class_present.assign(static_cast<std::size_t>(k), false);

  std::vector<double> scores(static_cast<std::size_t>(n));
  std::vector<int> onevsrest(static_cast<std::size_t>(n));
  double sum_p = 0, sum_r = 0, sum_f = 0, sum_auc = 0;
  int present = 0;
  for (Index c = 0; c < k; ++c) {
    const std::size_t uc = static_cast<std::size_t>(c);
    std::int64_t tp = r.confusion[uc][uc], row = 0, col = 0;
    for (Index j = 0; j < k; ++j) {
      row += r.confusion[uc][static_cast<std::size_t>(j)];
      col += r.confusion[static_cast<std::size_t>(j)][uc];
    }
    r.class_present[uc] = row > 0;
    r.class_precision[uc] = col > 0 ? static_cast<double>(tp) / static_cast<double>(col) : 0.0;
    r.class_recall[uc] = row > 0 ? static_cast<double>(tp) / static_cast<double>(row) : 0.0;
    const double pr = r.class_precision[uc] + r.class_recall[uc];
    r.class_f1[uc] = pr > 0 ? 2.0 * r.class_precision[uc] * r.class_recall[uc] / pr : 0.0;
    if (!r.class_present[uc]) continue;  // undefined recall: excluded from macro means, flagged
    ++present;
    sum_p += r.class_precision[uc];
    sum_r += r.class_recall[uc];
    sum_f += r.class_f1[uc];
    if (row < n) {  // AUC needs both positives and negatives
      for (Index i = 0; i < n; ++i) {
        scores[static_cast<std::size_t>(i)] = static_cast<double>(probs(i, c));
        onevsrest[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(i)] == c ? 1 : 0;
      }
      r.class_auc[uc] = roc_auc_binary(scores, onevsrest);
    }
  }
  r.macro_precision = sum_p / present;
  r.macro_recall = sum_r / present;
  r.macro_f1 = sum_f / present;

  int auc_classes = 0;
  for (Index c = 0; c < k; ++c)
    if (std::isfinite(r.class_auc[static_cast<std::size_t>(c)])) {
      sum_auc += r.class_auc[static_cast<std::size_t>(c)];
      ++auc_classes;
    }
  r.roc_auc = auc_classes > 0 ? sum_auc / auc_classes : std::numeric_limits<double>::quiet_NaN();

  if (k == 2) {
    r.precision = r.class_precision[1];
    r.recall = r.class_recall[1];
    r.f1 = r.class_f1[1];
    if (std::isfinite(r.class_auc[1])) r.roc_auc = r.class_auc[1];
  } else {
    r.precision = r.macro_precision;
    r.recall = r.macro_recall;
    r.f1 = r.macro_f1;
  }
  return r;
}

inline nlohmann::json metrics_to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["total"] = r.total;
  j["classes"] = r.classes;
  j["accuracy"] = r.accuracy;
  j["precision"] = r.precision;
  j["recall"] = r.recall;
  j["f1"] = r.f1;
  j["roc_auc"] = r.roc_auc;
  j["macro"] = {{"precision", r.macro_precision}, {"recall", r.macro_recall}, {"f1", r.macro_f1}};
  j["per_class"] = nlohmann::json::array();
  for (Index c = 0; c < r.classes; ++c) {
    const std::size_t uc = static_cast<std::size_t>(c);
    nlohmann::json row;
    row["precision"] = r.class_precision[uc];
    row["recall"] = r.class_recall[uc];
    row["f1"] = r.class_f1[uc];
    row["auc"] = std::isfinite(r.class_auc[uc]) ? nlohmann::json(r.class_auc[uc]) : nlohmann::json();
    row["present"] = static_cast<bool>(r.class_present[uc]);
    j["per_class"].push_back(row);
  }
  j["confusion"] = r.confusion;
  return j;
}

}  // namespace medix
