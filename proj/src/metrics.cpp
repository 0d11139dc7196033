#include "redloop/metrics.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "redloop/error.h"

namespace redloop::metrics {

MetricsReport confusion(std::span<const int> preds, std::span<const int> labels) {
  if (preds.size() != labels.size())
    throw PreconditionError("confusion: predictions and labels differ in length");
  if (preds.empty()) throw PreconditionError("confusion: empty input");
  MetricsReport r;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    int p = preds[i], y = labels[i];
    if ((p != 0 && p != 1) || (y != 0 && y != 1))
      throw PreconditionError("confusion: values must be 0 or 1");
    if (p == 1 && y == 1) ++r.tp;
    else if (p == 1) ++r.fp;
    else if (y == 0) ++r.tn;
    else ++r.fn;
  }
  r.n = static_cast<std::int64_t>(preds.size());
  return r;
}

MetricsReport classification_metrics(MetricsReport r) {
  if (r.n < 1) throw PreconditionError("classification_metrics: n must be >= 1");
  if (r.tp + r.fp + r.tn + r.fn != r.n)
    throw PreconditionError("classification_metrics: counts do not sum to n");
  const auto ratio = [](std::int64_t num, std::int64_t den) -> std::optional<double> {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
  };
  r.accuracy = ratio(r.tp + r.tn, r.n);
  r.precision = ratio(r.tp, r.tp + r.fp);
  r.recall = ratio(r.tp, r.tp + r.fn);
  if (!r.auroc) {
    auto tnr = ratio(r.tn, r.tn + r.fp);
    if (r.recall && tnr) r.auroc = (*r.recall + *tnr) / 2.0;
  }
  return r;
}

std::optional<double> auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size())
    throw PreconditionError("auroc: scores and labels differ in length");
  const std::size_t n = scores.size();
  for (double s : scores)
    if (std::isnan(s)) throw PreconditionError("auroc: NaN score");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Mann-Whitney U from average ranks; ties share the mean rank, which is
  // exactly the half-credit rule for tied pairs.
  double positive_rank_sum = 0.0;
  std::int64_t positives = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    double mean_rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) {
      if (labels[order[k]] == 1) {
        positive_rank_sum += mean_rank;
        ++positives;
      } else if (labels[order[k]] != 0) {
        throw PreconditionError("auroc: labels must be 0 or 1");
      }
    }
    i = j + 1;
  }
  const std::int64_t negatives = static_cast<std::int64_t>(n) - positives;
  if (positives == 0 || negatives == 0) return std::nullopt;
  const double p = static_cast<double>(positives);
  const double u = positive_rank_sum - p * (p + 1.0) / 2.0;
  return u / (p * static_cast<double>(negatives));
}

MetricsReport evaluate(std::span<const double> scores, std::span<const int> labels) {
  std::vector<int> preds(scores.size());
  std::transform(scores.begin(), scores.end(), preds.begin(),
                 [](double s) { return s >= 0.5 ? 1 : 0; });
  MetricsReport r = confusion(preds, labels);
  r.auroc = auroc(scores, labels);
  return classification_metrics(r);
}

std::string csv_header() {
  return "iteration,model_version,test_set,n,tp,fp,tn,fn,accuracy,precision,recall,auroc";
}

std::string csv_row(const MetricsReport& r) {
  std::string out = r.iteration ? std::to_string(*r.iteration) : "";
  out += "," + r.model_version + "," + r.test_set + "," + std::to_string(r.n) + "," +
         std::to_string(r.tp) + "," + std::to_string(r.fp) + "," + std::to_string(r.tn) +
         "," + std::to_string(r.fn) + "," + format_metric(r.accuracy) + "," +
         format_metric(r.precision) + "," + format_metric(r.recall) + "," +
         format_metric(r.auroc);
  return out;
}

}  // namespace redloop::metrics
