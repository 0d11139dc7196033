#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "redloop/domain.h"

namespace redloop::metrics {

// Confusion counts with class 1 (problematic) as the positive class. Only
// the count fields and n are filled. Throws PreconditionError on length
// mismatch, empty input or non-binary values.
MetricsReport confusion(std::span<const int> preds, std::span<const int> labels);

// Fills accuracy, precision and recall from the counts. Precision and recall
// stay undefined when their denominators are zero. If auroc is unset and both
// classes are present it is filled with the hard-prediction convention
// (TPR + TNR) / 2.
MetricsReport classification_metrics(MetricsReport counts);

// Area under the ROC curve with 0.5 credit for tied positive/negative pairs.
// nullopt when either class is absent.
std::optional<double> auroc(std::span<const double> scores, std::span<const int> labels);

// Thresholds scores at 0.5, counts, and computes AUROC from the raw scores.
MetricsReport evaluate(std::span<const double> scores, std::span<const int> labels);

std::string csv_header();
std::string csv_row(const MetricsReport& report);

}  // namespace redloop::metrics
