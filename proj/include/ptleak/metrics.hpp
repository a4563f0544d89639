#pragma once

// Attack evaluation: ROC machinery with grouped score ties, trapezoidal AUC,
// conservative TPR at a fixed FPR (no interpolation), and best-threshold
// balanced accuracy.

#include <filesystem>
#include <string>
#include <vector>

#include "ptleak/errors.hpp"

namespace ptleak::metrics {

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;  // predict positive when score >= threshold
  bool operator==(const RocPoint&) const = default;
};

// Starts at (0,0,+inf), ends at (1,1,min score); fpr and tpr nondecreasing.
struct RocCurve {
  std::vector<RocPoint> points;
  long long positives = 0;
  long long negatives = 0;
};

// Threshold sweep over distinct scores descending; equal scores cross the
// threshold together. Both classes must be present.
RocCurve roc(const std::vector<double>& scores, const std::vector<int>& labels);

// Trapezoidal area; equals P(score+ > score-) + 0.5 P(tie).
double auc(const RocCurve& curve);

// Max TPR over curve points with FPR <= fpr_target.
double tpr_at_fpr(const RocCurve& curve, double fpr_target);

// Max over swept thresholds of (TPR + TNR) / 2.
double balanced_accuracy(const std::vector<double>& scores,
                         const std::vector<int>& labels);

struct Summary {
  double auc = 0.0;
  double balanced_accuracy = 0.0;
  double tpr_at_fpr_0p001 = 0.0;
  double tpr_at_fpr_0p01 = 0.0;
  long long n_pos = 0;
  long long n_neg = 0;
};

Summary summarize(const std::vector<double>& scores,
                  const std::vector<int>& labels);

// CSV "fpr,tpr,threshold" with an optional leading '#' comment line.
void write_roc_csv(const RocCurve& curve, const std::filesystem::path& path,
                   const std::string& header_comment = "");

}  // namespace ptleak::metrics
