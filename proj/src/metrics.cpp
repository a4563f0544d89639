#include "ptleak/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

namespace ptleak::metrics {

namespace {

void validate_inputs(const std::vector<double>& scores,
                     const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw MetricError("scores and labels have different lengths");
  if (scores.empty()) throw MetricError("no scores to evaluate");
  bool has0 = false, has1 = false;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i]))
      throw MetricError("non-finite score at index " + std::to_string(i));
    if (labels[i] == 0)
      has0 = true;
    else if (labels[i] == 1)
      has1 = true;
    else
      throw MetricError("labels must be 0 or 1");
  }
  if (!has0 || !has1)
    throw MetricError("both classes must be present");
}

// Shortest round-trip formatting, same convention as the dataset CSVs.
std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, ptr);
}

}  // namespace

RocCurve roc(const std::vector<double>& scores,
             const std::vector<int>& labels) {
  validate_inputs(scores, labels);
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });

  RocCurve curve;
  for (int label : labels) (label ? curve.positives : curve.negatives) += 1;

  curve.points.push_back(
      RocPoint{0.0, 0.0, std::numeric_limits<double>::infinity()});
  long long tp = 0, fp = 0;
  size_t i = 0;
  while (i < order.size()) {
    double value = scores[order[i]];
    while (i < order.size() && scores[order[i]] == value) {
      (labels[order[i]] ? tp : fp) += 1;
      ++i;
    }
    curve.points.push_back(RocPoint{
        static_cast<double>(fp) / static_cast<double>(curve.negatives),
        static_cast<double>(tp) / static_cast<double>(curve.positives),
        value});
  }
  return curve;
}

double auc(const RocCurve& curve) {
  if (curve.points.size() < 2) throw MetricError("curve has too few points");
  double area = 0.0;
  for (size_t i = 1; i < curve.points.size(); ++i) {
    const auto& a = curve.points[i - 1];
    const auto& b = curve.points[i];
    area += (b.fpr - a.fpr) * (a.tpr + b.tpr) * 0.5;
  }
  return area;
}

double tpr_at_fpr(const RocCurve& curve, double fpr_target) {
  if (fpr_target < 0.0 || fpr_target > 1.0)
    throw MetricError("fpr target outside [0, 1]");
  double best = 0.0;
  for (const auto& p : curve.points)
    if (p.fpr <= fpr_target) best = std::max(best, p.tpr);
  return best;
}

double balanced_accuracy(const std::vector<double>& scores,
                         const std::vector<int>& labels) {
  RocCurve curve = roc(scores, labels);
  double best = 0.0;
  for (const auto& p : curve.points)
    best = std::max(best, (p.tpr + (1.0 - p.fpr)) * 0.5);
  return best;
}

Summary summarize(const std::vector<double>& scores,
                  const std::vector<int>& labels) {
  RocCurve curve = roc(scores, labels);
  Summary s;
  s.auc = auc(curve);
  s.tpr_at_fpr_0p001 = tpr_at_fpr(curve, 0.001);
  s.tpr_at_fpr_0p01 = tpr_at_fpr(curve, 0.01);
  double best = 0.0;
  for (const auto& p : curve.points)
    best = std::max(best, (p.tpr + (1.0 - p.fpr)) * 0.5);
  s.balanced_accuracy = best;
  s.n_pos = curve.positives;
  s.n_neg = curve.negatives;
  return s;
}

void write_roc_csv(const RocCurve& curve, const std::filesystem::path& path,
                   const std::string& header_comment) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot open " + path.string() + " for writing");
  if (!header_comment.empty()) out << "# " << header_comment << "\n";
  out << "fpr,tpr,threshold\n";
  for (const auto& p : curve.points)
    out << format_double(p.fpr) << "," << format_double(p.tpr) << ","
        << format_double(p.threshold) << "\n";
  if (!out) throw LoadError("write failed for " + path.string());
}

}  // namespace ptleak::metrics
