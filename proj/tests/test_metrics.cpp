#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "ptleak/errors.hpp"
#include "ptleak/metrics.hpp"
#include "ptleak/rng.hpp"

using namespace ptleak;

namespace {

struct Instance {
  std::vector<double> scores;
  std::vector<int> labels;
};

// Random instance with deliberate score ties (scores snapped to a 0.1 grid).
Instance random_instance(uint64_t seed, size_t n) {
  rng::Prng gen(seed);
  Instance inst;
  for (size_t i = 0; i < n; ++i) {
    inst.scores.push_back(std::round(gen.normal() * 10.0) / 10.0);
    inst.labels.push_back(static_cast<int>(gen.below(2)));
  }
  // Guarantee both classes.
  inst.labels[0] = 0;
  inst.labels[1] = 1;
  return inst;
}

// O(n^2) oracle: for each distinct score t (descending), predict positive
// when score >= t, count TP/FP directly.
metrics::RocCurve roc_oracle(const std::vector<double>& scores,
                             const std::vector<int>& labels) {
  std::vector<double> thresholds = scores;
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()),
                   thresholds.end());

  long long pos = 0, neg = 0;
  for (int y : labels) (y == 1 ? pos : neg)++;

  metrics::RocCurve curve;
  curve.positives = pos;
  curve.negatives = neg;
  curve.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  for (double t : thresholds) {
    long long tp = 0, fp = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
      if (scores[i] >= t) (labels[i] == 1 ? tp : fp)++;
    }
    curve.points.push_back({static_cast<double>(fp) / static_cast<double>(neg),
                            static_cast<double>(tp) / static_cast<double>(pos),
                            t});
  }
  return curve;
}

// Pairwise Mann-Whitney statistic: P(score+ > score-) + 0.5 P(tie).
double auc_oracle(const std::vector<double>& scores,
                  const std::vector<int>& labels) {
  double wins = 0.0;
  long long pairs = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j])
        wins += 1.0;
      else if (scores[i] == scores[j])
        wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

}  // namespace

TEST_CASE("roc matches a brute-force threshold scan") {
  for (uint64_t seed = 1; seed <= 30; ++seed) {
    auto inst = random_instance(seed, 50);
    auto fast = metrics::roc(inst.scores, inst.labels);
    auto slow = roc_oracle(inst.scores, inst.labels);

    REQUIRE(fast.points.size() == slow.points.size());
    CHECK(fast.positives == slow.positives);
    CHECK(fast.negatives == slow.negatives);
    for (size_t i = 0; i < fast.points.size(); ++i) {
      CHECK(fast.points[i].fpr == doctest::Approx(slow.points[i].fpr).epsilon(1e-12));
      CHECK(fast.points[i].tpr == doctest::Approx(slow.points[i].tpr).epsilon(1e-12));
      CHECK(fast.points[i].threshold == slow.points[i].threshold);
    }
  }
}

TEST_CASE("roc endpoints and monotonicity") {
  auto inst = random_instance(7, 80);
  auto curve = metrics::roc(inst.scores, inst.labels);

  CHECK(curve.points.front().fpr == 0.0);
  CHECK(curve.points.front().tpr == 0.0);
  CHECK(std::isinf(curve.points.front().threshold));
  CHECK(curve.points.back().fpr == 1.0);
  CHECK(curve.points.back().tpr == 1.0);
  CHECK(curve.points.back().threshold ==
        *std::min_element(inst.scores.begin(), inst.scores.end()));
  for (size_t i = 1; i < curve.points.size(); ++i) {
    CHECK(curve.points[i].fpr >= curve.points[i - 1].fpr);
    CHECK(curve.points[i].tpr >= curve.points[i - 1].tpr);
    CHECK(curve.points[i].threshold < curve.points[i - 1].threshold);
  }
}

TEST_CASE("auc equals the pairwise Mann-Whitney statistic") {
  for (uint64_t seed = 100; seed < 200; ++seed) {
    auto inst = random_instance(seed, 40);
    double fast = metrics::auc(metrics::roc(inst.scores, inst.labels));
    double slow = auc_oracle(inst.scores, inst.labels);
    CHECK(fast == doctest::Approx(slow).epsilon(1e-12));
  }
}

TEST_CASE("auc frozen examples") {
  // Perfect separation.
  CHECK(metrics::auc(metrics::roc({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0})) ==
        doctest::Approx(1.0));
  // Perfectly wrong.
  CHECK(metrics::auc(metrics::roc({0.1, 0.2, 0.8, 0.9}, {1, 1, 0, 0})) ==
        doctest::Approx(0.0));
  // All scores equal: every pair ties, AUC is exactly one half.
  CHECK(metrics::auc(metrics::roc({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0})) ==
        doctest::Approx(0.5));
  // Worked example: pairs (0.9 vs 0.4) win, (0.3 vs 0.4) lose, (0.4 vs 0.4)
  // would tie; here pos {0.9, 0.3}, neg {0.4, 0.3}: wins 2, ties 1, of 4.
  CHECK(metrics::auc(metrics::roc({0.9, 0.3, 0.4, 0.3}, {1, 1, 0, 0})) ==
        doctest::Approx(2.5 / 4.0).epsilon(1e-12));
}

TEST_CASE("auc is invariant under strictly monotone transforms") {
  auto inst = random_instance(321, 60);
  double base = metrics::auc(metrics::roc(inst.scores, inst.labels));

  std::vector<double> exp_scores, affine_scores;
  for (double s : inst.scores) {
    exp_scores.push_back(std::exp(s));
    affine_scores.push_back(3.0 * s - 11.0);
  }
  CHECK(metrics::auc(metrics::roc(exp_scores, inst.labels)) ==
        doctest::Approx(base).epsilon(1e-12));
  CHECK(metrics::auc(metrics::roc(affine_scores, inst.labels)) ==
        doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("label flip mirrors the auc") {
  for (uint64_t seed = 400; seed < 420; ++seed) {
    auto inst = random_instance(seed, 45);
    std::vector<int> flipped;
    for (int y : inst.labels) flipped.push_back(1 - y);
    double a = metrics::auc(metrics::roc(inst.scores, inst.labels));
    double b = metrics::auc(metrics::roc(inst.scores, flipped));
    CHECK(a == doctest::Approx(1.0 - b).epsilon(1e-12));
  }
}

TEST_CASE("tpr_at_fpr is conservative and monotone in the target") {
  // pos scores {4, 3, 1}, neg scores {2, 0}. Thresholds descending:
  //   >=4: fpr 0,   tpr 1/3
  //   >=3: fpr 0,   tpr 2/3
  //   >=2: fpr 1/2, tpr 2/3
  //   >=1: fpr 1/2, tpr 1
  //   >=0: fpr 1,   tpr 1
  std::vector<double> scores = {4, 3, 2, 1, 0};
  std::vector<int> labels = {1, 1, 0, 1, 0};
  auto curve = metrics::roc(scores, labels);

  CHECK(metrics::tpr_at_fpr(curve, 0.0) == doctest::Approx(2.0 / 3.0));
  // No interpolation: 0.3 still only admits the fpr=0 points.
  CHECK(metrics::tpr_at_fpr(curve, 0.3) == doctest::Approx(2.0 / 3.0));
  CHECK(metrics::tpr_at_fpr(curve, 0.5) == doctest::Approx(1.0));
  CHECK(metrics::tpr_at_fpr(curve, 1.0) == doctest::Approx(1.0));

  // Monotone in the target on a random instance.
  auto inst = random_instance(55, 70);
  auto c2 = metrics::roc(inst.scores, inst.labels);
  double prev = -1.0;
  for (double t = 0.0; t <= 1.0; t += 0.05) {
    double v = metrics::tpr_at_fpr(c2, t);
    CHECK(v >= prev);
    prev = v;
  }

  CHECK_THROWS_AS(metrics::tpr_at_fpr(curve, -0.1), MetricError);
  CHECK_THROWS_AS(metrics::tpr_at_fpr(curve, 1.5), MetricError);
}

TEST_CASE("balanced accuracy frozen examples and oracle") {
  // Perfect separation: 1.0.
  CHECK(metrics::balanced_accuracy({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}) ==
        doctest::Approx(1.0));
  // All scores equal: the sweep sees (tpr=1, tnr=0) and (tpr=0, tnr=1) -> 0.5.
  CHECK(metrics::balanced_accuracy({0.5, 0.5, 0.5}, {1, 0, 1}) ==
        doctest::Approx(0.5));
  // Worked example: threshold >= 3 classifies pos {4,3} right and neg {2,0}
  // right: (1 + 1)/2 = 1? pos scores {4,3,1}: tpr 2/3, tnr 1 -> 5/6.
  CHECK(metrics::balanced_accuracy({4, 3, 2, 1, 0}, {1, 1, 0, 1, 0}) ==
        doctest::Approx(5.0 / 6.0));

  // Brute-force oracle over the same threshold set.
  for (uint64_t seed = 500; seed < 520; ++seed) {
    auto inst = random_instance(seed, 35);
    auto curve = metrics::roc(inst.scores, inst.labels);
    double best = 0.0;
    for (const auto& p : curve.points)
      best = std::max(best, (p.tpr + (1.0 - p.fpr)) / 2.0);
    CHECK(metrics::balanced_accuracy(inst.scores, inst.labels) ==
          doctest::Approx(best).epsilon(1e-12));
  }
}

TEST_CASE("single-class inputs are rejected") {
  CHECK_THROWS_AS(metrics::roc({0.1, 0.2}, {1, 1}), MetricError);
  CHECK_THROWS_AS(metrics::roc({0.1, 0.2}, {0, 0}), MetricError);
  CHECK_THROWS_AS(metrics::roc({}, {}), MetricError);
  CHECK_THROWS_AS(metrics::balanced_accuracy({0.4}, {1}), MetricError);
  // Mismatched lengths.
  CHECK_THROWS_AS(metrics::roc({0.1, 0.2, 0.3}, {1, 0}), MetricError);
}

TEST_CASE("summarize bundles the headline numbers") {
  std::vector<double> scores = {0.9, 0.8, 0.2, 0.1};
  std::vector<int> labels = {1, 1, 0, 0};
  auto s = metrics::summarize(scores, labels);
  CHECK(s.auc == doctest::Approx(1.0));
  CHECK(s.balanced_accuracy == doctest::Approx(1.0));
  CHECK(s.tpr_at_fpr_0p001 == doctest::Approx(1.0));
  CHECK(s.tpr_at_fpr_0p01 == doctest::Approx(1.0));
  CHECK(s.n_pos == 2);
  CHECK(s.n_neg == 2);

  auto inst = random_instance(600, 50);
  auto s2 = metrics::summarize(inst.scores, inst.labels);
  auto curve = metrics::roc(inst.scores, inst.labels);
  CHECK(s2.auc == metrics::auc(curve));
  CHECK(s2.tpr_at_fpr_0p001 == metrics::tpr_at_fpr(curve, 0.001));
  CHECK(s2.tpr_at_fpr_0p01 == metrics::tpr_at_fpr(curve, 0.01));
  CHECK(s2.balanced_accuracy ==
        metrics::balanced_accuracy(inst.scores, inst.labels));
}

TEST_CASE("write_roc_csv emits the documented format") {
  namespace fs = std::filesystem;
  auto curve = metrics::roc({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0});
  fs::path path = fs::temp_directory_path() / "ptleak_test_roc.csv";
  metrics::write_roc_csv(curve, path, "attack=demo");

  std::ifstream in(path);
  REQUIRE(in.good());
  std::string line;
  std::getline(in, line);
  CHECK(line == "# attack=demo");
  std::getline(in, line);
  CHECK(line == "fpr,tpr,threshold");
  size_t rows = 0;
  while (std::getline(in, line)) {
    if (!line.empty()) ++rows;
    // Three comma-separated fields per row.
    CHECK(std::count(line.begin(), line.end(), ',') == 2);
  }
  CHECK(rows == curve.points.size());
  fs::remove(path);

  // Without a comment the header is the first line.
  metrics::write_roc_csv(curve, path);
  std::ifstream in2(path);
  std::getline(in2, line);
  CHECK(line == "fpr,tpr,threshold");
  fs::remove(path);
}
