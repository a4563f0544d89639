#pragma once

// Synthetic task generator: Gaussian-mixture populations with a superclass
// structure, derived downstream tasks (coarse / disjoint / dissimilar),
// keyed query-time augmentations, and challenge-point designation. Plus CSV
// and JSON persistence for datasets and distribution specs.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ptleak/errors.hpp"

namespace ptleak::data {

struct Point {
  std::vector<float> x;
  int y = 0;
  uint64_t id = 0;
  bool operator==(const Point&) const = default;
};

struct Dataset {
  int feature_dim = 0;
  int class_count = 0;
  std::vector<Point> points;
  bool operator==(const Dataset&) const = default;
  size_t size() const { return points.size(); }
};

// Challenge points keep the ids they had in the population pool.
struct ChallengeSet {
  std::vector<Point> points;
  bool operator==(const ChallengeSet&) const = default;
  size_t size() const { return points.size(); }
};

enum class TaskKind { coarse, disjoint, dissimilar };
TaskKind parse_task_kind(const std::string& s);
std::string to_string(TaskKind kind);

// Gaussian-mixture description. Sampling draws a mixture component uniformly,
// then x = mean[component] + R * (cov_scales ⊙ eps) with eps ~ N(0, I); the
// emitted label is label_map[component]. Derived tasks reuse or replace the
// component structure but never change how a given (seed, index) pair draws,
// which is what makes coarse relabeling commute with sampling.
struct DistributionSpec {
  int feature_dim = 0;
  int component_count = 0;         // mixture components ("fine" classes)
  int class_count = 0;             // emitted label count
  int coarse_class_count = 0;      // superclass count of the base task
  std::vector<int> label_map;      // component -> emitted label
  std::vector<int> superclass_map; // component -> superclass
  std::vector<double> class_means; // component_count x feature_dim, row-major
  std::vector<double> cov_scales;  // per-dimension noise scales
  std::vector<double> rotation;    // empty = identity, else d x d row-major
  double class_cov_scale = 1.0;
  uint64_t seed = 0;
  bool operator==(const DistributionSpec&) const = default;
};

// Pretraining task: fine_classes mixture components grouped into
// coarse_classes superclasses (component i belongs to superclass
// i mod coarse_classes). Superclass centers sit on a sphere of radius
// `separation`; each fine mean is a unit-variance Gaussian perturbation of its
// superclass center, so means stay pairwise distinct even at separation 0.
// fine_classes must be divisible by coarse_classes.
DistributionSpec make_pretrain_spec(int feature_dim, int fine_classes,
                                    int coarse_classes, double separation,
                                    uint64_t seed,
                                    double class_cov_scale = 1.0);

// n i.i.d. draws. Ids depend only on (seed, index): unique within the sample
// and stable across process restarts.
Dataset sample_population(const DistributionSpec& spec, size_t n,
                          uint64_t seed);

// Downstream task derivation from a base (pretraining) spec:
//   coarse     — same mixture, labels mapped through superclass_map;
//   disjoint   — fresh class means in the same space, new labels;
//   dissimilar — fresh means under a random rotation plus anisotropic noise.
// class_count 0 selects the kind's default (coarse: superclass count,
// disjoint: 10, dissimilar: 8).
DistributionSpec derive_task(const DistributionSpec& spec, TaskKind kind,
                             uint64_t seed, int class_count = 0);

// Keyed augmentation: aug_index 0 is the identity; otherwise additive
// Gaussian noise of scale `strength` plus one coordinate-pair swap, both
// keyed by (hash of x, aug_index, master_seed). Same inputs, same output.
std::vector<float> augment(const std::vector<float>& x, int aug_index,
                           double strength, uint64_t master_seed);

// Uniform sample without replacement from the pool; pool order retained.
ChallengeSet designate_challenges(const Dataset& pool, size_t count,
                                  uint64_t seed);

// Permutes labels in place (null-control runs).
void shuffle_labels(Dataset& dataset, uint64_t seed);

// ---- persistence ----
// CSV layout: header "id,y,x_0,..,x_{d-1}", one row per point. Floats are
// written with shortest round-trip formatting, so read(write(d)) == d
// exactly. Lines starting with '#' are comments and are skipped on read.

void write_points_csv(const std::vector<Point>& points, int feature_dim,
                      const std::filesystem::path& path,
                      const std::string& header_comment = "");
std::pair<std::vector<Point>, int> read_points_csv(
    const std::filesystem::path& path);

void write_dataset_csv(const Dataset& dataset,
                       const std::filesystem::path& path,
                       const std::string& header_comment = "");
// class_count is not stored in the CSV; pass the declared value.
Dataset read_dataset_csv(const std::filesystem::path& path, int class_count);

void write_spec_json(const DistributionSpec& spec,
                     const std::filesystem::path& path);
DistributionSpec read_spec_json(const std::filesystem::path& path);

// Throws unless every point matches feature_dim and labels lie in
// [0, class_count).
void validate_dataset(const Dataset& dataset);

}  // namespace ptleak::data
