#include "ptleak/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <unordered_set>

#include "json.hpp"

#include "ptleak/rng.hpp"

namespace ptleak::data {

using nlohmann::json;

TaskKind parse_task_kind(const std::string& s) {
  if (s == "coarse") return TaskKind::coarse;
  if (s == "disjoint") return TaskKind::disjoint;
  if (s == "dissimilar") return TaskKind::dissimilar;
  throw ConfigError("unknown task kind '" + s + "'");
}

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::coarse: return "coarse";
    case TaskKind::disjoint: return "disjoint";
    case TaskKind::dissimilar: return "dissimilar";
  }
  throw ConfigError("unknown task kind");
}

namespace {

void validate_spec(const DistributionSpec& s) {
  if (s.feature_dim <= 0) throw SpecError("feature_dim must be positive");
  if (s.component_count <= 0)
    throw SpecError("component_count must be positive");
  if (s.class_count <= 0) throw SpecError("class_count must be positive");
  if (s.label_map.size() != static_cast<size_t>(s.component_count))
    throw SpecError("label_map size does not match component_count");
  for (int lbl : s.label_map)
    if (lbl < 0 || lbl >= s.class_count)
      throw SpecError("label_map entry outside [0, class_count)");
  if (s.class_means.size() !=
      static_cast<size_t>(s.component_count) * s.feature_dim)
    throw SpecError("class_means size does not match components x dims");
  if (s.cov_scales.size() != static_cast<size_t>(s.feature_dim))
    throw SpecError("cov_scales size does not match feature_dim");
  for (double c : s.cov_scales)
    if (!(c > 0.0)) throw SpecError("cov_scales entries must be positive");
  if (!s.rotation.empty() &&
      s.rotation.size() !=
          static_cast<size_t>(s.feature_dim) * s.feature_dim)
    throw SpecError("rotation must be empty or feature_dim x feature_dim");
}

// Unit vector drawn from the sphere.
std::vector<double> random_direction(int dim, rng::Prng& gen) {
  std::vector<double> v(static_cast<size_t>(dim));
  double norm2 = 0.0;
  do {
    norm2 = 0.0;
    for (auto& e : v) {
      e = gen.normal();
      norm2 += e * e;
    }
  } while (norm2 < 1e-12);
  double inv = 1.0 / std::sqrt(norm2);
  for (auto& e : v) e *= inv;
  return v;
}

// Orthonormal matrix via Gram-Schmidt on a random Gaussian matrix.
std::vector<double> random_rotation(int dim, rng::Prng& gen) {
  std::vector<double> q(static_cast<size_t>(dim) * dim);
  for (int r = 0; r < dim; ++r) {
    std::vector<double> v(static_cast<size_t>(dim));
    for (;;) {
      for (auto& e : v) e = gen.normal();
      for (int p = 0; p < r; ++p) {
        const double* row = q.data() + static_cast<size_t>(p) * dim;
        double proj = 0.0;
        for (int c = 0; c < dim; ++c) proj += row[c] * v[static_cast<size_t>(c)];
        for (int c = 0; c < dim; ++c) v[static_cast<size_t>(c)] -= proj * row[c];
      }
      double norm2 = 0.0;
      for (double e : v) norm2 += e * e;
      if (norm2 > 1e-10) {
        double inv = 1.0 / std::sqrt(norm2);
        for (int c = 0; c < dim; ++c)
          q[static_cast<size_t>(r) * dim + c] = v[static_cast<size_t>(c)] * inv;
        break;
      }
    }
  }
  return q;
}

uint64_t hash_kind(TaskKind kind) { return static_cast<uint64_t>(kind); }

// Scale used to place fresh class means of derived tasks: RMS norm of the
// base task's class means, floored at 1 so a degenerate base still spreads.
double mean_center_radius(const DistributionSpec& spec) {
  double acc = 0.0;
  for (int i = 0; i < spec.component_count; ++i) {
    const double* m = spec.class_means.data() +
                      static_cast<size_t>(i) * spec.feature_dim;
    for (int c = 0; c < spec.feature_dim; ++c) acc += m[c] * m[c];
  }
  double rms = std::sqrt(acc / static_cast<double>(spec.component_count));
  return std::max(rms, 1.0);
}

// Fresh means must not collide with the base task's means (almost surely
// true; asserted because a collision would silently break task disjointness).
void check_mean_separation(const DistributionSpec& base,
                           const DistributionSpec& derived) {
  for (int i = 0; i < derived.component_count; ++i) {
    const double* a = derived.class_means.data() +
                      static_cast<size_t>(i) * derived.feature_dim;
    for (int j = 0; j < base.component_count; ++j) {
      const double* b =
          base.class_means.data() + static_cast<size_t>(j) * base.feature_dim;
      double d2 = 0.0;
      for (int c = 0; c < base.feature_dim; ++c) {
        double diff = a[c] - b[c];
        d2 += diff * diff;
      }
      if (d2 <= 1e-12)
        throw SpecError("derived task mean collides with a base task mean");
    }
  }
}

Point sample_point(const DistributionSpec& spec, rng::Prng& gen,
                   uint64_t id) {
  const int d = spec.feature_dim;
  size_t comp = static_cast<size_t>(
      gen.below(static_cast<uint64_t>(spec.component_count)));
  std::vector<double> eps(static_cast<size_t>(d));
  for (int k = 0; k < d; ++k)
    eps[static_cast<size_t>(k)] =
        gen.normal() * spec.cov_scales[static_cast<size_t>(k)];
  Point p;
  p.x.resize(static_cast<size_t>(d));
  const double* mean = spec.class_means.data() + comp * d;
  if (spec.rotation.empty()) {
    for (int k = 0; k < d; ++k)
      p.x[static_cast<size_t>(k)] =
          static_cast<float>(mean[k] + eps[static_cast<size_t>(k)]);
  } else {
    for (int r = 0; r < d; ++r) {
      const double* row = spec.rotation.data() + static_cast<size_t>(r) * d;
      double acc = mean[r];
      for (int c = 0; c < d; ++c) acc += row[c] * eps[static_cast<size_t>(c)];
      p.x[static_cast<size_t>(r)] = static_cast<float>(acc);
    }
  }
  p.y = spec.label_map[comp];
  p.id = id;
  return p;
}

}  // namespace

DistributionSpec make_pretrain_spec(int feature_dim, int fine_classes,
                                    int coarse_classes, double separation,
                                    uint64_t seed, double class_cov_scale) {
  if (feature_dim <= 0) throw SpecError("feature_dim must be positive");
  if (fine_classes <= 0 || coarse_classes <= 0)
    throw SpecError("class counts must be positive");
  if (fine_classes % coarse_classes != 0)
    throw SpecError("fine_classes must be divisible by coarse_classes");
  if (separation < 0.0) throw SpecError("separation must be nonnegative");
  if (!(class_cov_scale > 0.0))
    throw SpecError("class_cov_scale must be positive");

  DistributionSpec s;
  s.feature_dim = feature_dim;
  s.component_count = fine_classes;
  s.class_count = fine_classes;
  s.coarse_class_count = coarse_classes;
  s.class_cov_scale = class_cov_scale;
  s.seed = seed;
  s.label_map.resize(static_cast<size_t>(fine_classes));
  std::iota(s.label_map.begin(), s.label_map.end(), 0);
  s.superclass_map.resize(static_cast<size_t>(fine_classes));
  for (int i = 0; i < fine_classes; ++i)
    s.superclass_map[static_cast<size_t>(i)] = i % coarse_classes;
  s.cov_scales.assign(static_cast<size_t>(feature_dim), class_cov_scale);

  rng::Prng gen(rng::derive(seed, "pretrain_spec"));
  std::vector<double> centers(static_cast<size_t>(coarse_classes) *
                              feature_dim);
  for (int c = 0; c < coarse_classes; ++c) {
    auto dir = random_direction(feature_dim, gen);
    for (int k = 0; k < feature_dim; ++k)
      centers[static_cast<size_t>(c) * feature_dim + k] =
          separation * dir[static_cast<size_t>(k)];
  }
  // Fine means: unit-variance Gaussian perturbation around the superclass
  // center. The perturbation scale is fixed (not tied to `separation`) so
  // means stay pairwise distinct even when all centers coincide.
  s.class_means.resize(static_cast<size_t>(fine_classes) * feature_dim);
  for (int i = 0; i < fine_classes; ++i) {
    const double* center =
        centers.data() +
        static_cast<size_t>(s.superclass_map[static_cast<size_t>(i)]) *
            feature_dim;
    for (int k = 0; k < feature_dim; ++k)
      s.class_means[static_cast<size_t>(i) * feature_dim + k] =
          center[k] + gen.normal();
  }
  return s;
}

Dataset sample_population(const DistributionSpec& spec, size_t n,
                          uint64_t seed) {
  validate_spec(spec);
  if (n == 0) throw SizeError("sample size must be positive");
  Dataset d;
  d.feature_dim = spec.feature_dim;
  d.class_count = spec.class_count;
  d.points.reserve(n);
  rng::Prng gen(rng::derive(seed, "sample"));
  std::unordered_set<uint64_t> seen;
  seen.reserve(n * 2);
  for (size_t i = 0; i < n; ++i) {
    uint64_t id = rng::derive(seed, "point_id", static_cast<uint64_t>(i));
    if (!seen.insert(id).second)
      throw SizeError("point id collision; use a different seed");
    d.points.push_back(sample_point(spec, gen, id));
  }
  return d;
}

DistributionSpec derive_task(const DistributionSpec& spec, TaskKind kind,
                             uint64_t seed, int class_count) {
  validate_spec(spec);
  for (int i = 0; i < spec.component_count; ++i)
    if (spec.label_map[static_cast<size_t>(i)] != i)
      throw SpecError("derive_task expects a base (identity-labeled) spec");

  DistributionSpec out = spec;
  out.seed = seed;
  rng::Prng gen(rng::derive(seed, "derive_task", hash_kind(kind)));
  switch (kind) {
    case TaskKind::coarse: {
      if (class_count != 0 && class_count != spec.coarse_class_count)
        throw SpecError("coarse task class_count is fixed by superclass_map");
      out.class_count = spec.coarse_class_count;
      out.label_map = spec.superclass_map;
      return out;
    }
    case TaskKind::disjoint: {
      int k = class_count > 0 ? class_count : 10;
      out.component_count = k;
      out.class_count = k;
      out.label_map.resize(static_cast<size_t>(k));
      std::iota(out.label_map.begin(), out.label_map.end(), 0);
      out.superclass_map.assign(static_cast<size_t>(k), 0);
      std::iota(out.superclass_map.begin(), out.superclass_map.end(), 0);
      out.coarse_class_count = k;
      out.class_means.resize(static_cast<size_t>(k) * spec.feature_dim);
      double sep = mean_center_radius(spec);
      for (int i = 0; i < k; ++i) {
        auto dir = random_direction(spec.feature_dim, gen);
        for (int c = 0; c < spec.feature_dim; ++c)
          out.class_means[static_cast<size_t>(i) * spec.feature_dim + c] =
              sep * dir[static_cast<size_t>(c)] + gen.normal();
      }
      check_mean_separation(spec, out);
      return out;
    }
    case TaskKind::dissimilar: {
      int k = class_count > 0 ? class_count : 8;
      out.component_count = k;
      out.class_count = k;
      out.label_map.resize(static_cast<size_t>(k));
      std::iota(out.label_map.begin(), out.label_map.end(), 0);
      out.superclass_map.assign(static_cast<size_t>(k), 0);
      std::iota(out.superclass_map.begin(), out.superclass_map.end(), 0);
      out.coarse_class_count = k;
      out.rotation = random_rotation(spec.feature_dim, gen);
      // Anisotropic noise: per-dimension scales in
      // [0.5, 1.5) * class_cov_scale.
      for (int c = 0; c < spec.feature_dim; ++c)
        out.cov_scales[static_cast<size_t>(c)] =
            spec.class_cov_scale * (0.5 + gen.uniform());
      out.class_means.resize(static_cast<size_t>(k) * spec.feature_dim);
      double sep = mean_center_radius(spec);
      std::vector<double> base(static_cast<size_t>(spec.feature_dim));
      for (int i = 0; i < k; ++i) {
        auto dir = random_direction(spec.feature_dim, gen);
        for (int c = 0; c < spec.feature_dim; ++c)
          base[static_cast<size_t>(c)] =
              sep * dir[static_cast<size_t>(c)] + gen.normal();
        // Rotate the fresh mean into the task's coordinate frame.
        for (int r = 0; r < spec.feature_dim; ++r) {
          const double* row =
              out.rotation.data() + static_cast<size_t>(r) * spec.feature_dim;
          double acc = 0.0;
          for (int c = 0; c < spec.feature_dim; ++c)
            acc += row[c] * base[static_cast<size_t>(c)];
          out.class_means[static_cast<size_t>(i) * spec.feature_dim + r] = acc;
        }
      }
      check_mean_separation(spec, out);
      return out;
    }
  }
  throw ConfigError("unknown task kind");
}

std::vector<float> augment(const std::vector<float>& x, int aug_index,
                           double strength, uint64_t master_seed) {
  if (aug_index < 0) throw InputError("aug_index must be nonnegative");
  if (strength < 0.0) throw InputError("strength must be nonnegative");
  if (x.empty()) throw ShapeError("augment input is empty");
  if (aug_index == 0) return x;

  uint64_t xh = 0xcbf29ce484222325ull;
  for (float v : x) {
    uint32_t bits;
    static_assert(sizeof(bits) == sizeof(v));
    std::memcpy(&bits, &v, sizeof(bits));
    xh ^= bits;
    xh *= 0x100000001b3ull;
  }
  rng::Prng gen(rng::derive(master_seed, "augment", xh,
                            static_cast<uint64_t>(aug_index)));
  std::vector<float> out = x;
  if (strength > 0.0)
    for (auto& v : out) v = static_cast<float>(v + gen.normal() * strength);
  size_t d = out.size();
  if (d >= 2) {
    size_t i = static_cast<size_t>(gen.below(d));
    size_t j = static_cast<size_t>(gen.below(d - 1));
    if (j >= i) ++j;
    std::swap(out[i], out[j]);
  }
  return out;
}

ChallengeSet designate_challenges(const Dataset& pool, size_t count,
                                  uint64_t seed) {
  if (count == 0) throw SizeError("challenge count must be positive");
  if (count > pool.points.size())
    throw SizeError("challenge count exceeds pool size");
  std::vector<size_t> idx(pool.points.size());
  std::iota(idx.begin(), idx.end(), size_t{0});
  rng::Prng gen(rng::derive(seed, "challenges"));
  gen.shuffle(idx);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());  // keep pool order
  ChallengeSet cs;
  cs.points.reserve(count);
  for (size_t i : idx) cs.points.push_back(pool.points[i]);
  return cs;
}

void shuffle_labels(Dataset& dataset, uint64_t seed) {
  std::vector<int> ys(dataset.points.size());
  for (size_t i = 0; i < dataset.points.size(); ++i) ys[i] = dataset.points[i].y;
  rng::Prng gen(rng::derive(seed, "label_shuffle"));
  gen.shuffle(ys);
  for (size_t i = 0; i < dataset.points.size(); ++i) dataset.points[i].y = ys[i];
}

void validate_dataset(const Dataset& dataset) {
  if (dataset.feature_dim <= 0)
    throw ShapeError("dataset feature_dim must be positive");
  if (dataset.class_count <= 0)
    throw ClassCountError("dataset class_count must be positive");
  for (const auto& p : dataset.points) {
    if (p.x.size() != static_cast<size_t>(dataset.feature_dim))
      throw ShapeError("dataset point dim mismatch");
    if (p.y < 0 || p.y >= dataset.class_count)
      throw LabelError("dataset label outside [0, class_count)");
  }
}

// ---- persistence ----

namespace {

void append_double(std::string& out, double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, res.ptr);
}

double parse_double(std::string_view s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw LoadError("malformed number '" + std::string(s) + "' in CSV");
  return v;
}

uint64_t parse_u64(std::string_view s) {
  uint64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw LoadError("malformed id '" + std::string(s) + "' in CSV");
  return v;
}

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> fields;
  size_t start = 0;
  for (size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',') {
      fields.push_back(line.substr(start, i - start));
      start = i + 1;
    }
  }
  return fields;
}

}  // namespace

void write_points_csv(const std::vector<Point>& points, int feature_dim,
                      const std::filesystem::path& path,
                      const std::string& header_comment) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot open " + path.string() + " for writing");
  if (!header_comment.empty()) out << "# " << header_comment << '\n';
  std::string line = "id,y";
  for (int k = 0; k < feature_dim; ++k) line += ",x_" + std::to_string(k);
  out << line << '\n';
  for (const auto& p : points) {
    if (p.x.size() != static_cast<size_t>(feature_dim))
      throw ShapeError("point dim mismatch while writing CSV");
    line.clear();
    line += std::to_string(p.id);
    line += ',';
    line += std::to_string(p.y);
    for (float v : p.x) {
      line += ',';
      char buf[48];
      auto res = std::to_chars(buf, buf + sizeof(buf), v);
      line.append(buf, res.ptr);
    }
    out << line << '\n';
  }
  if (!out) throw LoadError("failed writing " + path.string());
}

std::pair<std::vector<Point>, int> read_points_csv(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open CSV " + path.string());
  std::string line;
  int feature_dim = -1;
  std::vector<Point> points;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto fields = split_csv(line);
    if (!header_seen) {
      if (fields.size() < 2 || fields[0] != "id" || fields[1] != "y")
        throw LoadError("CSV header must start with id,y: " + path.string());
      feature_dim = static_cast<int>(fields.size()) - 2;
      header_seen = true;
      continue;
    }
    if (fields.size() != static_cast<size_t>(feature_dim) + 2)
      throw LoadError("CSV row has wrong field count in " + path.string());
    Point p;
    p.id = parse_u64(fields[0]);
    p.y = static_cast<int>(parse_double(std::string(fields[1])));
    p.x.reserve(static_cast<size_t>(feature_dim));
    for (int k = 0; k < feature_dim; ++k) {
      float v = 0.0f;
      std::string_view f = fields[static_cast<size_t>(k) + 2];
      auto res = std::from_chars(f.data(), f.data() + f.size(), v);
      if (res.ec != std::errc() || res.ptr != f.data() + f.size())
        throw LoadError("malformed float in " + path.string());
      p.x.push_back(v);
    }
    points.push_back(std::move(p));
  }
  if (!header_seen) throw LoadError("CSV has no header: " + path.string());
  return {std::move(points), feature_dim};
}

void write_dataset_csv(const Dataset& dataset,
                       const std::filesystem::path& path,
                       const std::string& header_comment) {
  write_points_csv(dataset.points, dataset.feature_dim, path, header_comment);
}

Dataset read_dataset_csv(const std::filesystem::path& path, int class_count) {
  auto [points, dim] = read_points_csv(path);
  Dataset d;
  d.feature_dim = dim;
  d.class_count = class_count;
  d.points = std::move(points);
  validate_dataset(d);
  return d;
}

void write_spec_json(const DistributionSpec& spec,
                     const std::filesystem::path& path) {
  validate_spec(spec);
  json j;
  j["schema_version"] = 1;
  j["feature_dim"] = spec.feature_dim;
  j["component_count"] = spec.component_count;
  j["class_count"] = spec.class_count;
  j["coarse_class_count"] = spec.coarse_class_count;
  j["label_map"] = spec.label_map;
  j["superclass_map"] = spec.superclass_map;
  j["class_means"] = spec.class_means;
  j["cov_scales"] = spec.cov_scales;
  j["rotation"] = spec.rotation;
  j["class_cov_scale"] = spec.class_cov_scale;
  j["seed"] = spec.seed;
  std::ofstream out(path);
  if (!out) throw LoadError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw LoadError("failed writing " + path.string());
}

DistributionSpec read_spec_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open spec " + path.string());
  json j;
  try {
    in >> j;
    if (j.at("schema_version").get<int>() != 1)
      throw LoadError("spec has unsupported schema_version");
    DistributionSpec s;
    s.feature_dim = j.at("feature_dim").get<int>();
    s.component_count = j.at("component_count").get<int>();
    s.class_count = j.at("class_count").get<int>();
    s.coarse_class_count = j.at("coarse_class_count").get<int>();
    s.label_map = j.at("label_map").get<std::vector<int>>();
    s.superclass_map = j.at("superclass_map").get<std::vector<int>>();
    s.class_means = j.at("class_means").get<std::vector<double>>();
    s.cov_scales = j.at("cov_scales").get<std::vector<double>>();
    s.rotation = j.at("rotation").get<std::vector<double>>();
    s.class_cov_scale = j.at("class_cov_scale").get<double>();
    s.seed = j.at("seed").get<uint64_t>();
    validate_spec(s);
    return s;
  } catch (const json::exception& e) {
    throw LoadError(std::string("spec malformed: ") + e.what());
  } catch (const SpecError& e) {
    throw LoadError(std::string("spec malformed: ") + e.what());
  }
}

}  // namespace ptleak::data
