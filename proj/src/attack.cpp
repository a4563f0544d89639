#include "ptleak/attack.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ptleak/rng.hpp"

namespace ptleak::attack {

namespace {

double logit(double p) { return std::log(p) - std::log1p(-p); }

int argmax_lowest(const std::vector<double>& v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i)
    if (v[static_cast<size_t>(i)] > v[static_cast<size_t>(best)]) best = i;
  return best;
}

// Per-shadow statistic vectors for one challenge point: element j is the
// scaled confidence at `label` on view j. `pretrained` selects which model
// of each entry is queried.
void shadow_statistics(const data::Point& x, const shadow::AttackerView& view,
                       int m, double aug_strength, uint64_t master_seed,
                       int label, bool pretrained,
                       std::vector<std::vector<double>>& in_stats,
                       std::vector<std::vector<double>>& out_stats) {
  auto inputs = augmented_views(x.x, m, aug_strength, master_seed);
  for (size_t i = 0; i < view.size(); ++i) {
    const nn::Model& model = pretrained ? view.pretrained(i)
                                        : view.finetuned(i);
    if (label < 0 || label >= model.class_count)
      throw LabelError("statistic label " + std::to_string(label) +
                       " outside shadow model's class range");
    std::vector<double> stat;
    stat.reserve(inputs.size());
    for (const auto& input : inputs) {
      ScaledVector s = scale(nn::predict(model, input));
      stat.push_back(s.values[static_cast<size_t>(label)]);
    }
    if (view.is_member(i, x.id))
      in_stats.push_back(std::move(stat));
    else
      out_stats.push_back(std::move(stat));
  }
}

double cholesky_quad_and_logdet(const GaussianFit& fit,
                                const std::vector<double>& obs,
                                double& logdet) {
  const int n = fit.dim;
  std::vector<double> L(static_cast<size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      double sum = fit.covariance[static_cast<size_t>(i) * n + j];
      for (int k = 0; k < j; ++k)
        sum -= L[static_cast<size_t>(i) * n + k] *
               L[static_cast<size_t>(j) * n + k];
      if (i == j) {
        if (sum <= 0.0)
          throw FitError("covariance not positive definite");
        L[static_cast<size_t>(i) * n + j] = std::sqrt(sum);
      } else {
        L[static_cast<size_t>(i) * n + j] =
            sum / L[static_cast<size_t>(j) * n + j];
      }
    }
  }
  // Solve L z = obs - mean; quad = |z|^2, logdet = 2 sum log L_ii.
  std::vector<double> z(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    double sum = obs[static_cast<size_t>(i)] - fit.mean[static_cast<size_t>(i)];
    for (int k = 0; k < i; ++k)
      sum -= L[static_cast<size_t>(i) * n + k] * z[static_cast<size_t>(k)];
    z[static_cast<size_t>(i)] = sum / L[static_cast<size_t>(i) * n + i];
  }
  double quad = 0.0;
  logdet = 0.0;
  for (int i = 0; i < n; ++i) {
    quad += z[static_cast<size_t>(i)] * z[static_cast<size_t>(i)];
    logdet += 2.0 * std::log(L[static_cast<size_t>(i) * n + i]);
  }
  return quad;
}

data::Dataset meta_to_dataset(const MetaDataset& meta) {
  data::Dataset d;
  d.feature_dim = meta.rows.front().features.size();
  d.class_count = 2;
  d.points.reserve(meta.rows.size());
  for (size_t r = 0; r < meta.rows.size(); ++r) {
    data::Point p;
    p.id = r;
    p.y = meta.rows[r].label;
    p.x.reserve(meta.rows[r].features.values.size());
    for (double v : meta.rows[r].features.values)
      p.x.push_back(static_cast<float>(v));
    d.points.push_back(std::move(p));
  }
  return d;
}

void check_meta_rows(const MetaDataset& meta) {
  if (meta.rows.empty())
    throw TrainingError("metaclassifier dataset is empty");
  int dim = meta.rows.front().features.size();
  if (dim <= 0) throw ShapeError("metaclassifier features are empty");
  for (const auto& row : meta.rows) {
    if (row.features.size() != dim)
      throw ShapeError("metaclassifier feature dims are inconsistent");
    if (row.label != 0 && row.label != 1)
      throw LabelError("metaclassifier labels must be 0 or 1");
  }
}

void require_both_labels(const MetaDataset& meta) {
  bool has0 = false, has1 = false;
  for (const auto& row : meta.rows) (row.label ? has1 : has0) = true;
  if (!has0 || !has1)
    throw TrainingError("metaclassifier dataset has a single label");
}

nn::Model train_softmax_meta(const MetaDataset& meta, const MetaArch& arch,
                             const std::vector<int>& hidden) {
  data::Dataset d = meta_to_dataset(meta);
  nn::TrainConfig cfg;
  cfg.epochs = arch.epochs;
  // Small shadow folds can drop below the configured batch size.
  cfg.batch_size =
      std::min(arch.batch_size, static_cast<int>(d.points.size()));
  cfg.learning_rate = arch.learning_rate;
  cfg.weight_decay = 0.0;
  cfg.lr_schedule = nn::LrSchedule::constant;
  cfg.seed = arch.seed;
  nn::Model m = nn::make_model<float>(d.feature_dim, hidden, 2,
                                      rng::derive(arch.seed, "meta_init"));
  for (int e = 0; e < cfg.epochs; ++e) m = nn::sgd_epoch(std::move(m), d, cfg, e);
  return m;
}

// Linear classifier under hinge loss on targets {-1,+1}; the margin is later
// mapped through a sigmoid to give a score in (0,1).
nn::Model train_svm_meta(const MetaDataset& meta, const MetaArch& arch) {
  const int dim = meta.rows.front().features.size();
  nn::Model m =
      nn::make_model<float>(dim, {}, 1, rng::derive(arch.seed, "meta_init"));
  auto& layer = m.layers.front();
  std::vector<size_t> order(meta.rows.size());
  std::iota(order.begin(), order.end(), size_t{0});
  const size_t batch =
      std::min<size_t>(static_cast<size_t>(std::max(arch.batch_size, 1)),
                       meta.rows.size());
  std::vector<float> wgrad(layer.weight.size());
  for (int e = 0; e < arch.epochs; ++e) {
    rng::Prng gen(rng::derive(arch.seed, "epoch_shuffle", e));
    gen.shuffle(order);
    for (size_t start = 0; start < order.size(); start += batch) {
      size_t stop = std::min(order.size(), start + batch);
      std::fill(wgrad.begin(), wgrad.end(), 0.0f);
      float bgrad = 0.0f;
      for (size_t r = start; r < stop; ++r) {
        const auto& row = meta.rows[order[r]];
        float t = row.label ? 1.0f : -1.0f;
        double margin = static_cast<double>(layer.bias[0]);
        for (int j = 0; j < dim; ++j)
          margin += static_cast<double>(layer.weight[static_cast<size_t>(j)]) *
                    row.features.values[static_cast<size_t>(j)];
        if (t * margin < 1.0) {
          for (int j = 0; j < dim; ++j)
            wgrad[static_cast<size_t>(j)] -=
                t * static_cast<float>(row.features.values[static_cast<size_t>(j)]);
          bgrad -= t;
        }
      }
      float scale_lr = static_cast<float>(arch.learning_rate) /
                       static_cast<float>(stop - start);
      for (int j = 0; j < dim; ++j)
        layer.weight[static_cast<size_t>(j)] -=
            scale_lr * wgrad[static_cast<size_t>(j)];
      layer.bias[0] -= scale_lr * bgrad;
    }
  }
  return m;
}

std::vector<float> to_float(const ScaledVector& v) {
  std::vector<float> out;
  out.reserve(v.values.size());
  for (double x : v.values) out.push_back(static_cast<float>(x));
  return out;
}

double mean_view_score(const MetaModel& meta, const nn::Model& target,
                       const std::vector<std::vector<float>>& inputs) {
  double sum = 0.0;
  for (const auto& input : inputs)
    sum += meta.score(scale(nn::predict(target, input)));
  return sum / static_cast<double>(inputs.size());
}

}  // namespace

// ---- enum parsing ----

MetaKind parse_meta_kind(const std::string& s) {
  if (s == "mlp") return MetaKind::mlp;
  if (s == "logistic") return MetaKind::logistic;
  if (s == "linear_svm") return MetaKind::linear_svm;
  if (s == "knn") return MetaKind::knn;
  throw ConfigError("unknown metaclassifier kind '" + s + "'");
}

std::string to_string(MetaKind kind) {
  switch (kind) {
    case MetaKind::mlp: return "mlp";
    case MetaKind::logistic: return "logistic";
    case MetaKind::linear_svm: return "linear_svm";
    case MetaKind::knn: return "knn";
  }
  throw ConfigError("invalid metaclassifier kind");
}

KRule parse_k_rule(const std::string& s) {
  if (s == "sqrt_n") return KRule::sqrt_n;
  if (s == "n_shadow") return KRule::n_shadow;
  if (s == "fixed") return KRule::fixed;
  throw ConfigError("unknown k rule '" + s + "'");
}

std::string to_string(KRule rule) {
  switch (rule) {
    case KRule::sqrt_n: return "sqrt_n";
    case KRule::n_shadow: return "n_shadow";
    case KRule::fixed: return "fixed";
  }
  throw ConfigError("invalid k rule");
}

// ---- scaling and views ----

ScaledVector scale(const nn::PredictionVector& pred) {
  if (pred.probs.empty()) throw ShapeError("empty prediction vector");
  ScaledVector out;
  out.values.reserve(pred.probs.size());
  for (double p : pred.probs) {
    double c = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
    out.values.push_back(logit(c));
  }
  return out;
}

std::vector<std::vector<float>> augmented_views(const std::vector<float>& x,
                                                int m, double strength,
                                                uint64_t master_seed) {
  if (m < 1) throw SizeError("view count must be at least 1");
  std::vector<std::vector<float>> views;
  views.reserve(static_cast<size_t>(m));
  for (int j = 0; j < m; ++j)
    views.push_back(data::augment(x, j, strength, master_seed));
  return views;
}

std::vector<nn::PredictionVector> query_views(const nn::Model& model,
                                              const std::vector<float>& x,
                                              int m, double strength,
                                              uint64_t master_seed) {
  auto inputs = augmented_views(x, m, strength, master_seed);
  std::vector<nn::PredictionVector> preds;
  preds.reserve(inputs.size());
  for (const auto& input : inputs) preds.push_back(nn::predict(model, input));
  return preds;
}

// ---- Gaussian machinery ----

GaussianFit fit_gaussian(const std::vector<std::vector<double>>& samples,
                         double ridge) {
  if (samples.size() < 2)
    throw FitError("gaussian fit needs at least 2 samples, got " +
                   std::to_string(samples.size()));
  if (ridge <= 0.0) throw ConfigError("ridge must be positive");
  const int dim = static_cast<int>(samples.front().size());
  if (dim == 0) throw ShapeError("gaussian fit on empty vectors");
  for (const auto& s : samples)
    if (static_cast<int>(s.size()) != dim)
      throw ShapeError("gaussian fit samples have inconsistent dims");

  GaussianFit fit;
  fit.dim = dim;
  fit.mean.assign(static_cast<size_t>(dim), 0.0);
  for (const auto& s : samples)
    for (int i = 0; i < dim; ++i) fit.mean[static_cast<size_t>(i)] += s[static_cast<size_t>(i)];
  for (int i = 0; i < dim; ++i)
    fit.mean[static_cast<size_t>(i)] /= static_cast<double>(samples.size());

  fit.covariance.assign(static_cast<size_t>(dim) * dim, 0.0);
  for (const auto& s : samples)
    for (int i = 0; i < dim; ++i) {
      double di = s[static_cast<size_t>(i)] - fit.mean[static_cast<size_t>(i)];
      for (int j = 0; j <= i; ++j) {
        double dj = s[static_cast<size_t>(j)] - fit.mean[static_cast<size_t>(j)];
        fit.covariance[static_cast<size_t>(i) * dim + j] += di * dj;
      }
    }
  double denom = static_cast<double>(samples.size() - 1);
  for (int i = 0; i < dim; ++i)
    for (int j = 0; j <= i; ++j) {
      double v = fit.covariance[static_cast<size_t>(i) * dim + j] / denom;
      if (i == j) v += ridge;
      fit.covariance[static_cast<size_t>(i) * dim + j] = v;
      fit.covariance[static_cast<size_t>(j) * dim + i] = v;
    }
  return fit;
}

double log_gaussian_pdf(const GaussianFit& fit,
                        const std::vector<double>& obs) {
  if (static_cast<int>(obs.size()) != fit.dim)
    throw ShapeError("observation dim does not match gaussian fit");
  constexpr double kLog2Pi = 1.8378770664093454836;
  double logdet = 0.0;
  double quad = cholesky_quad_and_logdet(fit, obs, logdet);
  return -0.5 * (quad + logdet + fit.dim * kLog2Pi);
}

double log_likelihood_ratio(const GaussianFit& fit_in,
                            const GaussianFit& fit_out,
                            const std::vector<double>& obs) {
  return log_gaussian_pdf(fit_in, obs) - log_gaussian_pdf(fit_out, obs);
}

double lira_log_ratio(const std::vector<double>& target_stat,
                      const std::vector<std::vector<double>>& in_stats,
                      const std::vector<std::vector<double>>& out_stats,
                      double ridge, const std::string& context) {
  if (in_stats.empty() || out_stats.empty())
    throw DegenerateSplitError("degenerate shadow split for " + context +
                               ": " + std::to_string(in_stats.size()) +
                               " IN / " + std::to_string(out_stats.size()) +
                               " OUT");
  GaussianFit fit_in = fit_gaussian(in_stats, ridge);
  GaussianFit fit_out = fit_gaussian(out_stats, ridge);
  return log_likelihood_ratio(fit_in, fit_out, target_stat);
}

// ---- likelihood-ratio attacks ----

double adapted_lira_log(const nn::Model& target_finetuned,
                        const data::Point& x,
                        const shadow::AttackerView& view, int m,
                        double aug_strength, double ridge,
                        uint64_t master_seed) {
  nn::PredictionVector raw = nn::predict(target_finetuned, x.x);
  int yhat = argmax_lowest(raw.probs);

  auto inputs = augmented_views(x.x, m, aug_strength, master_seed);
  std::vector<double> target_stat;
  target_stat.reserve(inputs.size());
  for (const auto& input : inputs) {
    ScaledVector s = scale(nn::predict(target_finetuned, input));
    target_stat.push_back(s.values[static_cast<size_t>(yhat)]);
  }

  std::vector<std::vector<double>> in_stats, out_stats;
  shadow_statistics(x, view, m, aug_strength, master_seed, yhat,
                    /*pretrained=*/false, in_stats, out_stats);
  return lira_log_ratio(target_stat, in_stats, out_stats, ridge,
                        "challenge id " + std::to_string(x.id));
}

double adapted_lira(const nn::Model& target_finetuned, const data::Point& x,
                    const shadow::AttackerView& view, int m,
                    double aug_strength, double ridge, uint64_t master_seed) {
  return std::exp(adapted_lira_log(target_finetuned, x, view, m, aug_strength,
                                   ridge, master_seed));
}

double direct_lira_log(const nn::Model& target_pretrained,
                       const data::Point& x,
                       const shadow::AttackerView& view, int m,
                       double aug_strength, double ridge,
                       uint64_t master_seed) {
  if (x.y < 0 || x.y >= target_pretrained.class_count)
    throw LabelError("challenge label outside pretrained class range");
  auto inputs = augmented_views(x.x, m, aug_strength, master_seed);
  std::vector<double> target_stat;
  target_stat.reserve(inputs.size());
  for (const auto& input : inputs) {
    ScaledVector s = scale(nn::predict(target_pretrained, input));
    target_stat.push_back(s.values[static_cast<size_t>(x.y)]);
  }

  std::vector<std::vector<double>> in_stats, out_stats;
  shadow_statistics(x, view, m, aug_strength, master_seed, x.y,
                    /*pretrained=*/true, in_stats, out_stats);
  return lira_log_ratio(target_stat, in_stats, out_stats, ridge,
                        "challenge id " + std::to_string(x.id));
}

// ---- metaclassifier attacks ----

MetaDataset collect_meta_rows(const data::Point& x,
                              const shadow::AttackerView& view, int m,
                              double aug_strength, uint64_t master_seed) {
  auto inputs = augmented_views(x.x, m, aug_strength, master_seed);
  MetaDataset meta;
  meta.challenge_id = x.id;
  meta.rows.reserve(view.size() * inputs.size());
  for (size_t i = 0; i < view.size(); ++i) {
    int bit = view.is_member(i, x.id) ? 1 : 0;
    const nn::Model& model = view.finetuned(i);
    for (const auto& input : inputs)
      meta.rows.push_back(MetaRow{scale(nn::predict(model, input)), bit});
  }
  return meta;
}

MetaDataset build_meta_dataset(const data::Point& x,
                               const shadow::AttackerView& view, int m,
                               double aug_strength, uint64_t master_seed) {
  MetaDataset meta = collect_meta_rows(x, view, m, aug_strength, master_seed);
  bool has0 = false, has1 = false;
  for (const auto& row : meta.rows) (row.label ? has1 : has0) = true;
  if (!has0 || !has1)
    throw DegenerateSplitError(
        "degenerate shadow split for challenge id " + std::to_string(x.id) +
        ": " + (has1 ? "all IN" : "all OUT"));
  return meta;
}

int resolve_k(const MetaArch& arch, size_t n_rows, int n_attacker) {
  int k = 0;
  switch (arch.k_rule) {
    case KRule::sqrt_n:
      k = static_cast<int>(std::floor(std::sqrt(static_cast<double>(n_rows))));
      break;
    case KRule::n_shadow:
      if (n_attacker <= 0)
        throw ConfigError("k rule n_shadow needs the attacker model count");
      k = n_attacker;
      break;
    case KRule::fixed:
      k = arch.fixed_k;
      break;
  }
  if (k < 1) k = 1;
  return k;
}

MetaModel train_metaclassifier(const MetaDataset& meta, const MetaArch& arch,
                               int n_attacker) {
  check_meta_rows(meta);
  MetaModel model;
  model.arch = arch;
  switch (arch.kind) {
    case MetaKind::mlp:
      require_both_labels(meta);
      if (arch.hidden <= 0)
        throw ConfigError("mlp metaclassifier needs a positive hidden width");
      model.net = train_softmax_meta(meta, arch, {arch.hidden});
      break;
    case MetaKind::logistic:
      require_both_labels(meta);
      model.net = train_softmax_meta(meta, arch, {});
      break;
    case MetaKind::linear_svm:
      require_both_labels(meta);
      model.net = train_svm_meta(meta, arch);
      break;
    case MetaKind::knn:
      model.k = resolve_k(arch, meta.rows.size(), n_attacker);
      if (meta.rows.size() < static_cast<size_t>(model.k))
        throw TrainingError("knn needs at least k=" + std::to_string(model.k) +
                            " rows, got " + std::to_string(meta.rows.size()));
      model.data = meta;
      break;
  }
  return model;
}

double MetaModel::score(const ScaledVector& features) const {
  switch (arch.kind) {
    case MetaKind::mlp:
    case MetaKind::logistic: {
      nn::PredictionVector p = nn::predict(net, to_float(features));
      return p.probs[1];
    }
    case MetaKind::linear_svm: {
      std::vector<float> margin = nn::forward(net, std::span<const float>(
          to_float(features)));
      double mgn = static_cast<double>(margin[0]);
      return 1.0 / (1.0 + std::exp(-mgn));
    }
    case MetaKind::knn: {
      if (data.rows.empty()) throw TrainingError("knn store is empty");
      if (features.size() != data.rows.front().features.size())
        throw ShapeError("knn query dim does not match neighbor store");
      std::vector<std::pair<double, size_t>> dist;
      dist.reserve(data.rows.size());
      for (size_t r = 0; r < data.rows.size(); ++r) {
        double d2 = 0.0;
        const auto& f = data.rows[r].features.values;
        for (size_t j = 0; j < f.size(); ++j) {
          double d = features.values[j] - f[j];
          d2 += d * d;
        }
        dist.emplace_back(d2, r);
      }
      std::sort(dist.begin(), dist.end());
      double sum = 0.0;
      for (int i = 0; i < k; ++i)
        sum += data.rows[dist[static_cast<size_t>(i)].second].label;
      return sum / static_cast<double>(k);
    }
  }
  throw ConfigError("invalid metaclassifier kind");
}

double tmi_score(const nn::Model& target_finetuned, const data::Point& x,
                 const shadow::AttackerView& view, int m, double aug_strength,
                 const MetaArch& arch, uint64_t master_seed) {
  MetaDataset meta = build_meta_dataset(x, view, m, aug_strength, master_seed);
  MetaArch seeded = arch;
  seeded.seed = rng::derive(master_seed, "meta", x.id);
  MetaModel model =
      train_metaclassifier(meta, seeded, static_cast<int>(view.size()));
  auto inputs = augmented_views(x.x, m, aug_strength, master_seed);
  return mean_view_score(model, target_finetuned, inputs);
}

std::map<uint64_t, double> global_tmi(const nn::Model& target_finetuned,
                                      const std::vector<data::Point>& challenges,
                                      const shadow::AttackerView& view, int m,
                                      double aug_strength, const MetaArch& arch,
                                      uint64_t master_seed) {
  if (challenges.empty())
    throw InputError("global attack needs at least one challenge point");
  MetaDataset pooled;
  for (const auto& x : challenges) {
    MetaDataset rows = collect_meta_rows(x, view, m, aug_strength, master_seed);
    pooled.rows.insert(pooled.rows.end(),
                       std::make_move_iterator(rows.rows.begin()),
                       std::make_move_iterator(rows.rows.end()));
  }
  MetaArch seeded = arch;
  seeded.seed = rng::derive(master_seed, "meta_global");
  MetaModel model =
      train_metaclassifier(pooled, seeded, static_cast<int>(view.size()));
  std::map<uint64_t, double> scores;
  for (const auto& x : challenges) {
    auto inputs = augmented_views(x.x, m, aug_strength, master_seed);
    scores[x.id] = mean_view_score(model, target_finetuned, inputs);
  }
  return scores;
}

// ---- output perturbation ----

nn::PredictionVector topk_mask(const nn::PredictionVector& pred, int k) {
  const int K = pred.size();
  if (K == 0) throw ShapeError("empty prediction vector");
  if (k < 1 || k > K)
    throw MaskError("top-k " + std::to_string(k) + " outside [1, " +
                    std::to_string(K) + "]");
  if (k == K) return pred;
  std::vector<int> idx(static_cast<size_t>(K));
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    double pa = pred.probs[static_cast<size_t>(a)];
    double pb = pred.probs[static_cast<size_t>(b)];
    if (pa != pb) return pa > pb;
    return a < b;
  });
  double kept = 0.0;
  for (int i = 0; i < k; ++i) kept += pred.probs[static_cast<size_t>(idx[static_cast<size_t>(i)])];
  double fill = (1.0 - kept) / static_cast<double>(K - k);
  nn::PredictionVector out;
  out.probs.assign(static_cast<size_t>(K), fill);
  for (int i = 0; i < k; ++i) {
    int j = idx[static_cast<size_t>(i)];
    out.probs[static_cast<size_t>(j)] = pred.probs[static_cast<size_t>(j)];
  }
  return out;
}

}  // namespace ptleak::attack
