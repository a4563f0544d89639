#pragma once

// Membership-inference attacks against finetuned models. Confidence scaling,
// the adapted likelihood-ratio baseline (IN/OUT Gaussian fits over scaled
// confidences at the target's predicted label), a direct variant run on
// pretrained models at the true label, and the transfer attack: per-point
// metaclassifiers trained on shadow prediction vectors, plus a pooled global
// variant. Includes the metaclassifier zoo and top-k confidence masking.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ptleak/data.hpp"
#include "ptleak/nn.hpp"
#include "ptleak/shadow.hpp"

namespace ptleak::attack {

// Probabilities are clamped to this range before the logit; keeps scaled
// confidences finite on saturated predictions.
inline constexpr double kProbClamp = 1e-7;
inline constexpr double kDefaultRidge = 1e-6;

// Componentwise logit of a clamped prediction vector.
struct ScaledVector {
  std::vector<double> values;
  bool operator==(const ScaledVector&) const = default;
  int size() const { return static_cast<int>(values.size()); }
};

struct MetaRow {
  ScaledVector features;
  int label = 0;  // 0 = OUT, 1 = IN
  bool operator==(const MetaRow&) const = default;
};

struct MetaDataset {
  std::vector<MetaRow> rows;
  std::optional<uint64_t> challenge_id;  // absent for the pooled variant
  bool operator==(const MetaDataset&) const = default;
  size_t size() const { return rows.size(); }
};

// Mean + full covariance with a ridge term on the diagonal.
struct GaussianFit {
  int dim = 0;
  std::vector<double> mean;        // dim
  std::vector<double> covariance;  // dim x dim, row-major
  bool operator==(const GaussianFit&) const = default;
};

enum class MetaKind { mlp, logistic, linear_svm, knn };
enum class KRule { sqrt_n, n_shadow, fixed };

MetaKind parse_meta_kind(const std::string& s);
std::string to_string(MetaKind kind);
KRule parse_k_rule(const std::string& s);
std::string to_string(KRule rule);

struct MetaArch {
  MetaKind kind = MetaKind::mlp;
  int hidden = 32;              // mlp only
  int epochs = 200;             // gradient-trained kinds
  int batch_size = 32;
  double learning_rate = 0.01;
  KRule k_rule = KRule::sqrt_n;  // knn only
  int fixed_k = 1;               // knn with k_rule == fixed
  uint64_t seed = 0;
  bool operator==(const MetaArch&) const = default;
};

// Trained binary metaclassifier; scores are always in [0,1].
struct MetaModel {
  MetaArch arch;
  nn::Model net;     // mlp / logistic (2-way softmax), linear_svm (1 margin)
  MetaDataset data;  // knn neighbor store
  int k = 0;         // knn: resolved neighbor count
  double score(const ScaledVector& features) const;
};

// ---- scaling and views ----

// clamp to [kProbClamp, 1-kProbClamp], then logit componentwise.
ScaledVector scale(const nn::PredictionVector& pred);

// The M augmented inputs every model is queried with for challenge point x:
// view 0 is x itself, later views are keyed augmentations. All models see
// identical views, which is what lets prediction caching work.
std::vector<std::vector<float>> augmented_views(const std::vector<float>& x,
                                                int m, double strength,
                                                uint64_t master_seed);

// softmax(forward(model, view j)) for each of the M views.
std::vector<nn::PredictionVector> query_views(const nn::Model& model,
                                              const std::vector<float>& x,
                                              int m, double strength,
                                              uint64_t master_seed);

// ---- Gaussian machinery ----

// Sample mean and unbiased sample covariance plus ridge * I. Needs >= 2
// samples of equal dimension.
GaussianFit fit_gaussian(const std::vector<std::vector<double>>& samples,
                         double ridge);

// log N(obs | fit), via Cholesky of the covariance.
double log_gaussian_pdf(const GaussianFit& fit,
                        const std::vector<double>& obs);

// log p(obs | fit_in) - log p(obs | fit_out).
double log_likelihood_ratio(const GaussianFit& fit_in,
                            const GaussianFit& fit_out,
                            const std::vector<double>& obs);

// Pure core shared by both likelihood-ratio attacks and the cached pipeline
// path: fits IN/OUT Gaussians to the shadow statistics and evaluates the
// ratio at the target statistic. Throws DegenerateSplitError (with
// `context` in the message) when either side is empty; FitError when a side
// has a single sample.
double lira_log_ratio(const std::vector<double>& target_stat,
                      const std::vector<std::vector<double>>& in_stats,
                      const std::vector<std::vector<double>>& out_stats,
                      double ridge, const std::string& context);

// ---- likelihood-ratio attacks ----

// Attacks the finetuned target at its own predicted label (argmax of the raw
// prediction on the unaugmented point; ties go to the lowest index). The
// statistic is the M-vector of scaled confidences at that label across the
// M views; IN/OUT fits come from the attacker's shadow finetuned models.
// Returns the log likelihood ratio.
double adapted_lira_log(const nn::Model& target_finetuned,
                        const data::Point& x,
                        const shadow::AttackerView& view, int m,
                        double aug_strength, double ridge,
                        uint64_t master_seed);
// exp() of the above — the ratio itself.
double adapted_lira(const nn::Model& target_finetuned, const data::Point& x,
                    const shadow::AttackerView& view, int m,
                    double aug_strength, double ridge, uint64_t master_seed);

// Same machinery against the pretrained models at the true label of x
// (upper-bound baseline: the adversary sees the pretrained target itself).
double direct_lira_log(const nn::Model& target_pretrained,
                       const data::Point& x,
                       const shadow::AttackerView& view, int m,
                       double aug_strength, double ridge,
                       uint64_t master_seed);

// ---- metaclassifier attacks ----

// One row per (shadow finetuned model, view): (scale(prediction), membership
// bit of x for that shadow). Row order is shadow-major, view-minor. Throws
// DegenerateSplitError unless both labels occur.
MetaDataset build_meta_dataset(const data::Point& x,
                               const shadow::AttackerView& view, int m,
                               double aug_strength, uint64_t master_seed);

// Same rows without the both-labels requirement (used for pooling).
MetaDataset collect_meta_rows(const data::Point& x,
                              const shadow::AttackerView& view, int m,
                              double aug_strength, uint64_t master_seed);

// knn neighbor count under the arch's k-rule for a dataset of n_rows built
// from n_attacker shadow models.
int resolve_k(const MetaArch& arch, size_t n_rows, int n_attacker);

// Gradient-trained kinds need both labels; knn needs at least k rows.
MetaModel train_metaclassifier(const MetaDataset& meta, const MetaArch& arch,
                               int n_attacker = 0);

// Per-point attack: build D_meta for x, train a metaclassifier (seeded by
// derive(master_seed, "meta", x.id)), score the target's M scaled views,
// return the mean score.
double tmi_score(const nn::Model& target_finetuned, const data::Point& x,
                 const shadow::AttackerView& view, int m, double aug_strength,
                 const MetaArch& arch, uint64_t master_seed);

// Pooled variant: one metaclassifier over all challenge points' rows (seeded
// by derive(master_seed, "meta_global")), then per-challenge mean view score.
std::map<uint64_t, double> global_tmi(const nn::Model& target_finetuned,
                                      const std::vector<data::Point>& challenges,
                                      const shadow::AttackerView& view, int m,
                                      double aug_strength, const MetaArch& arch,
                                      uint64_t master_seed);

// ---- output perturbation ----

// Keep the k most confident entries (ties to the lower index); spread the
// leftover mass 1 - sum(top-k) evenly over the other K-k entries. k == K is
// the identity.
nn::PredictionVector topk_mask(const nn::PredictionVector& pred, int k);

}  // namespace ptleak::attack
