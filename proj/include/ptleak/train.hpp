#pragma once

// Pretraining and finetuning pipelines, including head replacement, layer
// freezing strategies, and a DP-SGD variant (per-example clipping + Gaussian
// noise per lot) for the finetuning stage.

#include <cstdint>
#include <optional>
#include <vector>

#include "ptleak/data.hpp"
#include "ptleak/nn.hpp"

namespace ptleak::train {

enum class StrategyKind { feature_extraction, last_k_layers, full };

struct FinetuneStrategy {
  StrategyKind kind = StrategyKind::feature_extraction;
  int last_k = 1;              // only for last_k_layers
  uint64_t head_init_seed = 0;
  bool operator==(const FinetuneStrategy&) const = default;
};

// DP-SGD over the classification head. Per-example gradients are clipped to
// clip_norm; each lot's summed gradient gets N(0, (noise_multiplier *
// clip_norm)^2 I) noise before the averaged update is applied. Weight decay
// is added after averaging, outside the clipped quantity, so noise_multiplier
// = 0 with a non-binding clip reduces exactly to plain head-only SGD.
struct DPConfig {
  double clip_norm = 1.0;
  double noise_multiplier = 0.0;
  int lot_size = 1;
  int epochs = 1;
  std::optional<double> declared_epsilon;
  std::optional<double> declared_delta;
  bool operator==(const DPConfig&) const = default;
};

struct DpStats {
  double max_clipped_grad_norm = 0.0;
  long long example_count = 0;
};

// Fresh model trained on `subset` with cfg.epochs SGD epochs. Model dims come
// from the dataset; cfg.seed drives init and every epoch shuffle.
nn::Model pretrain(const data::Dataset& subset, const nn::TrainConfig& cfg,
                   const std::vector<int>& hidden = {64, 32});
// Same, validating the dataset against its generating spec first.
nn::Model pretrain(const data::DistributionSpec& spec,
                   const data::Dataset& subset, const nn::TrainConfig& cfg,
                   const std::vector<int>& hidden = {64, 32});

// Copy of g with the final layer replaced by a freshly initialized affine
// layer with new_class_count outputs. Earlier layers are copied verbatim.
nn::Model replace_head(const nn::Model& g, int new_class_count, uint64_t seed);

// replace_head + freeze per strategy + cfg.epochs SGD epochs on d_ft. The new
// head's output count is d_ft.class_count.
nn::Model finetune(const nn::Model& g, const data::Dataset& d_ft,
                   const FinetuneStrategy& strategy,
                   const nn::TrainConfig& cfg);

// Head-only DP-SGD finetuning (the strategy is implicitly feature
// extraction). dp.epochs governs the epoch count; cfg supplies learning rate,
// schedule, weight decay, and the seed.
nn::Model dp_finetune(const nn::Model& g, const data::Dataset& d_ft,
                      const DPConfig& dp, const nn::TrainConfig& cfg,
                      DpStats* stats = nullptr);

// Fraction of points whose argmax prediction equals the label.
double evaluate_accuracy(const nn::Model& m, const data::Dataset& dataset);

}  // namespace ptleak::train
