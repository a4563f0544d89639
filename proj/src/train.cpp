#include "ptleak/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ptleak/rng.hpp"

namespace ptleak::train {

nn::Model pretrain(const data::Dataset& subset, const nn::TrainConfig& cfg,
                   const std::vector<int>& hidden) {
  data::validate_dataset(subset);
  if (subset.points.empty()) throw EmptyDataError("pretrain: empty dataset");
  if (cfg.epochs < 0) throw ConfigError("epochs must be nonnegative");
  nn::Model m = nn::make_model<float>(subset.feature_dim, hidden,
                                      subset.class_count,
                                      rng::derive(cfg.seed, "pretrain_init"));
  for (int e = 0; e < cfg.epochs; ++e)
    m = nn::sgd_epoch(std::move(m), subset, cfg, e);
  return m;
}

nn::Model pretrain(const data::DistributionSpec& spec,
                   const data::Dataset& subset, const nn::TrainConfig& cfg,
                   const std::vector<int>& hidden) {
  if (subset.feature_dim != spec.feature_dim)
    throw ShapeError("dataset feature_dim does not match spec");
  if (subset.class_count != spec.class_count)
    throw ClassCountError("dataset class_count does not match spec");
  return pretrain(subset, cfg, hidden);
}

nn::Model replace_head(const nn::Model& g, int new_class_count,
                       uint64_t seed) {
  nn::validate_model(g);
  if (new_class_count <= 0)
    throw ClassCountError("new class count must be positive");
  nn::Model m = g;
  nn::AffineLayer& head = m.layers.back();
  head.out = new_class_count;
  head.weight.resize(static_cast<size_t>(head.in) * new_class_count);
  head.bias.assign(static_cast<size_t>(new_class_count), 0.0f);
  rng::Prng gen(rng::derive(seed, "head_init"));
  double std_dev = std::sqrt(2.0 / static_cast<double>(head.in));
  for (auto& w : head.weight)
    w = static_cast<float>(gen.normal() * std_dev);
  m.class_count = new_class_count;
  m.freeze_flags.back() = 0;
  return m;
}

namespace {

void apply_freeze(nn::Model& m, const FinetuneStrategy& strategy) {
  const int L = m.layer_count();
  switch (strategy.kind) {
    case StrategyKind::feature_extraction:
      for (int l = 0; l < L; ++l)
        m.freeze_flags[static_cast<size_t>(l)] = (l < L - 1) ? 1 : 0;
      return;
    case StrategyKind::last_k_layers: {
      if (strategy.last_k < 1 || strategy.last_k > L)
        throw StrategyError("last_k must be in [1, layer_count]");
      for (int l = 0; l < L; ++l)
        m.freeze_flags[static_cast<size_t>(l)] =
            (l < L - strategy.last_k) ? 1 : 0;
      return;
    }
    case StrategyKind::full:
      std::fill(m.freeze_flags.begin(), m.freeze_flags.end(), 0);
      return;
  }
  throw StrategyError("unknown finetune strategy");
}

}  // namespace

nn::Model finetune(const nn::Model& g, const data::Dataset& d_ft,
                   const FinetuneStrategy& strategy,
                   const nn::TrainConfig& cfg) {
  data::validate_dataset(d_ft);
  if (d_ft.points.empty()) throw EmptyDataError("finetune: empty dataset");
  nn::Model m = replace_head(g, d_ft.class_count, strategy.head_init_seed);
  apply_freeze(m, strategy);
  for (int e = 0; e < cfg.epochs; ++e)
    m = nn::sgd_epoch(std::move(m), d_ft, cfg, e);
  return m;
}

nn::Model dp_finetune(const nn::Model& g, const data::Dataset& d_ft,
                      const DPConfig& dp, const nn::TrainConfig& cfg,
                      DpStats* stats) {
  data::validate_dataset(d_ft);
  if (d_ft.points.empty()) throw EmptyDataError("dp_finetune: empty dataset");
  if (!(dp.clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
  if (dp.noise_multiplier < 0.0)
    throw ConfigError("noise_multiplier must be nonnegative");
  if (dp.lot_size <= 0) throw ConfigError("lot_size must be positive");
  if (static_cast<size_t>(dp.lot_size) > d_ft.points.size())
    throw ConfigError("lot_size exceeds dataset size");
  if (dp.epochs < 0) throw ConfigError("epochs must be nonnegative");

  nn::Model m = replace_head(g, d_ft.class_count,
                             rng::derive(cfg.seed, "dp_head"));
  FinetuneStrategy fe;  // head only
  apply_freeze(m, fe);
  const int head = m.layer_count() - 1;
  auto& H = m.layers[static_cast<size_t>(head)];
  const size_t wsize = H.weight.size();
  const size_t bsize = H.bias.size();

  nn::TrainConfig lr_cfg = cfg;
  lr_cfg.epochs = dp.epochs;  // schedule spans the DP epoch count

  nn::GradientsT<float> per_example = nn::zero_gradients(m);
  std::vector<float> sum_w(wsize), sum_b(bsize);
  nn::BackpropContext<float> ctx(m);
  if (stats) *stats = DpStats{};

  std::vector<size_t> order(d_ft.points.size());
  for (int e = 0; e < dp.epochs; ++e) {
    double lr = nn::scheduled_lr(lr_cfg, e);
    std::iota(order.begin(), order.end(), size_t{0});
    rng::Prng shuffler(rng::derive(cfg.seed, "epoch_shuffle", e));
    shuffler.shuffle(order);
    const size_t n = order.size();
    const size_t lot = static_cast<size_t>(dp.lot_size);
    size_t lot_index = 0;
    for (size_t start = 0; start < n; start += lot, ++lot_index) {
      size_t stop = std::min(n, start + lot);
      std::fill(sum_w.begin(), sum_w.end(), 0.0f);
      std::fill(sum_b.begin(), sum_b.end(), 0.0f);
      for (size_t i = start; i < stop; ++i) {
        auto& gw = per_example.layers[static_cast<size_t>(head)].weight;
        auto& gb = per_example.layers[static_cast<size_t>(head)].bias;
        std::fill(gw.begin(), gw.end(), 0.0f);
        std::fill(gb.begin(), gb.end(), 0.0f);
        const auto& p = d_ft.points[order[i]];
        ctx.accumulate(m, std::span<const float>(p.x), p.y, per_example,
                       head);
        double norm2 = 0.0;
        for (float v : gw) norm2 += static_cast<double>(v) * v;
        for (float v : gb) norm2 += static_cast<double>(v) * v;
        double norm = std::sqrt(norm2);
        double scale =
            norm > dp.clip_norm ? dp.clip_norm / norm : 1.0;
        if (stats) {
          stats->max_clipped_grad_norm =
              std::max(stats->max_clipped_grad_norm, norm * scale);
          ++stats->example_count;
        }
        float fscale = static_cast<float>(scale);
        kernels::active().axpy(fscale, gw.data(), sum_w.data(), wsize);
        kernels::active().axpy(fscale, gb.data(), sum_b.data(), bsize);
      }
      if (dp.noise_multiplier > 0.0) {
        rng::Prng noise(rng::derive(cfg.seed, "dp_noise", e,
                                    static_cast<uint64_t>(lot_index)));
        double sigma = dp.noise_multiplier * dp.clip_norm;
        for (auto& v : sum_w)
          v = static_cast<float>(v + noise.normal() * sigma);
        for (auto& v : sum_b)
          v = static_cast<float>(v + noise.normal() * sigma);
      }
      float inv_m = 1.0f / static_cast<float>(stop - start);
      float lambda = static_cast<float>(cfg.weight_decay);
      float flr = static_cast<float>(lr);
      kernels::active().sgd_update(H.weight.data(), sum_w.data(), flr, inv_m,
                                   lambda, wsize);
      kernels::active().sgd_update(H.bias.data(), sum_b.data(), flr, inv_m,
                                   lambda, bsize);
    }
  }
  return m;
}

double evaluate_accuracy(const nn::Model& m, const data::Dataset& dataset) {
  data::validate_dataset(dataset);
  if (dataset.points.empty())
    throw EmptyDataError("evaluate_accuracy: empty dataset");
  if (dataset.feature_dim != m.input_dim())
    throw ShapeError("dataset feature_dim does not match model input dim");
  long long hits = 0;
  for (const auto& p : dataset.points) {
    std::vector<float> logits = nn::forward(m, std::span<const float>(p.x));
    int arg = 0;
    for (int k = 1; k < static_cast<int>(logits.size()); ++k)
      if (logits[static_cast<size_t>(k)] > logits[static_cast<size_t>(arg)])
        arg = k;
    if (arg == p.y) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(dataset.points.size());
}

}  // namespace ptleak::train
