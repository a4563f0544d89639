#include <cmath>
#include <span>
#include <vector>

#include "doctest.h"
#include "ptleak/errors.hpp"
#include "ptleak/rng.hpp"
#include "ptleak/train.hpp"

using namespace ptleak;

namespace {

struct Task {
  data::DistributionSpec spec;
  data::Dataset pretrain_set;
  data::Dataset finetune_set;
};

Task easy_task(uint64_t seed) {
  Task t;
  // Small within-class covariance keeps the fine classes separable: their
  // means differ by unit-scale perturbations around the coarse centers.
  t.spec = data::make_pretrain_spec(4, 4, 2, 4.0, seed, 0.1);
  t.pretrain_set = data::sample_population(t.spec, 200, rng::derive(seed, "pt"));
  auto coarse = data::derive_task(t.spec, data::TaskKind::coarse, seed + 1);
  t.finetune_set = data::sample_population(coarse, 120, rng::derive(seed, "ft"));
  return t;
}

nn::TrainConfig quick_cfg(uint64_t seed, int epochs = 10) {
  nn::TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 20;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 1e-5;
  cfg.lr_schedule = nn::LrSchedule::cosine;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("pretrain with zero epochs returns the untouched initialization") {
  Task t = easy_task(1);
  nn::TrainConfig cfg = quick_cfg(5, 0);
  nn::Model m = train::pretrain(t.pretrain_set, cfg, {8});
  nn::Model init = nn::make_model<float>(
      t.pretrain_set.feature_dim, {8}, t.pretrain_set.class_count,
      rng::derive(cfg.seed, "pretrain_init"));
  CHECK(m == init);
}

TEST_CASE("pretrain learns a well-separated mixture") {
  Task t = easy_task(2);
  nn::Model m = train::pretrain(t.pretrain_set, quick_cfg(7, 60), {16, 8});
  CHECK(train::evaluate_accuracy(m, t.pretrain_set) >= 0.99);
}

TEST_CASE("pretrain spec overload validates dimensions") {
  Task t = easy_task(3);
  CHECK_NOTHROW(train::pretrain(t.spec, t.pretrain_set, quick_cfg(1, 1), {4}));

  data::Dataset wrong_dim = t.pretrain_set;
  wrong_dim.feature_dim = 9;
  for (auto& p : wrong_dim.points) p.x.resize(9, 0.0f);
  CHECK_THROWS_AS(train::pretrain(t.spec, wrong_dim, quick_cfg(1, 1), {4}),
                  ShapeError);

  data::Dataset wrong_classes = t.pretrain_set;
  wrong_classes.class_count = 7;
  CHECK_THROWS_AS(train::pretrain(t.spec, wrong_classes, quick_cfg(1, 1), {4}),
                  ClassCountError);
}

TEST_CASE("replace_head keeps the trunk bit-identical and reseeds the head") {
  Task t = easy_task(4);
  nn::Model g = train::pretrain(t.pretrain_set, quick_cfg(11, 5), {10, 6});

  nn::Model h = train::replace_head(g, 2, 99);
  REQUIRE(h.layer_count() == g.layer_count());
  CHECK(h.class_count == 2);
  CHECK(h.layers.back().out == 2);
  CHECK(h.layers.back().bias == std::vector<float>(2, 0.0f));
  for (int l = 0; l + 1 < g.layer_count(); ++l)
    CHECK(h.layers[static_cast<size_t>(l)] == g.layers[static_cast<size_t>(l)]);

  // Head init is seed-deterministic and seed-sensitive.
  nn::Model h2 = train::replace_head(g, 2, 99);
  CHECK(h == h2);
  nn::Model h3 = train::replace_head(g, 2, 100);
  CHECK(h.layers.back().weight != h3.layers.back().weight);

  CHECK_THROWS_AS(train::replace_head(g, 0, 1), ClassCountError);
}

TEST_CASE("feature extraction freezes the trunk") {
  Task t = easy_task(5);
  nn::Model g = train::pretrain(t.pretrain_set, quick_cfg(13, 8), {10, 6});

  train::FinetuneStrategy fe;  // defaults to feature_extraction
  fe.head_init_seed = 21;
  nn::Model m = train::finetune(g, t.finetune_set, fe, quick_cfg(22, 8));

  // Trunk layers are untouched bit for bit.
  for (int l = 0; l + 1 < g.layer_count(); ++l)
    CHECK(m.layers[static_cast<size_t>(l)] == g.layers[static_cast<size_t>(l)]);
  // The head actually trained (bias moved off its zero init).
  CHECK(m.layers.back().bias != std::vector<float>(2, 0.0f));

  // Grafting the pretrained head back onto the finetuned trunk reproduces
  // the pretrained model's logits exactly, proving the trunk never moved.
  nn::Model grafted = m;
  grafted.layers.back() = g.layers.back();
  grafted.class_count = g.class_count;
  rng::Prng gen(777);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<float> x(4);
    for (auto& v : x) v = static_cast<float>(gen.normal());
    auto a = nn::forward(grafted, std::span<const float>(x));
    auto b = nn::forward(g, std::span<const float>(x));
    CHECK(a == b);
  }
}

TEST_CASE("last_k_layers(1) equals feature extraction") {
  Task t = easy_task(6);
  nn::Model g = train::pretrain(t.pretrain_set, quick_cfg(31, 6), {8, 4});

  train::FinetuneStrategy fe;
  fe.kind = train::StrategyKind::feature_extraction;
  fe.head_init_seed = 3;
  train::FinetuneStrategy lk;
  lk.kind = train::StrategyKind::last_k_layers;
  lk.last_k = 1;
  lk.head_init_seed = 3;

  nn::Model a = train::finetune(g, t.finetune_set, fe, quick_cfg(44, 6));
  nn::Model b = train::finetune(g, t.finetune_set, lk, quick_cfg(44, 6));
  CHECK(a == b);
}

TEST_CASE("last_k beyond the layer count is rejected") {
  Task t = easy_task(7);
  nn::Model g = train::pretrain(t.pretrain_set, quick_cfg(3, 2), {8, 4});
  train::FinetuneStrategy s;
  s.kind = train::StrategyKind::last_k_layers;
  s.last_k = 4;  // model has 3 layers
  CHECK_THROWS_AS(train::finetune(g, t.finetune_set, s, quick_cfg(1, 1)),
                  StrategyError);
  s.last_k = 0;
  CHECK_THROWS_AS(train::finetune(g, t.finetune_set, s, quick_cfg(1, 1)),
                  StrategyError);
}

TEST_CASE("full finetuning moves every layer") {
  Task t = easy_task(8);
  nn::Model g = train::pretrain(t.pretrain_set, quick_cfg(17, 6), {8, 4});
  train::FinetuneStrategy full;
  full.kind = train::StrategyKind::full;
  full.head_init_seed = 5;
  nn::Model m = train::finetune(g, t.finetune_set, full, quick_cfg(23, 8));
  for (int l = 0; l + 1 < g.layer_count(); ++l)
    CHECK(m.layers[static_cast<size_t>(l)].weight !=
          g.layers[static_cast<size_t>(l)].weight);
}

TEST_CASE("dp_finetune with zero noise and a loose clip reduces to plain SGD") {
  Task t = easy_task(9);
  nn::Model g = train::pretrain(t.pretrain_set, quick_cfg(41, 6), {10, 5});

  train::DPConfig dp;
  dp.clip_norm = 1e9;  // never binds
  dp.noise_multiplier = 0.0;
  dp.lot_size = 24;
  dp.epochs = 7;

  nn::TrainConfig cfg = quick_cfg(52, 7);
  nn::Model dp_model = train::dp_finetune(g, t.finetune_set, dp, cfg);

  // Plain head-only finetuning with the same seeds, lot-sized batches, and
  // the DP epoch count must reproduce the DP path bit for bit when the clip
  // never binds and no noise is added.
  train::FinetuneStrategy fe;
  fe.head_init_seed = rng::derive(cfg.seed, "dp_head");
  nn::TrainConfig plain = cfg;
  plain.epochs = dp.epochs;
  plain.batch_size = dp.lot_size;
  nn::Model sgd_model = train::finetune(g, t.finetune_set, fe, plain);

  CHECK(dp_model == sgd_model);
}

TEST_CASE("dp_finetune clip bound holds and stats count examples") {
  Task t = easy_task(10);
  nn::Model g = train::pretrain(t.pretrain_set, quick_cfg(61, 6), {8});

  train::DPConfig dp;
  dp.clip_norm = 1.0;
  dp.noise_multiplier = 0.0;
  dp.lot_size = 30;
  dp.epochs = 4;

  train::DpStats stats;
  nn::TrainConfig cfg = quick_cfg(62, 4);
  train::dp_finetune(g, t.finetune_set, dp, cfg, &stats);
  CHECK(stats.max_clipped_grad_norm <= 1.0 + 1e-6);
  CHECK(stats.example_count ==
        static_cast<long long>(t.finetune_set.points.size()) * dp.epochs);
  // A unit clip on real gradients actually binds somewhere.
  CHECK(stats.max_clipped_grad_norm > 0.0);
}

TEST_CASE("dp noise changes the result and is seed-reproducible") {
  Task t = easy_task(11);
  nn::Model g = train::pretrain(t.pretrain_set, quick_cfg(71, 5), {8});

  train::DPConfig noisy;
  noisy.clip_norm = 1.0;
  noisy.noise_multiplier = 10.0;
  noisy.lot_size = 40;
  noisy.epochs = 3;
  train::DPConfig silent = noisy;
  silent.noise_multiplier = 0.0;

  nn::TrainConfig cfg = quick_cfg(72, 3);
  nn::Model a = train::dp_finetune(g, t.finetune_set, noisy, cfg);
  nn::Model b = train::dp_finetune(g, t.finetune_set, noisy, cfg);
  nn::Model c = train::dp_finetune(g, t.finetune_set, silent, cfg);
  CHECK(a == b);  // same seed, same noise draws
  CHECK(a != c);  // noise moved the weights

  nn::TrainConfig cfg2 = cfg;
  cfg2.seed = 73;
  nn::Model d = train::dp_finetune(g, t.finetune_set, noisy, cfg2);
  CHECK(a != d);  // different seed, different noise
}

TEST_CASE("dp_finetune validates its configuration") {
  Task t = easy_task(12);
  nn::Model g = train::pretrain(t.pretrain_set, quick_cfg(81, 2), {4});
  nn::TrainConfig cfg = quick_cfg(82, 2);

  train::DPConfig dp;
  dp.clip_norm = 1.0;
  dp.noise_multiplier = 1.0;
  dp.lot_size = static_cast<int>(t.finetune_set.points.size()) + 1;
  dp.epochs = 1;
  CHECK_THROWS_AS(train::dp_finetune(g, t.finetune_set, dp, cfg), ConfigError);

  dp.lot_size = 10;
  dp.clip_norm = 0.0;
  CHECK_THROWS_AS(train::dp_finetune(g, t.finetune_set, dp, cfg), ConfigError);

  dp.clip_norm = 1.0;
  dp.noise_multiplier = -1.0;
  CHECK_THROWS_AS(train::dp_finetune(g, t.finetune_set, dp, cfg), ConfigError);
}

TEST_CASE("evaluate_accuracy on a hand-built model") {
  // Linear model that classifies by the sign of x0.
  nn::Model m;
  m.class_count = 2;
  nn::AffineLayer l;
  l.in = 1;
  l.out = 2;
  l.weight = {-1.0f, 1.0f};
  l.bias = {0.0f, 0.0f};
  m.layers = {l};
  m.freeze_flags = {false};

  data::Dataset d;
  d.feature_dim = 1;
  d.class_count = 2;
  d.points.push_back({{-2.0f}, 0, 1});
  d.points.push_back({{3.0f}, 1, 2});
  d.points.push_back({{1.0f}, 0, 3});  // misclassified
  d.points.push_back({{-1.0f}, 0, 4});
  CHECK(train::evaluate_accuracy(m, d) == doctest::Approx(0.75));

  data::Dataset empty;
  empty.feature_dim = 1;
  empty.class_count = 2;
  CHECK_THROWS_AS(train::evaluate_accuracy(m, empty), EmptyDataError);
}
