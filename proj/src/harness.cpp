#include "ptleak/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "ptleak/parallel.hpp"
#include "ptleak/rng.hpp"

using nlohmann::json;

namespace ptleak::harness {

namespace {

// ---- strict JSON helpers ----

void reject_unknown(const json& j, std::initializer_list<const char*> allowed,
                    const std::string& ctx) {
  if (!j.is_object())
    throw ConfigError("config section '" + ctx + "' must be a JSON object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : allowed)
      if (item.key() == k) {
        known = true;
        break;
      }
    if (!known)
      throw ConfigError("unknown config field '" + ctx + item.key() + "'");
  }
}

template <typename T>
T get_field(const json& j, const char* key, const T& fallback,
            const std::string& ctx) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config field '" + ctx + key + "' has the wrong type");
  }
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, ptr);
}

// ---- nested section parsing ----

nn::LrSchedule parse_schedule(const std::string& s, const std::string& ctx) {
  if (s == "constant") return nn::LrSchedule::constant;
  if (s == "cosine") return nn::LrSchedule::cosine;
  throw ConfigError("config field '" + ctx +
                    "lr_schedule' must be constant or cosine");
}

std::string schedule_name(nn::LrSchedule s) {
  return s == nn::LrSchedule::constant ? "constant" : "cosine";
}

nn::TrainConfig parse_train(const json& j, const nn::TrainConfig& defaults,
                            const std::string& ctx) {
  reject_unknown(j, {"epochs", "batch_size", "learning_rate", "weight_decay",
                     "lr_schedule"},
                 ctx);
  nn::TrainConfig cfg = defaults;
  cfg.epochs = get_field(j, "epochs", defaults.epochs, ctx);
  cfg.batch_size = get_field(j, "batch_size", defaults.batch_size, ctx);
  cfg.learning_rate = get_field(j, "learning_rate", defaults.learning_rate, ctx);
  cfg.weight_decay = get_field(j, "weight_decay", defaults.weight_decay, ctx);
  cfg.lr_schedule = parse_schedule(
      get_field<std::string>(j, "lr_schedule", schedule_name(defaults.lr_schedule), ctx),
      ctx);
  cfg.seed = 0;  // always derived at run time
  return cfg;
}

json train_to_json(const nn::TrainConfig& cfg) {
  json j;
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["learning_rate"] = cfg.learning_rate;
  j["weight_decay"] = cfg.weight_decay;
  j["lr_schedule"] = schedule_name(cfg.lr_schedule);
  return j;
}

train::StrategyKind parse_strategy_kind(const std::string& s) {
  if (s == "feature_extraction") return train::StrategyKind::feature_extraction;
  if (s == "last_k_layers") return train::StrategyKind::last_k_layers;
  if (s == "full") return train::StrategyKind::full;
  throw ConfigError("unknown finetune strategy '" + s + "'");
}

std::string strategy_name(train::StrategyKind k) {
  switch (k) {
    case train::StrategyKind::feature_extraction: return "feature_extraction";
    case train::StrategyKind::last_k_layers: return "last_k_layers";
    case train::StrategyKind::full: return "full";
  }
  throw ConfigError("invalid finetune strategy");
}

attack::MetaArch parse_meta(const json& j, const attack::MetaArch& defaults,
                            const std::string& ctx) {
  reject_unknown(j, {"kind", "hidden", "epochs", "batch_size", "learning_rate",
                     "k_rule", "fixed_k"},
                 ctx);
  attack::MetaArch arch = defaults;
  arch.kind = attack::parse_meta_kind(
      get_field<std::string>(j, "kind", attack::to_string(defaults.kind), ctx));
  arch.hidden = get_field(j, "hidden", defaults.hidden, ctx);
  arch.epochs = get_field(j, "epochs", defaults.epochs, ctx);
  arch.batch_size = get_field(j, "batch_size", defaults.batch_size, ctx);
  arch.learning_rate = get_field(j, "learning_rate", defaults.learning_rate, ctx);
  arch.k_rule = attack::parse_k_rule(
      get_field<std::string>(j, "k_rule", attack::to_string(defaults.k_rule), ctx));
  arch.fixed_k = get_field(j, "fixed_k", defaults.fixed_k, ctx);
  arch.seed = 0;  // derived at run time
  return arch;
}

json meta_to_json(const attack::MetaArch& arch) {
  json j;
  j["kind"] = attack::to_string(arch.kind);
  j["hidden"] = arch.hidden;
  j["epochs"] = arch.epochs;
  j["batch_size"] = arch.batch_size;
  j["learning_rate"] = arch.learning_rate;
  j["k_rule"] = attack::to_string(arch.k_rule);
  j["fixed_k"] = arch.fixed_k;
  return j;
}

int resolved_class_count(const ExperimentConfig& cfg) {
  switch (cfg.downstream.kind) {
    case data::TaskKind::coarse:
      return cfg.data.coarse_classes;
    case data::TaskKind::disjoint:
      return cfg.downstream.class_count > 0 ? cfg.downstream.class_count : 10;
    case data::TaskKind::dissimilar:
      return cfg.downstream.class_count > 0 ? cfg.downstream.class_count : 8;
  }
  throw ConfigError("invalid downstream kind");
}

void check_train(const nn::TrainConfig& cfg, const std::string& ctx) {
  if (cfg.epochs < 0)
    throw ConfigError(ctx + ": epochs must be nonnegative");
  if (cfg.batch_size < 1) throw ConfigError(ctx + ": batch_size must be >= 1");
  if (cfg.learning_rate <= 0.0)
    throw ConfigError(ctx + ": learning_rate must be positive");
  if (cfg.weight_decay < 0.0)
    throw ConfigError(ctx + ": weight_decay must be nonnegative");
}

void check_meta(const attack::MetaArch& arch, const std::string& ctx) {
  if (arch.kind == attack::MetaKind::mlp && arch.hidden < 1)
    throw ConfigError(ctx + ": mlp hidden width must be >= 1");
  if (arch.epochs < 1) throw ConfigError(ctx + ": epochs must be >= 1");
  if (arch.batch_size < 1) throw ConfigError(ctx + ": batch_size must be >= 1");
  if (arch.learning_rate <= 0.0)
    throw ConfigError(ctx + ": learning_rate must be positive");
  if (arch.fixed_k < 1) throw ConfigError(ctx + ": fixed_k must be >= 1");
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw LoadError("write failed for " + path.string());
}

void write_status(const std::filesystem::path& dir, const std::string& status,
                  const std::string& stage, const std::string& error) {
  json j;
  j["status"] = status;
  j["stage"] = stage;
  if (!error.empty()) j["error"] = error;
  write_text(dir / "run_status.json", j.dump(2) + "\n");
}

}  // namespace

// ---- enum plumbing ----

AttackKind parse_attack_kind(const std::string& s) {
  if (s == "tmi") return AttackKind::tmi;
  if (s == "lira_adapted") return AttackKind::lira_adapted;
  if (s == "lira_direct") return AttackKind::lira_direct;
  if (s == "tmi_global") return AttackKind::tmi_global;
  throw ConfigError("unknown attack '" + s + "'");
}

std::string to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::tmi: return "tmi";
    case AttackKind::lira_adapted: return "lira_adapted";
    case AttackKind::lira_direct: return "lira_direct";
    case AttackKind::tmi_global: return "tmi_global";
  }
  throw ConfigError("invalid attack kind");
}

// ---- config parsing ----

ExperimentConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& ex) {
    throw ConfigError("config is not valid JSON: " + std::string(ex.what()));
  }
  reject_unknown(j,
                 {"schema_version", "master_seed", "output_dir", "workers",
                  "save_ensemble", "data", "downstream", "shadow", "strategy",
                  "dp", "attacks", "augmentations", "augmentation_strength",
                  "top_k", "meta", "global_meta", "lira_ridge",
                  "eval_sample_size", "ablation"},
                 "");
  ExperimentConfig cfg;
  cfg.global_meta.kind = attack::MetaKind::knn;

  int version = get_field(j, "schema_version", kConfigSchemaVersion, "");
  if (version != kConfigSchemaVersion)
    throw ConfigError("unsupported config schema_version " +
                      std::to_string(version));
  cfg.master_seed = get_field<uint64_t>(j, "master_seed", cfg.master_seed, "");
  cfg.output_dir = get_field<std::string>(j, "output_dir", cfg.output_dir, "");
  cfg.workers = get_field(j, "workers", cfg.workers, "");
  cfg.save_ensemble = get_field(j, "save_ensemble", cfg.save_ensemble, "");

  if (j.contains("data")) {
    const json& d = j.at("data");
    reject_unknown(d,
                   {"feature_dim", "fine_classes", "coarse_classes",
                    "separation", "class_cov_scale", "pool_size",
                    "challenge_count", "shuffle_labels"},
                   "data.");
    cfg.data.feature_dim = get_field(d, "feature_dim", cfg.data.feature_dim, "data.");
    cfg.data.fine_classes = get_field(d, "fine_classes", cfg.data.fine_classes, "data.");
    cfg.data.coarse_classes =
        get_field(d, "coarse_classes", cfg.data.coarse_classes, "data.");
    cfg.data.separation = get_field(d, "separation", cfg.data.separation, "data.");
    cfg.data.class_cov_scale =
        get_field(d, "class_cov_scale", cfg.data.class_cov_scale, "data.");
    cfg.data.pool_size = get_field(d, "pool_size", cfg.data.pool_size, "data.");
    cfg.data.challenge_count =
        get_field(d, "challenge_count", cfg.data.challenge_count, "data.");
    cfg.data.shuffle_labels =
        get_field(d, "shuffle_labels", cfg.data.shuffle_labels, "data.");
  }
  if (j.contains("downstream")) {
    const json& d = j.at("downstream");
    reject_unknown(d, {"kind", "class_count", "ft_train_size"}, "downstream.");
    cfg.downstream.kind = data::parse_task_kind(
        get_field<std::string>(d, "kind", data::to_string(cfg.downstream.kind),
                               "downstream."));
    cfg.downstream.class_count =
        get_field(d, "class_count", cfg.downstream.class_count, "downstream.");
    cfg.downstream.ft_train_size =
        get_field(d, "ft_train_size", cfg.downstream.ft_train_size, "downstream.");
  }
  {
    nn::TrainConfig pre_default;
    pre_default.epochs = 100;
    pre_default.batch_size = 64;
    pre_default.learning_rate = 0.05;
    pre_default.weight_decay = 1e-5;
    pre_default.lr_schedule = nn::LrSchedule::cosine;
    nn::TrainConfig ft_default = pre_default;
    ft_default.epochs = 20;
    cfg.shadow.pretrain = pre_default;
    cfg.shadow.finetune = ft_default;
  }
  if (j.contains("shadow")) {
    const json& s = j.at("shadow");
    reject_unknown(s, {"count", "hidden", "pretrain", "finetune"}, "shadow.");
    cfg.shadow.count = get_field(s, "count", cfg.shadow.count, "shadow.");
    cfg.shadow.hidden =
        get_field(s, "hidden", cfg.shadow.hidden, "shadow.");
    if (s.contains("pretrain"))
      cfg.shadow.pretrain =
          parse_train(s.at("pretrain"), cfg.shadow.pretrain, "shadow.pretrain.");
    if (s.contains("finetune"))
      cfg.shadow.finetune =
          parse_train(s.at("finetune"), cfg.shadow.finetune, "shadow.finetune.");
  }
  if (j.contains("strategy")) {
    const json& s = j.at("strategy");
    reject_unknown(s, {"kind", "last_k"}, "strategy.");
    cfg.strategy.kind = parse_strategy_kind(get_field<std::string>(
        s, "kind", strategy_name(cfg.strategy.kind), "strategy."));
    cfg.strategy.last_k = get_field(s, "last_k", cfg.strategy.last_k, "strategy.");
  }
  if (j.contains("dp") && !j.at("dp").is_null()) {
    const json& d = j.at("dp");
    reject_unknown(d,
                   {"clip_norm", "noise_multiplier", "lot_size", "epochs",
                    "declared_epsilon", "declared_delta"},
                   "dp.");
    train::DPConfig dp;
    dp.clip_norm = get_field(d, "clip_norm", dp.clip_norm, "dp.");
    dp.noise_multiplier =
        get_field(d, "noise_multiplier", dp.noise_multiplier, "dp.");
    dp.lot_size = get_field(d, "lot_size", dp.lot_size, "dp.");
    dp.epochs = get_field(d, "epochs", dp.epochs, "dp.");
    if (d.contains("declared_epsilon") && !d.at("declared_epsilon").is_null())
      dp.declared_epsilon = get_field<double>(d, "declared_epsilon", 0.0, "dp.");
    if (d.contains("declared_delta") && !d.at("declared_delta").is_null())
      dp.declared_delta = get_field<double>(d, "declared_delta", 0.0, "dp.");
    cfg.dp = dp;
  }
  if (j.contains("attacks")) {
    const json& a = j.at("attacks");
    if (!a.is_array()) throw ConfigError("'attacks' must be an array");
    cfg.attacks.clear();
    for (const auto& item : a) {
      if (!item.is_string())
        throw ConfigError("'attacks' entries must be strings");
      cfg.attacks.push_back(parse_attack_kind(item.get<std::string>()));
    }
  }
  cfg.augmentations = get_field(j, "augmentations", cfg.augmentations, "");
  cfg.augmentation_strength =
      get_field(j, "augmentation_strength", cfg.augmentation_strength, "");
  cfg.top_k = get_field(j, "top_k", cfg.top_k, "");
  if (j.contains("meta")) cfg.meta = parse_meta(j.at("meta"), cfg.meta, "meta.");
  if (j.contains("global_meta"))
    cfg.global_meta = parse_meta(j.at("global_meta"), cfg.global_meta,
                                 "global_meta.");
  cfg.lira_ridge = get_field(j, "lira_ridge", cfg.lira_ridge, "");
  cfg.eval_sample_size =
      get_field(j, "eval_sample_size", cfg.eval_sample_size, "");
  if (j.contains("ablation")) {
    const json& a = j.at("ablation");
    reject_unknown(a, {"kind", "topk", "meta_kinds", "augmentations"},
                   "ablation.");
    cfg.ablation.kind = get_field<std::string>(a, "kind", cfg.ablation.kind, "ablation.");
    cfg.ablation.topk = get_field(a, "topk", cfg.ablation.topk, "ablation.");
    cfg.ablation.meta_kinds =
        get_field(a, "meta_kinds", cfg.ablation.meta_kinds, "ablation.");
    cfg.ablation.augmentations =
        get_field(a, "augmentations", cfg.ablation.augmentations, "ablation.");
  }
  validate_config(cfg);
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string resolved_config_json(const ExperimentConfig& cfg) {
  json j;
  j["schema_version"] = kConfigSchemaVersion;
  j["master_seed"] = cfg.master_seed;
  j["output_dir"] = cfg.output_dir;
  j["workers"] = cfg.workers;
  j["save_ensemble"] = cfg.save_ensemble;
  json d;
  d["feature_dim"] = cfg.data.feature_dim;
  d["fine_classes"] = cfg.data.fine_classes;
  d["coarse_classes"] = cfg.data.coarse_classes;
  d["separation"] = cfg.data.separation;
  d["class_cov_scale"] = cfg.data.class_cov_scale;
  d["pool_size"] = cfg.data.pool_size;
  d["challenge_count"] = cfg.data.challenge_count;
  d["shuffle_labels"] = cfg.data.shuffle_labels;
  j["data"] = std::move(d);
  json ds;
  ds["kind"] = data::to_string(cfg.downstream.kind);
  ds["class_count"] = cfg.downstream.class_count;
  ds["ft_train_size"] = cfg.downstream.ft_train_size;
  j["downstream"] = std::move(ds);
  json sh;
  sh["count"] = cfg.shadow.count;
  sh["hidden"] = cfg.shadow.hidden;
  sh["pretrain"] = train_to_json(cfg.shadow.pretrain);
  sh["finetune"] = train_to_json(cfg.shadow.finetune);
  j["shadow"] = std::move(sh);
  json st;
  st["kind"] = strategy_name(cfg.strategy.kind);
  st["last_k"] = cfg.strategy.last_k;
  j["strategy"] = std::move(st);
  if (cfg.dp.has_value()) {
    json dp;
    dp["clip_norm"] = cfg.dp->clip_norm;
    dp["noise_multiplier"] = cfg.dp->noise_multiplier;
    dp["lot_size"] = cfg.dp->lot_size;
    dp["epochs"] = cfg.dp->epochs;
    dp["declared_epsilon"] =
        cfg.dp->declared_epsilon ? json(*cfg.dp->declared_epsilon) : json();
    dp["declared_delta"] =
        cfg.dp->declared_delta ? json(*cfg.dp->declared_delta) : json();
    j["dp"] = std::move(dp);
  } else {
    j["dp"] = nullptr;
  }
  json attacks = json::array();
  for (AttackKind a : cfg.attacks) attacks.push_back(to_string(a));
  j["attacks"] = std::move(attacks);
  j["augmentations"] = cfg.augmentations;
  j["augmentation_strength"] = cfg.augmentation_strength;
  j["top_k"] = cfg.top_k;
  j["meta"] = meta_to_json(cfg.meta);
  j["global_meta"] = meta_to_json(cfg.global_meta);
  j["lira_ridge"] = cfg.lira_ridge;
  j["eval_sample_size"] = cfg.eval_sample_size;
  json ab;
  ab["kind"] = cfg.ablation.kind;
  ab["topk"] = cfg.ablation.topk;
  ab["meta_kinds"] = cfg.ablation.meta_kinds;
  ab["augmentations"] = cfg.ablation.augmentations;
  j["ablation"] = std::move(ab);
  return j.dump(2) + "\n";
}

void validate_config(const ExperimentConfig& cfg) {
  if (cfg.data.feature_dim < 1)
    throw ConfigError("data.feature_dim must be >= 1");
  if (cfg.data.fine_classes < 1 || cfg.data.coarse_classes < 1)
    throw ConfigError("class counts must be >= 1");
  if (cfg.data.fine_classes % cfg.data.coarse_classes != 0)
    throw ConfigError("data.fine_classes must be divisible by coarse_classes");
  if (cfg.data.separation < 0.0)
    throw ConfigError("data.separation must be nonnegative");
  if (cfg.data.class_cov_scale <= 0.0)
    throw ConfigError("data.class_cov_scale must be positive");
  if (cfg.data.pool_size < 2) throw ConfigError("data.pool_size must be >= 2");
  if (cfg.data.challenge_count < 1 ||
      cfg.data.challenge_count > cfg.data.pool_size)
    throw ConfigError("data.challenge_count must be in [1, pool_size]");
  if (cfg.downstream.class_count < 0)
    throw ConfigError("downstream.class_count must be nonnegative");
  if (cfg.downstream.kind == data::TaskKind::coarse &&
      cfg.downstream.class_count != 0 &&
      cfg.downstream.class_count != cfg.data.coarse_classes)
    throw ConfigError(
        "downstream.class_count on the coarse task must equal coarse_classes");
  if (cfg.downstream.ft_train_size < 1)
    throw ConfigError("downstream.ft_train_size must be >= 1");
  if (cfg.shadow.count < 2) throw ConfigError("shadow.count must be >= 2");
  for (int h : cfg.shadow.hidden)
    if (h < 1) throw ConfigError("shadow.hidden widths must be >= 1");
  check_train(cfg.shadow.pretrain, "shadow.pretrain");
  check_train(cfg.shadow.finetune, "shadow.finetune");
  if (cfg.strategy.kind == train::StrategyKind::last_k_layers &&
      cfg.strategy.last_k < 1)
    throw ConfigError("strategy.last_k must be >= 1");
  if (cfg.dp.has_value()) {
    if (cfg.dp->clip_norm <= 0.0)
      throw ConfigError("dp.clip_norm must be positive");
    if (cfg.dp->noise_multiplier < 0.0)
      throw ConfigError("dp.noise_multiplier must be nonnegative");
    if (cfg.dp->lot_size < 1) throw ConfigError("dp.lot_size must be >= 1");
    if (cfg.dp->epochs < 1) throw ConfigError("dp.epochs must be >= 1");
  }
  if (cfg.attacks.empty())
    throw ConfigError("at least one attack must be configured");
  for (size_t i = 0; i < cfg.attacks.size(); ++i)
    for (size_t k = i + 1; k < cfg.attacks.size(); ++k)
      if (cfg.attacks[i] == cfg.attacks[k])
        throw ConfigError("duplicate attack '" + to_string(cfg.attacks[i]) +
                          "'");
  if (cfg.augmentations < 1)
    throw ConfigError("augmentations must be >= 1");
  if (cfg.augmentation_strength < 0.0)
    throw ConfigError("augmentation_strength must be nonnegative");
  int kft = resolved_class_count(cfg);
  if (cfg.top_k < 0 || cfg.top_k > kft)
    throw ConfigError("top_k must be in [0, downstream class count]");
  check_meta(cfg.meta, "meta");
  check_meta(cfg.global_meta, "global_meta");
  if (cfg.lira_ridge <= 0.0) throw ConfigError("lira_ridge must be positive");
  if (cfg.eval_sample_size < 1)
    throw ConfigError("eval_sample_size must be >= 1");
  const std::string& ak = cfg.ablation.kind;
  if (ak != "" && ak != "topk" && ak != "meta_arch" && ak != "augmentations")
    throw ConfigError("ablation.kind must be topk, meta_arch, or augmentations");
  if (ak == "topk") {
    if (cfg.ablation.topk.empty())
      throw ConfigError("ablation.topk must list at least one k");
    for (int k : cfg.ablation.topk)
      if (k < 1 || k > kft)
        throw ConfigError("ablation.topk values must be in [1, class count]");
  }
  if (ak == "meta_arch") {
    if (cfg.ablation.meta_kinds.empty())
      throw ConfigError("ablation.meta_kinds must list at least one kind");
    for (const auto& s : cfg.ablation.meta_kinds) attack::parse_meta_kind(s);
  }
  if (ak == "augmentations") {
    if (cfg.ablation.augmentations.empty())
      throw ConfigError("ablation.augmentations must list at least one M");
    for (int m : cfg.ablation.augmentations)
      if (m < 1) throw ConfigError("ablation.augmentations values must be >= 1");
  }
}

std::string manifest_hash(const ExperimentConfig& cfg) {
  // Execution details (where artifacts land, thread count, whether the
  // ensemble is persisted) do not change what the experiment computes, so
  // they are excluded from the identity hash.
  ExperimentConfig canon = cfg;
  canon.output_dir.clear();
  canon.workers = 0;
  canon.save_ensemble = false;
  uint64_t h = rng::hash_tag(resolved_config_json(canon));
  char buf[17];
  static const char* hex = "0123456789abcdef";
  for (int i = 15; i >= 0; --i) {
    buf[i] = hex[h & 0xF];
    h >>= 4;
  }
  buf[16] = '\0';
  return std::string(buf);
}

// ---- pipeline stages ----

PipelineData build_data(const ExperimentConfig& cfg) {
  PipelineData pd;
  pd.spec = data::make_pretrain_spec(
      cfg.data.feature_dim, cfg.data.fine_classes, cfg.data.coarse_classes,
      cfg.data.separation, rng::derive(cfg.master_seed, "spec"),
      cfg.data.class_cov_scale);
  pd.population = data::sample_population(
      pd.spec, cfg.data.pool_size, rng::derive(cfg.master_seed, "population"));
  if (cfg.data.shuffle_labels)
    data::shuffle_labels(pd.population,
                         rng::derive(cfg.master_seed, "label_shuffle"));
  pd.challenges = data::designate_challenges(
      pd.population, cfg.data.challenge_count,
      rng::derive(cfg.master_seed, "challenges"));
  pd.downstream =
      data::derive_task(pd.spec, cfg.downstream.kind,
                        rng::derive(cfg.master_seed, "task"),
                        cfg.downstream.class_count);
  return pd;
}

shadow::ShadowEnsemble build_ensemble(const ExperimentConfig& cfg,
                                      const PipelineData& pd) {
  shadow::TrainBundle bundle;
  bundle.pretrain_cfg = cfg.shadow.pretrain;
  bundle.finetune_cfg = cfg.shadow.finetune;
  bundle.hidden = cfg.shadow.hidden;
  bundle.ft_train_size = cfg.downstream.ft_train_size;
  bundle.dp = cfg.dp;
  shadow::ShadowEnsemble ensemble = shadow::train_shadow_models(
      pd.population, pd.challenges, pd.downstream, cfg.downstream.kind,
      cfg.shadow.count, cfg.strategy, bundle, cfg.master_seed, cfg.workers);
  ensemble.manifest.config_snapshot = resolved_config_json(cfg);
  return ensemble;
}

ViewCache build_view_cache(const shadow::ShadowEnsemble& ensemble, int views,
                           double strength, uint64_t master_seed, int workers,
                           bool need_pretrained) {
  if (views < 1) throw SizeError("view count must be at least 1");
  const size_t n = ensemble.entries.size();
  const size_t c = ensemble.challenge.points.size();
  // Augmented inputs are shared by every model.
  std::vector<std::vector<std::vector<float>>> inputs(c);
  for (size_t ci = 0; ci < c; ++ci)
    inputs[ci] = attack::augmented_views(ensemble.challenge.points[ci].x,
                                         views, strength, master_seed);
  ViewCache cache;
  cache.views = views;
  cache.ft_raw.resize(n);
  if (need_pretrained) cache.pt_stat.resize(n);
  parallel_for(n, workers, [&](size_t e) {
    const auto& entry = ensemble.entries[e];
    cache.ft_raw[e].resize(c);
    if (need_pretrained) cache.pt_stat[e].resize(c);
    for (size_t ci = 0; ci < c; ++ci) {
      const auto& point = ensemble.challenge.points[ci];
      cache.ft_raw[e][ci].reserve(static_cast<size_t>(views));
      for (const auto& input : inputs[ci])
        cache.ft_raw[e][ci].push_back(nn::predict(entry.finetuned, input));
      if (need_pretrained) {
        if (point.y < 0 || point.y >= entry.pretrained.class_count)
          throw LabelError("challenge label outside pretrained class range");
        auto& stats = cache.pt_stat[e][ci];
        stats.reserve(static_cast<size_t>(views));
        for (const auto& input : inputs[ci]) {
          attack::ScaledVector s =
              attack::scale(nn::predict(entry.pretrained, input));
          stats.push_back(s.values[static_cast<size_t>(point.y)]);
        }
      }
    }
  });
  return cache;
}

// ---- attack execution ----

namespace {

struct CellResult {
  bool ok = false;
  double score = 0.0;
  std::string skip_reason;
};

int argmax_lowest(const std::vector<double>& v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i)
    if (v[static_cast<size_t>(i)] > v[static_cast<size_t>(best)]) best = i;
  return best;
}

}  // namespace

AttackReport run_attacks(const ExperimentConfig& cfg,
                         const shadow::ShadowEnsemble& ensemble) {
  const size_t n = ensemble.entries.size();
  const size_t c = ensemble.challenge.points.size();
  if (n < 2) throw SizeError("attack stage needs at least 2 ensemble entries");
  if (c == 0) throw SizeError("attack stage needs challenge points");
  const int kft = ensemble.downstream_spec.class_count;
  if (cfg.top_k > kft)
    throw ConfigError("top_k exceeds the downstream class count");
  const int m = cfg.augmentations;

  bool need_pt = false;
  for (AttackKind a : cfg.attacks)
    if (a == AttackKind::lira_direct) need_pt = true;
  ViewCache cache = build_view_cache(ensemble, m, cfg.augmentation_strength,
                                     cfg.master_seed, cfg.workers, need_pt);

  // Adversary-visible scaled vectors (top-k masking applied if configured).
  const bool masked = cfg.top_k > 0 && cfg.top_k < kft;
  std::vector<std::vector<std::vector<attack::ScaledVector>>> scaled(n);
  parallel_for(n, cfg.workers, [&](size_t e) {
    scaled[e].resize(c);
    for (size_t ci = 0; ci < c; ++ci) {
      scaled[e][ci].reserve(cache.ft_raw[e][ci].size());
      for (const auto& pv : cache.ft_raw[e][ci])
        scaled[e][ci].push_back(
            attack::scale(masked ? attack::topk_mask(pv, cfg.top_k) : pv));
    }
  });

  // Ground-truth membership bits.
  std::vector<std::vector<int>> bits(n, std::vector<int>(c, 0));
  for (size_t e = 0; e < n; ++e)
    for (size_t ci = 0; ci < c; ++ci)
      bits[e][ci] = shadow::membership_bit(ensemble, e,
                                           ensemble.challenge.points[ci].id) ==
                            shadow::Membership::IN
                        ? 1
                        : 0;

  AttackReport report;
  report.manifest_hash = manifest_hash(cfg);

  for (AttackKind kind : cfg.attacks) {
    std::vector<std::vector<CellResult>> cells(
        n, std::vector<CellResult>(c));

    if (kind == AttackKind::tmi_global) {
      parallel_for(n, cfg.workers, [&](size_t t) {
        attack::MetaArch arch = cfg.global_meta;
        arch.seed = rng::derive(cfg.master_seed, "meta_global");
        attack::MetaDataset pooled;
        for (size_t ci = 0; ci < c; ++ci)
          for (size_t e = 0; e < n; ++e) {
            if (e == t) continue;
            for (const auto& sv : scaled[e][ci])
              pooled.rows.push_back(attack::MetaRow{sv, bits[e][ci]});
          }
        try {
          attack::MetaModel meta = attack::train_metaclassifier(
              pooled, arch, static_cast<int>(n) - 1);
          for (size_t ci = 0; ci < c; ++ci) {
            double sum = 0.0;
            for (const auto& sv : scaled[t][ci]) sum += meta.score(sv);
            cells[t][ci].ok = true;
            cells[t][ci].score = sum / static_cast<double>(m);
          }
        } catch (const Error& ex) {
          for (size_t ci = 0; ci < c; ++ci)
            cells[t][ci].skip_reason = ex.what();
        }
      });
    } else {
      parallel_for(n * c, cfg.workers, [&](size_t flat) {
        size_t t = flat / c;
        size_t ci = flat % c;
        const auto& point = ensemble.challenge.points[ci];
        CellResult& cell = cells[t][ci];
        try {
          if (kind == AttackKind::tmi) {
            attack::MetaDataset meta;
            meta.challenge_id = point.id;
            bool has0 = false, has1 = false;
            for (size_t e = 0; e < n; ++e) {
              if (e == t) continue;
              (bits[e][ci] ? has1 : has0) = true;
              for (const auto& sv : scaled[e][ci])
                meta.rows.push_back(attack::MetaRow{sv, bits[e][ci]});
            }
            if (!has0 || !has1)
              throw DegenerateSplitError(
                  "degenerate shadow split for challenge id " +
                  std::to_string(point.id) + ": " +
                  (has1 ? "all IN" : "all OUT"));
            attack::MetaArch arch = cfg.meta;
            arch.seed = rng::derive(cfg.master_seed, "meta", point.id);
            attack::MetaModel model = attack::train_metaclassifier(
                meta, arch, static_cast<int>(n) - 1);
            double sum = 0.0;
            for (const auto& sv : scaled[t][ci]) sum += model.score(sv);
            cell.score = sum / static_cast<double>(m);
          } else if (kind == AttackKind::lira_adapted) {
            int yhat = argmax_lowest(scaled[t][ci][0].values);
            std::vector<double> target_stat;
            target_stat.reserve(static_cast<size_t>(m));
            for (const auto& sv : scaled[t][ci])
              target_stat.push_back(sv.values[static_cast<size_t>(yhat)]);
            std::vector<std::vector<double>> in_stats, out_stats;
            for (size_t e = 0; e < n; ++e) {
              if (e == t) continue;
              std::vector<double> stat;
              stat.reserve(static_cast<size_t>(m));
              for (const auto& sv : scaled[e][ci])
                stat.push_back(sv.values[static_cast<size_t>(yhat)]);
              (bits[e][ci] ? in_stats : out_stats).push_back(std::move(stat));
            }
            cell.score = attack::lira_log_ratio(
                target_stat, in_stats, out_stats, cfg.lira_ridge,
                "challenge id " + std::to_string(point.id));
          } else {  // lira_direct
            std::vector<std::vector<double>> in_stats, out_stats;
            for (size_t e = 0; e < n; ++e) {
              if (e == t) continue;
              (bits[e][ci] ? in_stats : out_stats)
                  .push_back(cache.pt_stat[e][ci]);
            }
            cell.score = attack::lira_log_ratio(
                cache.pt_stat[t][ci], in_stats, out_stats, cfg.lira_ridge,
                "challenge id " + std::to_string(point.id));
          }
          cell.ok = true;
        } catch (const Error& ex) {
          cell.skip_reason = ex.what();
        }
      });
    }

    // Deterministic row order: target-major, challenge-minor.
    const std::string name = to_string(kind);
    for (size_t t = 0; t < n; ++t)
      for (size_t ci = 0; ci < c; ++ci) {
        const CellResult& cell = cells[t][ci];
        uint64_t id = ensemble.challenge.points[ci].id;
        if (cell.ok) {
          report.rows.push_back(ScoreRow{id, static_cast<int>(t), name,
                                         cell.score, bits[t][ci]});
        } else {
          report.skips.push_back(SkipRecord{name, static_cast<int>(t), id,
                                            cell.skip_reason});
        }
      }
  }

  // Summaries: pooled metrics plus per-target AUCs where both classes occur.
  for (AttackKind kind : cfg.attacks) {
    const std::string name = to_string(kind);
    std::vector<double> scores;
    std::vector<int> labels;
    std::vector<std::vector<double>> t_scores(n);
    std::vector<std::vector<int>> t_labels(n);
    for (const auto& row : report.rows) {
      if (row.attack != name) continue;
      scores.push_back(row.score);
      labels.push_back(row.member_bit);
      t_scores[static_cast<size_t>(row.target_index)].push_back(row.score);
      t_labels[static_cast<size_t>(row.target_index)].push_back(row.member_bit);
    }
    long long skipped = 0;
    for (const auto& s : report.skips)
      if (s.attack == name) ++skipped;
    if (scores.empty()) continue;
    bool has0 = false, has1 = false;
    for (int l : labels) (l ? has1 : has0) = true;
    if (!has0 || !has1) continue;
    AttackSummary summary;
    summary.pooled = metrics::summarize(scores, labels);
    summary.skipped = skipped;
    summary.per_target_auc.resize(n);
    for (size_t t = 0; t < n; ++t) {
      bool t0 = false, t1 = false;
      for (int l : t_labels[t]) (l ? t1 : t0) = true;
      if (t0 && t1)
        summary.per_target_auc[t] =
            metrics::auc(metrics::roc(t_scores[t], t_labels[t]));
    }
    report.summaries[name] = std::move(summary);
  }

  // Downstream utility diagnostic: mean finetuned accuracy on a fresh sample.
  data::Dataset eval_set = data::sample_population(
      ensemble.downstream_spec, cfg.eval_sample_size,
      rng::derive(cfg.master_seed, "eval_sample"));
  double acc = 0.0;
  for (const auto& entry : ensemble.entries)
    acc += train::evaluate_accuracy(entry.finetuned, eval_set);
  report.mean_downstream_accuracy = acc / static_cast<double>(n);
  return report;
}

// ---- artifacts ----

void write_report_files(const AttackReport& report,
                        const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "scores.csv");
    if (!out)
      throw LoadError("cannot open " + (dir / "scores.csv").string() +
                      " for writing");
    out << "# manifest_hash=" << report.manifest_hash << "\n";
    out << "challenge_id,target_index,attack,score,member_bit\n";
    for (const auto& row : report.rows)
      out << row.challenge_id << "," << row.target_index << "," << row.attack
          << "," << format_double(row.score) << "," << row.member_bit << "\n";
    if (!out) throw LoadError("write failed for scores.csv");
  }
  // Per-attack ROC curves.
  std::map<std::string, std::pair<std::vector<double>, std::vector<int>>> pooled;
  for (const auto& row : report.rows) {
    pooled[row.attack].first.push_back(row.score);
    pooled[row.attack].second.push_back(row.member_bit);
  }
  for (const auto& [name, sl] : pooled) {
    bool has0 = false, has1 = false;
    for (int l : sl.second) (l ? has1 : has0) = true;
    if (!has0 || !has1) continue;
    metrics::write_roc_csv(metrics::roc(sl.first, sl.second),
                           dir / ("roc_" + name + ".csv"),
                           "manifest_hash=" + report.manifest_hash +
                               " attack=" + name);
  }
  // summary.json: exactly what `eval` recomputes from scores.csv.
  std::map<std::string, metrics::Summary> summaries;
  for (const auto& [name, s] : report.summaries) summaries[name] = s.pooled;
  write_summary_json(summaries, dir / "summary.json");
  // report.json: everything else.
  json j;
  j["schema_version"] = 1;
  j["manifest_hash"] = report.manifest_hash;
  j["mean_downstream_accuracy"] = report.mean_downstream_accuracy;
  j["row_count"] = report.rows.size();
  json attacks = json::object();
  for (const auto& [name, s] : report.summaries) {
    json a;
    a["auc"] = s.pooled.auc;
    a["balanced_accuracy"] = s.pooled.balanced_accuracy;
    a["tpr_at_fpr_0p001"] = s.pooled.tpr_at_fpr_0p001;
    a["tpr_at_fpr_0p01"] = s.pooled.tpr_at_fpr_0p01;
    a["n_pos"] = s.pooled.n_pos;
    a["n_neg"] = s.pooled.n_neg;
    a["skipped"] = s.skipped;
    json per_target = json::array();
    for (const auto& v : s.per_target_auc)
      per_target.push_back(v ? json(*v) : json());
    a["per_target_auc"] = std::move(per_target);
    attacks[name] = std::move(a);
  }
  j["attacks"] = std::move(attacks);
  json skips = json::array();
  for (const auto& s : report.skips) {
    json sk;
    sk["attack"] = s.attack;
    sk["target_index"] = s.target_index;
    sk["challenge_id"] = s.challenge_id;
    sk["reason"] = s.reason;
    skips.push_back(std::move(sk));
  }
  j["skips"] = std::move(skips);
  write_text(dir / "report.json", j.dump(2) + "\n");
}

std::vector<ScoreRow> read_scores_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  std::vector<ScoreRow> rows;
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      if (line != "challenge_id,target_index,attack,score,member_bit")
        throw LoadError("bad scores.csv header in " + path.string());
      header_seen = true;
      continue;
    }
    ScoreRow row;
    size_t pos = 0;
    auto next_field = [&](bool last) {
      size_t comma = last ? line.size() : line.find(',', pos);
      if (comma == std::string::npos)
        throw LoadError("bad scores.csv row '" + line + "'");
      std::string field = line.substr(pos, comma - pos);
      pos = comma + 1;
      return field;
    };
    std::string f0 = next_field(false);
    std::string f1 = next_field(false);
    row.attack = next_field(false);
    std::string f3 = next_field(false);
    std::string f4 = next_field(true);
    auto parse_u64 = [&](const std::string& s, uint64_t& v) {
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      return ec == std::errc() && p == s.data() + s.size();
    };
    auto parse_int = [&](const std::string& s, int& v) {
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      return ec == std::errc() && p == s.data() + s.size();
    };
    auto parse_dbl = [&](const std::string& s, double& v) {
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      return ec == std::errc() && p == s.data() + s.size();
    };
    if (!parse_u64(f0, row.challenge_id) || !parse_int(f1, row.target_index) ||
        !parse_dbl(f3, row.score) || !parse_int(f4, row.member_bit))
      throw LoadError("bad scores.csv row '" + line + "'");
    rows.push_back(std::move(row));
  }
  if (!header_seen) throw LoadError("scores.csv has no header: " + path.string());
  return rows;
}

std::map<std::string, metrics::Summary> summaries_from_rows(
    const std::vector<ScoreRow>& rows) {
  std::map<std::string, std::pair<std::vector<double>, std::vector<int>>> by;
  for (const auto& row : rows) {
    by[row.attack].first.push_back(row.score);
    by[row.attack].second.push_back(row.member_bit);
  }
  std::map<std::string, metrics::Summary> out;
  for (const auto& [name, sl] : by) {
    bool has0 = false, has1 = false;
    for (int l : sl.second) (l ? has1 : has0) = true;
    if (!has0 || !has1) continue;
    out[name] = metrics::summarize(sl.first, sl.second);
  }
  return out;
}

void write_summary_json(const std::map<std::string, metrics::Summary>& s,
                        const std::filesystem::path& path) {
  json j = json::object();
  for (const auto& [name, summary] : s) {
    json a;
    a["auc"] = summary.auc;
    a["balanced_accuracy"] = summary.balanced_accuracy;
    a["tpr_at_fpr_0p001"] = summary.tpr_at_fpr_0p001;
    a["tpr_at_fpr_0p01"] = summary.tpr_at_fpr_0p01;
    a["n_pos"] = summary.n_pos;
    a["n_neg"] = summary.n_neg;
    j[name] = std::move(a);
  }
  write_text(path, j.dump(2) + "\n");
}

// ---- orchestration ----

AttackReport run_experiment(const ExperimentConfig& cfg) {
  validate_config(cfg);
  std::filesystem::path out(cfg.output_dir);
  std::filesystem::create_directories(out);
  write_text(out / "resolved_config.json", resolved_config_json(cfg));

  std::string stage = "data";
  write_status(out, "incomplete", stage, "");
  try {
    PipelineData pd = build_data(cfg);
    stage = "shadows";
    write_status(out, "incomplete", stage, "");
    shadow::ShadowEnsemble ensemble = build_ensemble(cfg, pd);
    if (cfg.save_ensemble) shadow::save_ensemble(ensemble, out / "ensemble");
    stage = "attacks";
    write_status(out, "incomplete", stage, "");
    AttackReport report = run_attacks(cfg, ensemble);
    stage = "report";
    write_status(out, "incomplete", stage, "");
    write_report_files(report, out);
    write_status(out, "complete", "report", "");
    return report;
  } catch (const Error& ex) {
    write_status(out, "incomplete", stage, ex.what());
    throw StageError(stage, cfg.master_seed, ex.what());
  }
}

std::vector<std::pair<std::string, AttackReport>> run_ablation(
    const ExperimentConfig& cfg) {
  validate_config(cfg);
  if (cfg.ablation.kind.empty())
    throw ConfigError("run_ablation needs a configured ablation section");
  std::filesystem::path out(cfg.output_dir);
  std::filesystem::create_directories(out);
  write_text(out / "resolved_config.json", resolved_config_json(cfg));

  std::string stage = "data";
  write_status(out, "incomplete", stage, "");
  try {
    PipelineData pd = build_data(cfg);
    stage = "shadows";
    write_status(out, "incomplete", stage, "");
    shadow::ShadowEnsemble ensemble = build_ensemble(cfg, pd);
    stage = "attacks";
    write_status(out, "incomplete", stage, "");

    std::vector<std::pair<std::string, ExperimentConfig>> arms;
    if (cfg.ablation.kind == "topk") {
      for (int k : cfg.ablation.topk) {
        ExperimentConfig arm = cfg;
        arm.top_k = k;
        arms.emplace_back("topk_" + std::to_string(k), std::move(arm));
      }
    } else if (cfg.ablation.kind == "meta_arch") {
      for (const auto& kind : cfg.ablation.meta_kinds) {
        ExperimentConfig arm = cfg;
        arm.meta.kind = attack::parse_meta_kind(kind);
        arms.emplace_back("meta_" + kind, std::move(arm));
      }
    } else {
      for (int m : cfg.ablation.augmentations) {
        ExperimentConfig arm = cfg;
        arm.augmentations = m;
        arms.emplace_back("aug_" + std::to_string(m), std::move(arm));
      }
    }

    std::vector<std::pair<std::string, AttackReport>> reports;
    for (auto& [tag, arm] : arms) {
      arm.output_dir = (out / ("arm_" + tag)).string();
      validate_config(arm);
      AttackReport report = run_attacks(arm, ensemble);
      std::filesystem::path arm_dir(arm.output_dir);
      std::filesystem::create_directories(arm_dir);
      write_text(arm_dir / "resolved_config.json", resolved_config_json(arm));
      write_report_files(report, arm_dir);
      reports.emplace_back(tag, std::move(report));
    }
    write_status(out, "complete", "attacks", "");
    return reports;
  } catch (const Error& ex) {
    write_status(out, "incomplete", stage, ex.what());
    throw StageError(stage, cfg.master_seed, ex.what());
  }
}

}  // namespace ptleak::harness
