#include "ptleak/shadow.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>

#include "json.hpp"
#include "ptleak/parallel.hpp"
#include "ptleak/rng.hpp"

using nlohmann::json;

namespace ptleak::shadow {

namespace {

std::vector<uint64_t> sorted_ids(const data::Dataset& d) {
  std::vector<uint64_t> ids;
  ids.reserve(d.points.size());
  for (const auto& p : d.points) ids.push_back(p.id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

void require_known_id(const std::vector<uint64_t>& pool_ids, uint64_t id) {
  if (!std::binary_search(pool_ids.begin(), pool_ids.end(), id))
    throw IdError("challenge id " + std::to_string(id) +
                  " is not in the population pool");
}

// Half-subset of the pool for one entry, in pool order.
data::Dataset draw_member_subset(const data::Dataset& population,
                                 size_t subset_size, uint64_t seed) {
  std::vector<size_t> idx(population.points.size());
  std::iota(idx.begin(), idx.end(), size_t{0});
  rng::Prng gen(seed);
  gen.shuffle(idx);
  idx.resize(subset_size);
  std::sort(idx.begin(), idx.end());
  data::Dataset subset;
  subset.feature_dim = population.feature_dim;
  subset.class_count = population.class_count;
  subset.points.reserve(subset_size);
  for (size_t i : idx) subset.points.push_back(population.points[i]);
  return subset;
}

// Fresh downstream sample whose ids never collide with the population pool
// (relevant when the downstream distribution is the coarse relabeling of the
// pretraining mixture — finetuning must not reintroduce pool points).
data::Dataset draw_finetune_sample(const data::DistributionSpec& spec,
                                   size_t n,
                                   const std::vector<uint64_t>& pool_ids,
                                   uint64_t seed) {
  const size_t slack = 8;
  data::Dataset raw = data::sample_population(spec, n + slack, seed);
  data::Dataset out;
  out.feature_dim = raw.feature_dim;
  out.class_count = raw.class_count;
  out.points.reserve(n);
  for (auto& p : raw.points) {
    if (out.points.size() == n) break;
    if (std::binary_search(pool_ids.begin(), pool_ids.end(), p.id)) continue;
    out.points.push_back(std::move(p));
  }
  if (out.points.size() != n)
    throw SizeError("could not draw a finetune sample disjoint from the pool");
  return out;
}

ShadowEntry train_entry(const data::Dataset& population,
                        const std::vector<uint64_t>& pool_ids,
                        const data::DistributionSpec& downstream_spec,
                        const train::FinetuneStrategy& strategy,
                        const TrainBundle& cfgs, size_t subset_size,
                        uint64_t entry_seed) {
  ShadowEntry entry;
  entry.entry_seed = entry_seed;

  data::Dataset subset = draw_member_subset(
      population, subset_size, rng::derive(entry_seed, "pt_subset"));
  entry.member_ids = sorted_ids(subset);

  nn::TrainConfig pt_cfg = cfgs.pretrain_cfg;
  pt_cfg.seed = rng::derive(entry_seed, "pretrain");
  entry.pretrained = train::pretrain(subset, pt_cfg, cfgs.hidden);

  data::Dataset d_ft =
      draw_finetune_sample(downstream_spec, cfgs.ft_train_size, pool_ids,
                           rng::derive(entry_seed, "ft_sample"));

  nn::TrainConfig ft_cfg = cfgs.finetune_cfg;
  ft_cfg.seed = rng::derive(entry_seed, "finetune");
  if (cfgs.dp.has_value()) {
    entry.finetuned = train::dp_finetune(entry.pretrained, d_ft, *cfgs.dp,
                                         ft_cfg);
  } else {
    train::FinetuneStrategy st = strategy;
    st.head_init_seed = rng::derive(entry_seed, "head");
    entry.finetuned = train::finetune(entry.pretrained, d_ft, st, ft_cfg);
  }
  return entry;
}

// Refinetunes one existing entry on a new downstream task, reusing its
// pretrained model.
ShadowEntry refinetune_entry(const ShadowEntry& base,
                             const std::vector<uint64_t>& pool_ids,
                             const data::DistributionSpec& downstream_spec,
                             const train::FinetuneStrategy& strategy,
                             const TrainBundle& cfgs, uint64_t entry_seed) {
  ShadowEntry entry;
  entry.entry_seed = entry_seed;
  entry.member_ids = base.member_ids;
  entry.pretrained = base.pretrained;

  data::Dataset d_ft =
      draw_finetune_sample(downstream_spec, cfgs.ft_train_size, pool_ids,
                           rng::derive(entry_seed, "ft_sample"));
  nn::TrainConfig ft_cfg = cfgs.finetune_cfg;
  ft_cfg.seed = rng::derive(entry_seed, "finetune");
  if (cfgs.dp.has_value()) {
    entry.finetuned = train::dp_finetune(entry.pretrained, d_ft, *cfgs.dp,
                                         ft_cfg);
  } else {
    train::FinetuneStrategy st = strategy;
    st.head_init_seed = rng::derive(entry_seed, "head");
    entry.finetuned = train::finetune(entry.pretrained, d_ft, st, ft_cfg);
  }
  return entry;
}

void validate_train_inputs(const data::Dataset& population,
                           const data::ChallengeSet& challenge,
                           const TrainBundle& cfgs, int n) {
  if (n < 2) throw SizeError("shadow ensemble needs at least 2 entries");
  if (population.points.size() < 2)
    throw SizeError("population pool needs at least 2 points");
  data::validate_dataset(population);
  if (cfgs.ft_train_size == 0)
    throw ConfigError("ft_train_size must be positive");
  for (const auto& p : challenge.points)
    if (static_cast<int>(p.x.size()) != population.feature_dim)
      throw ShapeError("challenge point dim does not match population");
}

}  // namespace

ShadowEnsemble train_shadow_models(const data::Dataset& population,
                                   const data::ChallengeSet& challenge,
                                   const data::DistributionSpec& downstream_spec,
                                   data::TaskKind downstream_kind, int n,
                                   const train::FinetuneStrategy& strategy,
                                   const TrainBundle& cfgs,
                                   uint64_t master_seed, int workers) {
  validate_train_inputs(population, challenge, cfgs, n);

  ShadowEnsemble e;
  e.population = population;
  e.challenge = challenge;
  e.downstream_spec = downstream_spec;
  e.population_ids = sorted_ids(population);
  for (const auto& p : challenge.points)
    require_known_id(e.population_ids, p.id);

  size_t subset_size = population.points.size() / 2;
  e.manifest.entry_count = n;
  e.manifest.subset_size = subset_size;
  e.manifest.master_seed = master_seed;
  e.manifest.downstream_kind = data::to_string(downstream_kind);
  e.manifest.downstream_class_count = downstream_spec.class_count;
  e.manifest.population_class_count = population.class_count;

  e.entries.resize(static_cast<size_t>(n));
  parallel_for(static_cast<size_t>(n), workers, [&](size_t i) {
    uint64_t entry_seed = rng::derive(master_seed, "entry", i);
    e.entries[i] = train_entry(population, e.population_ids, downstream_spec,
                               strategy, cfgs, subset_size, entry_seed);
  });
  return e;
}

Membership membership_bit(const ShadowEnsemble& ensemble, size_t entry_index,
                          uint64_t challenge_id) {
  if (entry_index >= ensemble.entries.size())
    throw SizeError("entry index " + std::to_string(entry_index) +
                    " out of range for ensemble of size " +
                    std::to_string(ensemble.entries.size()));
  require_known_id(ensemble.population_ids, challenge_id);
  return ensemble.entries[entry_index].is_member(challenge_id)
             ? Membership::IN
             : Membership::OUT;
}

bool AttackerView::is_member(size_t i, uint64_t challenge_id) const {
  const ShadowEntry* entry = at(i);
  if (population_ids_) require_known_id(*population_ids_, challenge_id);
  return entry->is_member(challenge_id);
}

std::vector<Rotation> rotate_targets(const ShadowEnsemble& ensemble) {
  size_t n = ensemble.entries.size();
  if (n < 2)
    throw SizeError("rotation needs at least 2 ensemble entries");
  std::vector<Rotation> rotations;
  rotations.reserve(n);
  for (size_t target = 0; target < n; ++target) {
    std::vector<const ShadowEntry*> rest;
    rest.reserve(n - 1);
    for (size_t i = 0; i < n; ++i)
      if (i != target) rest.push_back(&ensemble.entries[i]);
    rotations.push_back(
        Rotation{target, AttackerView(std::move(rest),
                                      &ensemble.population_ids)});
  }
  return rotations;
}

ShadowEnsemble refinetune_ensemble(const ShadowEnsemble& base,
                                   const data::DistributionSpec& downstream_spec,
                                   data::TaskKind downstream_kind,
                                   const train::FinetuneStrategy& strategy,
                                   const TrainBundle& cfgs,
                                   uint64_t master_seed, size_t keep_n,
                                   int workers) {
  size_t n = keep_n == 0 ? base.entries.size()
                         : std::min(keep_n, base.entries.size());
  if (n < 2)
    throw SizeError("refinetuned ensemble needs at least 2 entries");
  if (cfgs.ft_train_size == 0)
    throw ConfigError("ft_train_size must be positive");

  ShadowEnsemble e;
  e.population = base.population;
  e.challenge = base.challenge;
  e.downstream_spec = downstream_spec;
  e.population_ids = base.population_ids;
  e.manifest = base.manifest;
  e.manifest.entry_count = static_cast<int>(n);
  e.manifest.master_seed = master_seed;
  e.manifest.downstream_kind = data::to_string(downstream_kind);
  e.manifest.downstream_class_count = downstream_spec.class_count;
  e.manifest.config_snapshot.clear();

  e.entries.resize(n);
  parallel_for(n, workers, [&](size_t i) {
    uint64_t entry_seed = rng::derive(master_seed, "entry", i);
    e.entries[i] = refinetune_entry(base.entries[i], e.population_ids,
                                    downstream_spec, strategy, cfgs,
                                    entry_seed);
  });
  return e;
}

// ---- persistence ----

namespace {

void write_members_csv(const std::vector<uint64_t>& ids,
                       const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot open " + path.string() + " for writing");
  out << "id\n";
  for (uint64_t id : ids) out << id << "\n";
  if (!out) throw LoadError("write failed for " + path.string());
}

std::vector<uint64_t> read_members_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "id")
    throw LoadError("bad members.csv header in " + path.string());
  std::vector<uint64_t> ids;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(line.data(), line.data() + line.size(), v);
    if (ec != std::errc() || ptr != line.data() + line.size())
      throw LoadError("bad member id '" + line + "' in " + path.string());
    ids.push_back(v);
  }
  if (!std::is_sorted(ids.begin(), ids.end()))
    throw LoadError("member ids not sorted in " + path.string());
  return ids;
}

json manifest_to_json(const ShadowEnsemble& e) {
  json j;
  j["schema_version"] = e.manifest.schema_version;
  j["entry_count"] = e.manifest.entry_count;
  j["subset_size"] = e.manifest.subset_size;
  j["master_seed"] = e.manifest.master_seed;
  j["downstream_kind"] = e.manifest.downstream_kind;
  j["downstream_class_count"] = e.manifest.downstream_class_count;
  j["population_class_count"] = e.manifest.population_class_count;
  j["config_snapshot"] = e.manifest.config_snapshot;
  json seeds = json::array();
  for (const auto& entry : e.entries) seeds.push_back(entry.entry_seed);
  j["entry_seeds"] = std::move(seeds);
  return j;
}

}  // namespace

void save_ensemble(const ShadowEnsemble& ensemble,
                   const std::filesystem::path& dir) {
  if (ensemble.entries.size() !=
      static_cast<size_t>(ensemble.manifest.entry_count))
    throw SizeError("manifest entry_count does not match entries");
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "manifest.json");
    if (!out)
      throw LoadError("cannot open " + (dir / "manifest.json").string() +
                      " for writing");
    out << manifest_to_json(ensemble).dump(2) << "\n";
  }
  data::write_dataset_csv(ensemble.population, dir / "population.csv");
  data::write_points_csv(ensemble.challenge.points, ensemble.population.feature_dim,
                         dir / "challenges.csv");
  data::write_spec_json(ensemble.downstream_spec, dir / "downstream_spec.json");
  for (size_t i = 0; i < ensemble.entries.size(); ++i) {
    const auto& entry = ensemble.entries[i];
    std::filesystem::path edir = dir / ("entry_" + std::to_string(i));
    std::filesystem::create_directories(edir);
    nn::save_model(entry.pretrained, edir / "pretrained.json");
    nn::save_model(entry.finetuned, edir / "finetuned.json");
    write_members_csv(entry.member_ids, edir / "members.csv");
  }
}

ShadowEnsemble load_ensemble(const std::filesystem::path& dir) {
  json j;
  {
    std::ifstream in(dir / "manifest.json");
    if (!in)
      throw LoadError("cannot open " + (dir / "manifest.json").string());
    try {
      in >> j;
    } catch (const json::exception& ex) {
      throw LoadError("bad manifest.json: " + std::string(ex.what()));
    }
  }
  ShadowEnsemble e;
  try {
    e.manifest.schema_version = j.at("schema_version").get<int>();
    if (e.manifest.schema_version != kEnsembleSchemaVersion)
      throw LoadError("unsupported ensemble schema_version " +
                      std::to_string(e.manifest.schema_version));
    e.manifest.entry_count = j.at("entry_count").get<int>();
    e.manifest.subset_size = j.at("subset_size").get<size_t>();
    e.manifest.master_seed = j.at("master_seed").get<uint64_t>();
    e.manifest.downstream_kind = j.at("downstream_kind").get<std::string>();
    e.manifest.downstream_class_count =
        j.at("downstream_class_count").get<int>();
    e.manifest.population_class_count =
        j.at("population_class_count").get<int>();
    e.manifest.config_snapshot = j.at("config_snapshot").get<std::string>();
  } catch (const json::exception& ex) {
    throw LoadError("bad manifest.json: " + std::string(ex.what()));
  }
  if (e.manifest.entry_count < 0)
    throw LoadError("negative entry_count in manifest");
  const json& seeds = j.at("entry_seeds");
  if (!seeds.is_array() ||
      seeds.size() != static_cast<size_t>(e.manifest.entry_count))
    throw LoadError("entry_seeds does not match entry_count");

  e.population = data::read_dataset_csv(dir / "population.csv",
                                        e.manifest.population_class_count);
  e.population_ids = sorted_ids(e.population);
  auto [challenge_points, challenge_dim] =
      data::read_points_csv(dir / "challenges.csv");
  if (!challenge_points.empty() && challenge_dim != e.population.feature_dim)
    throw LoadError("challenge feature_dim does not match population");
  e.challenge.points = std::move(challenge_points);
  e.downstream_spec = data::read_spec_json(dir / "downstream_spec.json");

  e.entries.resize(static_cast<size_t>(e.manifest.entry_count));
  for (size_t i = 0; i < e.entries.size(); ++i) {
    std::filesystem::path edir = dir / ("entry_" + std::to_string(i));
    try {
      e.entries[i].pretrained = nn::load_model(edir / "pretrained.json");
      e.entries[i].finetuned = nn::load_model(edir / "finetuned.json");
      e.entries[i].member_ids = read_members_csv(edir / "members.csv");
      e.entries[i].entry_seed = seeds[i].get<uint64_t>();
    } catch (const Error& ex) {
      throw LoadError("entry " + std::to_string(i) + ": " + ex.what());
    } catch (const json::exception& ex) {
      throw LoadError("entry " + std::to_string(i) + ": " + ex.what());
    }
    if (e.entries[i].member_ids.size() != e.manifest.subset_size)
      throw LoadError("entry " + std::to_string(i) +
                      ": member set size does not match manifest subset_size");
  }
  return e;
}

}  // namespace ptleak::shadow
