#pragma once

// Shadow-model ensembles: N models, each pretrained on an independent random
// half of the population pool and finetuned on a fresh downstream sample.
// Provides challenge-membership ground truth, the leave-one-out rotation used
// to evaluate attacks, and directory persistence.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ptleak/data.hpp"
#include "ptleak/nn.hpp"
#include "ptleak/train.hpp"

namespace ptleak::shadow {

inline constexpr int kEnsembleSchemaVersion = 1;

struct ShadowEntry {
  nn::Model pretrained;
  nn::Model finetuned;
  std::vector<uint64_t> member_ids;  // sorted pretraining member ids
  uint64_t entry_seed = 0;
  bool operator==(const ShadowEntry&) const = default;
  bool is_member(uint64_t id) const {
    return std::binary_search(member_ids.begin(), member_ids.end(), id);
  }
};

struct EnsembleManifest {
  int schema_version = kEnsembleSchemaVersion;
  int entry_count = 0;
  size_t subset_size = 0;  // pretraining subset size (half the pool)
  uint64_t master_seed = 0;
  std::string downstream_kind;
  int downstream_class_count = 0;
  int population_class_count = 0;
  std::string config_snapshot;  // free-form JSON text recorded by the caller
  bool operator==(const EnsembleManifest&) const = default;
};

struct TrainBundle {
  nn::TrainConfig pretrain_cfg;
  nn::TrainConfig finetune_cfg;
  std::vector<int> hidden = {64, 32};
  size_t ft_train_size = 2000;
  std::optional<train::DPConfig> dp;  // set = DP-SGD head finetuning
};

struct ShadowEnsemble {
  EnsembleManifest manifest;
  data::Dataset population;
  data::ChallengeSet challenge;
  data::DistributionSpec downstream_spec;
  std::vector<ShadowEntry> entries;
  std::vector<uint64_t> population_ids;  // sorted, for id validation
  bool operator==(const ShadowEnsemble&) const = default;
  size_t size() const { return entries.size(); }
};

enum class Membership { OUT = 0, IN = 1 };

// Trains the ensemble: entry i pretrains on a seeded half of `population`
// and finetunes on a fresh sample of `downstream_spec` (size
// cfgs.ft_train_size). Per-entry seeds derive from master_seed, so results do
// not depend on worker scheduling.
ShadowEnsemble train_shadow_models(const data::Dataset& population,
                                   const data::ChallengeSet& challenge,
                                   const data::DistributionSpec& downstream_spec,
                                   data::TaskKind downstream_kind, int n,
                                   const train::FinetuneStrategy& strategy,
                                   const TrainBundle& cfgs,
                                   uint64_t master_seed, int workers = 0);

// Ground truth: was challenge_id in entry_index's pretraining subset?
// Unknown ids (not in the population pool) raise IdError.
Membership membership_bit(const ShadowEnsemble& ensemble, size_t entry_index,
                          uint64_t challenge_id);

// What the adversary is allowed to see for one rotation: every entry except
// the target. Membership queries go to those shadow entries only — the type
// holds no reference to the target entry, so the target's member set is
// unreachable by construction.
class AttackerView {
 public:
  AttackerView(std::vector<const ShadowEntry*> entries,
               const std::vector<uint64_t>* population_ids)
      : entries_(std::move(entries)), population_ids_(population_ids) {}

  size_t size() const { return entries_.size(); }
  const nn::Model& finetuned(size_t i) const { return at(i)->finetuned; }
  const nn::Model& pretrained(size_t i) const { return at(i)->pretrained; }
  bool is_member(size_t i, uint64_t challenge_id) const;

 private:
  const ShadowEntry* at(size_t i) const {
    if (i >= entries_.size())
      throw SizeError("attacker view index out of range");
    return entries_[i];
  }
  std::vector<const ShadowEntry*> entries_;
  const std::vector<uint64_t>* population_ids_;
};

struct Rotation {
  size_t target_index;
  AttackerView view;
};

// One rotation per entry; views reference the ensemble, which must outlive
// them.
std::vector<Rotation> rotate_targets(const ShadowEnsemble& ensemble);

// Rebuilds finetuned models from the existing pretrained models for a (new)
// downstream task, keeping the first keep_n entries (0 = all). Pretrained
// models, member sets, population, and challenges are shared unchanged.
ShadowEnsemble refinetune_ensemble(const ShadowEnsemble& base,
                                   const data::DistributionSpec& downstream_spec,
                                   data::TaskKind downstream_kind,
                                   const train::FinetuneStrategy& strategy,
                                   const TrainBundle& cfgs,
                                   uint64_t master_seed, size_t keep_n = 0,
                                   int workers = 0);

// Directory layout: manifest.json, population.csv, challenges.csv,
// downstream_spec.json, entry_<i>/{pretrained.json,finetuned.json,
// members.csv}. Round-trips bit-exactly.
void save_ensemble(const ShadowEnsemble& ensemble,
                   const std::filesystem::path& dir);
ShadowEnsemble load_ensemble(const std::filesystem::path& dir);

}  // namespace ptleak::shadow
