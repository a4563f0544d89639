#pragma once

// Experiment orchestration: strict JSON config, the staged pipeline
// (data -> shadows -> attacks -> report), rotating-target attack execution
// over a prediction cache, ablation driver, and artifact emission
// (scores.csv, roc_*.csv, summary.json, report.json, run_status.json).

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ptleak/attack.hpp"
#include "ptleak/data.hpp"
#include "ptleak/metrics.hpp"
#include "ptleak/shadow.hpp"
#include "ptleak/train.hpp"

namespace ptleak::harness {

inline constexpr int kConfigSchemaVersion = 1;

enum class AttackKind { tmi, lira_adapted, lira_direct, tmi_global };
AttackKind parse_attack_kind(const std::string& s);
std::string to_string(AttackKind kind);

struct DataParams {
  int feature_dim = 16;
  int fine_classes = 20;
  int coarse_classes = 5;
  double separation = 3.0;
  double class_cov_scale = 1.0;
  size_t pool_size = 4000;
  size_t challenge_count = 200;
  bool shuffle_labels = false;  // null-control: permute pool labels at gen
  bool operator==(const DataParams&) const = default;
};

struct DownstreamParams {
  data::TaskKind kind = data::TaskKind::coarse;
  int class_count = 0;  // 0 = kind default
  size_t ft_train_size = 2000;
  bool operator==(const DownstreamParams&) const = default;
};

struct ShadowParams {
  int count = 32;
  std::vector<int> hidden = {64, 32};
  nn::TrainConfig pretrain;  // seeds in these are ignored; derived per entry
  nn::TrainConfig finetune;
  bool operator==(const ShadowParams&) const = default;
};

struct AblationParams {
  std::string kind;  // "topk" | "meta_arch" | "augmentations" | "" (none)
  std::vector<int> topk;
  std::vector<std::string> meta_kinds;
  std::vector<int> augmentations;
  bool operator==(const AblationParams&) const = default;
};

struct ExperimentConfig {
  uint64_t master_seed = 0;
  std::string output_dir = "out";
  int workers = 0;  // 0 = PTLEAK_WORKERS env, then hardware
  bool save_ensemble = false;
  DataParams data;
  DownstreamParams downstream;
  ShadowParams shadow;
  train::FinetuneStrategy strategy;
  std::optional<train::DPConfig> dp;
  std::vector<AttackKind> attacks = {AttackKind::tmi, AttackKind::lira_adapted,
                                     AttackKind::lira_direct};
  int augmentations = 8;
  double augmentation_strength = 0.5;
  int top_k = 0;  // 0 = no masking of finetuned-model outputs
  attack::MetaArch meta;         // per-point metaclassifier
  attack::MetaArch global_meta;  // pooled variant (defaults to knn)
  double lira_ridge = attack::kDefaultRidge;
  size_t eval_sample_size = 1000;
  AblationParams ablation;
  bool operator==(const ExperimentConfig&) const = default;
};

// Strict parse: unknown fields anywhere in the document are rejected.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
// Full echo including defaulted fields; parse(resolved_config_json(c)) == c.
std::string resolved_config_json(const ExperimentConfig& cfg);
void validate_config(const ExperimentConfig& cfg);

// FNV-1a hash of the resolved config text, as fixed-width hex. Stamped into
// every output file header.
std::string manifest_hash(const ExperimentConfig& cfg);

// ---- pipeline stages ----

struct PipelineData {
  data::DistributionSpec spec;        // pretraining distribution
  data::DistributionSpec downstream;  // derived finetuning distribution
  data::Dataset population;
  data::ChallengeSet challenges;
};

PipelineData build_data(const ExperimentConfig& cfg);
shadow::ShadowEnsemble build_ensemble(const ExperimentConfig& cfg,
                                      const PipelineData& pd);

// Raw model outputs for every (entry, challenge, view) triple, computed once
// so that attacks are pure post-processing. Entries double as targets.
struct ViewCache {
  int views = 0;
  // finetuned-model raw prediction vectors [entry][challenge][view]
  std::vector<std::vector<std::vector<nn::PredictionVector>>> ft_raw;
  // scaled confidence at the true label on the pretrained models
  std::vector<std::vector<std::vector<double>>> pt_stat;
};

ViewCache build_view_cache(const shadow::ShadowEnsemble& ensemble, int views,
                           double strength, uint64_t master_seed, int workers,
                           bool need_pretrained);

// ---- reporting ----

struct ScoreRow {
  uint64_t challenge_id = 0;
  int target_index = 0;
  std::string attack;
  double score = 0.0;
  int member_bit = 0;
  bool operator==(const ScoreRow&) const = default;
};

struct SkipRecord {
  std::string attack;
  int target_index = 0;
  uint64_t challenge_id = 0;
  std::string reason;
};

struct AttackSummary {
  metrics::Summary pooled;
  std::vector<std::optional<double>> per_target_auc;  // null if one-class
  long long skipped = 0;
};

struct AttackReport {
  std::string manifest_hash;
  std::vector<ScoreRow> rows;
  std::map<std::string, AttackSummary> summaries;
  std::vector<SkipRecord> skips;
  double mean_downstream_accuracy = 0.0;
};

// Rotating-target attack execution plus metrics; pure with respect to the
// ensemble (stage isolation).
AttackReport run_attacks(const ExperimentConfig& cfg,
                         const shadow::ShadowEnsemble& ensemble);

// End-to-end pipeline; writes artifacts into cfg.output_dir and marks
// run_status.json incomplete if any stage throws.
AttackReport run_experiment(const ExperimentConfig& cfg);

// One trained ensemble, one report per ablation arm (tag, report); artifacts
// land in cfg.output_dir/arm_<tag>/.
std::vector<std::pair<std::string, AttackReport>> run_ablation(
    const ExperimentConfig& cfg);

// ---- artifact io ----

void write_report_files(const AttackReport& report,
                        const std::filesystem::path& dir);
std::vector<ScoreRow> read_scores_csv(const std::filesystem::path& path);
// The summary block recomputed from rows alone; identical to the one a run
// writes (the `eval` subcommand's contract).
std::map<std::string, metrics::Summary> summaries_from_rows(
    const std::vector<ScoreRow>& rows);
void write_summary_json(const std::map<std::string, metrics::Summary>& s,
                        const std::filesystem::path& path);

}  // namespace ptleak::harness
