// ptleak command-line driver.
//
// Subcommands mirror the pipeline stages so long experiments can be staged
// and resumed: gen-data -> train-shadows -> attack -> eval, with `run` and
// `ablate` executing a whole experiment end to end.  Errors are reported as
// one JSON object on stderr so wrapper scripts can parse failures.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "ptleak/harness.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct CommonArgs {
  std::string config_path;
  std::optional<uint64_t> seed;
  std::string out;
};

ptleak::harness::ExperimentConfig load_with_overrides(const CommonArgs& args) {
  ptleak::harness::ExperimentConfig cfg =
      ptleak::harness::load_config(args.config_path);
  if (args.seed) cfg.master_seed = *args.seed;
  if (!args.out.empty()) {
    cfg.output_dir = args.out;
  } else if (const char* env = std::getenv("PTLEAK_OUT");
             env != nullptr && env[0] != '\0') {
    cfg.output_dir = env;
  }
  return cfg;
}

void print_summaries(const std::map<std::string, ptleak::metrics::Summary>& s) {
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
  std::cout << j.dump(2) << "\n";
}

void report_error(const ptleak::Error& ex) {
  json err;
  err["error"]["message"] = ex.what();
  if (const auto* staged = dynamic_cast<const ptleak::StageError*>(&ex))
    err["error"]["stage"] = staged->stage();
  std::cerr << err.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ptleak: membership-inference auditing for finetuned models"};
  app.require_subcommand(1);

  CommonArgs gen_args, shadows_args, attack_args, run_args, ablate_args;
  std::string ensemble_dir, scores_path, eval_out;

  auto add_common = [](CLI::App* sub, CommonArgs& args) {
    sub->add_option("--config", args.config_path, "experiment config (JSON)")
        ->required();
    sub->add_option("--seed", args.seed, "override master_seed");
    sub->add_option("--out", args.out, "output directory");
  };

  CLI::App* gen = app.add_subcommand(
      "gen-data", "sample the population, challenges, and task spec");
  add_common(gen, gen_args);

  CLI::App* shadows = app.add_subcommand(
      "train-shadows", "train the shadow ensemble and save it");
  add_common(shadows, shadows_args);

  CLI::App* attack = app.add_subcommand(
      "attack", "run the configured attacks against a saved ensemble");
  add_common(attack, attack_args);
  attack->add_option("--ensemble", ensemble_dir, "saved ensemble directory")
      ->required();

  CLI::App* eval = app.add_subcommand(
      "eval", "recompute summary metrics from a scores.csv");
  eval->add_option("--scores", scores_path, "scores.csv path")->required();
  eval->add_option("--out", eval_out, "output directory for summary.json");

  CLI::App* run =
      app.add_subcommand("run", "execute the full pipeline end to end");
  add_common(run, run_args);

  CLI::App* ablate =
      app.add_subcommand("ablate", "run the configured ablation arms");
  add_common(ablate, ablate_args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return 2;
  }

  try {
    if (gen->parsed()) {
      auto cfg = load_with_overrides(gen_args);
      fs::path out(cfg.output_dir);
      fs::create_directories(out);
      ptleak::harness::PipelineData pd = ptleak::harness::build_data(cfg);
      ptleak::data::write_spec_json(pd.spec, out / "pretrain_spec.json");
      ptleak::data::write_spec_json(pd.downstream, out / "downstream_spec.json");
      ptleak::data::write_dataset_csv(pd.population, out / "population.csv");
      ptleak::data::write_points_csv(pd.challenges.points,
                                     pd.population.feature_dim,
                                     out / "challenges.csv");
      std::cout << "wrote data artifacts to " << out.string() << "\n";
    } else if (shadows->parsed()) {
      auto cfg = load_with_overrides(shadows_args);
      fs::path out(cfg.output_dir);
      fs::create_directories(out);
      ptleak::harness::PipelineData pd = ptleak::harness::build_data(cfg);
      auto ensemble = ptleak::harness::build_ensemble(cfg, pd);
      ptleak::shadow::save_ensemble(ensemble, out / "ensemble");
      std::cout << "saved " << ensemble.entries.size()
                << " shadow models to " << (out / "ensemble").string() << "\n";
    } else if (attack->parsed()) {
      auto cfg = load_with_overrides(attack_args);
      fs::path edir(ensemble_dir);
      if (!fs::exists(edir / "manifest.json"))
        throw ptleak::LoadError("no ensemble found at " + edir.string() +
                                " (missing manifest.json)");
      auto ensemble = ptleak::shadow::load_ensemble(edir);
      fs::path out(cfg.output_dir);
      fs::create_directories(out);
      auto report = ptleak::harness::run_attacks(cfg, ensemble);
      ptleak::harness::write_report_files(report, out);
      std::map<std::string, ptleak::metrics::Summary> summaries;
      for (const auto& [name, s] : report.summaries)
        summaries[name] = s.pooled;
      print_summaries(summaries);
    } else if (eval->parsed()) {
      fs::path scores(scores_path);
      auto rows = ptleak::harness::read_scores_csv(scores);
      auto summaries = ptleak::harness::summaries_from_rows(rows);
      fs::path out =
          eval_out.empty() ? scores.parent_path() : fs::path(eval_out);
      if (out.empty()) out = ".";
      fs::create_directories(out);
      ptleak::harness::write_summary_json(summaries, out / "summary.json");
      print_summaries(summaries);
    } else if (run->parsed()) {
      auto cfg = load_with_overrides(run_args);
      auto report = ptleak::harness::run_experiment(cfg);
      std::map<std::string, ptleak::metrics::Summary> summaries;
      for (const auto& [name, s] : report.summaries)
        summaries[name] = s.pooled;
      print_summaries(summaries);
    } else if (ablate->parsed()) {
      auto cfg = load_with_overrides(ablate_args);
      auto reports = ptleak::harness::run_ablation(cfg);
      json j = json::object();
      for (const auto& [tag, report] : reports) {
        json arm = json::object();
        for (const auto& [name, s] : report.summaries)
          arm[name] = s.pooled.auc;
        j[tag] = std::move(arm);
      }
      std::cout << j.dump(2) << "\n";
    }
  } catch (const ptleak::Error& ex) {
    report_error(ex);
    return 1;
  } catch (const std::exception& ex) {
    json err;
    err["error"]["message"] = ex.what();
    std::cerr << err.dump() << "\n";
    return 1;
  }
  return 0;
}
