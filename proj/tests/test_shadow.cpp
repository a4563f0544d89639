#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "ptleak/errors.hpp"
#include "ptleak/rng.hpp"
#include "ptleak/shadow.hpp"

using namespace ptleak;
using nlohmann::json;

namespace {

struct Fixture {
  data::DistributionSpec spec;
  data::Dataset population;
  data::ChallengeSet challenges;
  data::DistributionSpec downstream;
  shadow::TrainBundle bundle;
  train::FinetuneStrategy strategy;
};

Fixture make_fixture(uint64_t seed, size_t pool = 80, size_t n_challenges = 8) {
  Fixture f;
  f.spec = data::make_pretrain_spec(4, 4, 2, 3.0, seed, 0.3);
  f.population = data::sample_population(f.spec, pool, rng::derive(seed, "pop"));
  f.challenges =
      data::designate_challenges(f.population, n_challenges, rng::derive(seed, "ch"));
  f.downstream = data::derive_task(f.spec, data::TaskKind::coarse, seed + 9);

  nn::TrainConfig quick;
  quick.epochs = 2;
  quick.batch_size = 10;
  quick.learning_rate = 0.1;
  quick.lr_schedule = nn::LrSchedule::cosine;
  f.bundle.pretrain_cfg = quick;
  f.bundle.finetune_cfg = quick;
  f.bundle.hidden = {6};
  f.bundle.ft_train_size = 30;
  return f;
}

shadow::ShadowEnsemble train_small(const Fixture& f, int n, uint64_t master) {
  return shadow::train_shadow_models(f.population, f.challenges, f.downstream,
                                     data::TaskKind::coarse, n, f.strategy,
                                     f.bundle, master);
}

bool entries_equal(const shadow::ShadowEntry& a, const shadow::ShadowEntry& b) {
  return a.pretrained == b.pretrained && a.finetuned == b.finetuned &&
         a.member_ids == b.member_ids && a.entry_seed == b.entry_seed;
}

}  // namespace

TEST_CASE("each entry trains on exactly half the pool") {
  Fixture f = make_fixture(1);
  auto ens = train_small(f, 2, 42);
  REQUIRE(ens.entries.size() == 2);
  CHECK(ens.manifest.entry_count == 2);
  CHECK(ens.manifest.subset_size == 40);

  std::set<uint64_t> pool_ids;
  for (const auto& p : f.population.points) pool_ids.insert(p.id);

  for (const auto& e : ens.entries) {
    CHECK(e.member_ids.size() == 40);  // floor(80 / 2)
    CHECK(std::is_sorted(e.member_ids.begin(), e.member_ids.end()));
    for (uint64_t id : e.member_ids) CHECK(pool_ids.count(id) == 1);
  }
  // The two subsets differ (overwhelmingly likely under distinct entry seeds).
  CHECK(ens.entries[0].member_ids != ens.entries[1].member_ids);
}

TEST_CASE("per-challenge membership counts look binomial") {
  Fixture f = make_fixture(2, 60, 10);
  auto ens = train_small(f, 32, 7);
  for (const auto& ch : f.challenges.points) {
    int in_count = 0;
    for (size_t e = 0; e < ens.entries.size(); ++e)
      if (shadow::membership_bit(ens, e, ch.id) == shadow::Membership::IN)
        ++in_count;
    // Binomial(32, 1/2): [8, 24] covers more than 99.8% of the mass; with
    // fixed seeds this is a deterministic regression check, not a flake.
    CHECK(in_count >= 8);
    CHECK(in_count <= 24);
  }
}

TEST_CASE("identical master seeds reproduce the ensemble exactly") {
  Fixture f = make_fixture(3);
  auto a = train_small(f, 3, 11);
  auto b = train_small(f, 3, 11);
  REQUIRE(a.entries.size() == b.entries.size());
  for (size_t i = 0; i < a.entries.size(); ++i)
    CHECK(entries_equal(a.entries[i], b.entries[i]));

  auto c = train_small(f, 3, 12);
  CHECK(!entries_equal(a.entries[0], c.entries[0]));
}

TEST_CASE("membership_bit matches the member list and validates ids") {
  Fixture f = make_fixture(4);
  auto ens = train_small(f, 2, 5);
  const auto& e0 = ens.entries[0];

  std::set<uint64_t> members(e0.member_ids.begin(), e0.member_ids.end());
  for (const auto& p : f.population.points) {
    auto bit = shadow::membership_bit(ens, 0, p.id);
    CHECK((bit == shadow::Membership::IN) == (members.count(p.id) == 1));
    CHECK(e0.is_member(p.id) == (members.count(p.id) == 1));
  }

  CHECK_THROWS_AS(shadow::membership_bit(ens, 0, 0xdeadbeef), IdError);
  CHECK_THROWS_AS(shadow::membership_bit(ens, 7, f.population.points[0].id),
                  SizeError);
}

TEST_CASE("rotations exclude exactly the target") {
  Fixture f = make_fixture(5);
  auto ens = train_small(f, 4, 31);
  auto rotations = shadow::rotate_targets(ens);
  REQUIRE(rotations.size() == 4);

  for (size_t t = 0; t < rotations.size(); ++t) {
    const auto& rot = rotations[t];
    CHECK(rot.target_index == static_cast<int>(t));
    REQUIRE(rot.view.size() == 3);
    // The view walks the remaining entries in index order.
    for (size_t i = 0; i < rot.view.size(); ++i) {
      size_t expect = i < t ? i : i + 1;
      CHECK(&rot.view.finetuned(i) == &ens.entries[expect].finetuned);
      CHECK(&rot.view.pretrained(i) == &ens.entries[expect].pretrained);
      uint64_t some_id = f.population.points[0].id;
      CHECK(rot.view.is_member(i, some_id) ==
            ens.entries[expect].is_member(some_id));
    }
  }
}

TEST_CASE("ensemble save/load round-trips exactly") {
  Fixture f = make_fixture(6);
  auto ens = train_small(f, 2, 99);
  ens.manifest.config_snapshot = "{\"note\":\"test\"}";

  auto dir = std::filesystem::temp_directory_path() / "ptleak_ens_rt";
  std::filesystem::remove_all(dir);
  shadow::save_ensemble(ens, dir);
  auto loaded = shadow::load_ensemble(dir);

  CHECK(loaded.manifest.schema_version == ens.manifest.schema_version);
  CHECK(loaded.manifest.entry_count == ens.manifest.entry_count);
  CHECK(loaded.manifest.subset_size == ens.manifest.subset_size);
  CHECK(loaded.manifest.master_seed == ens.manifest.master_seed);
  CHECK(loaded.manifest.downstream_kind == ens.manifest.downstream_kind);
  CHECK(loaded.manifest.downstream_class_count ==
        ens.manifest.downstream_class_count);
  CHECK(loaded.manifest.population_class_count ==
        ens.manifest.population_class_count);
  CHECK(loaded.manifest.config_snapshot == ens.manifest.config_snapshot);

  REQUIRE(loaded.population.points.size() == ens.population.points.size());
  for (size_t i = 0; i < loaded.population.points.size(); ++i) {
    CHECK(loaded.population.points[i].x == ens.population.points[i].x);
    CHECK(loaded.population.points[i].y == ens.population.points[i].y);
    CHECK(loaded.population.points[i].id == ens.population.points[i].id);
  }
  REQUIRE(loaded.challenge.points.size() == ens.challenge.points.size());
  for (size_t i = 0; i < loaded.challenge.points.size(); ++i)
    CHECK(loaded.challenge.points[i].id == ens.challenge.points[i].id);

  CHECK(loaded.downstream_spec.class_means == ens.downstream_spec.class_means);
  CHECK(loaded.downstream_spec.label_map == ens.downstream_spec.label_map);

  REQUIRE(loaded.entries.size() == ens.entries.size());
  for (size_t i = 0; i < loaded.entries.size(); ++i)
    CHECK(entries_equal(loaded.entries[i], ens.entries[i]));
  CHECK(loaded.population_ids == ens.population_ids);

  std::filesystem::remove_all(dir);
}

TEST_CASE("tampered or incomplete ensembles are rejected on load") {
  Fixture f = make_fixture(7);
  auto ens = train_small(f, 2, 13);
  auto dir = std::filesystem::temp_directory_path() / "ptleak_ens_tamper";

  SUBCASE("schema version") {
    std::filesystem::remove_all(dir);
    shadow::save_ensemble(ens, dir);
    auto manifest_path = dir / "manifest.json";
    std::ifstream in(manifest_path);
    std::stringstream ss;
    ss << in.rdbuf();
    in.close();
    json j = json::parse(ss.str());
    j["schema_version"] = 999;
    std::ofstream out(manifest_path);
    out << j.dump(2);
    out.close();
    CHECK_THROWS_AS(shadow::load_ensemble(dir), LoadError);
  }

  SUBCASE("missing entry file names the entry") {
    std::filesystem::remove_all(dir);
    shadow::save_ensemble(ens, dir);
    std::filesystem::remove(dir / "entry_1" / "finetuned.json");
    bool threw = false;
    try {
      shadow::load_ensemble(dir);
    } catch (const LoadError& ex) {
      threw = true;
      CHECK(std::string(ex.what()).find("entry 1") != std::string::npos);
    }
    CHECK(threw);
  }

  SUBCASE("missing directory") {
    std::filesystem::remove_all(dir);
    CHECK_THROWS_AS(shadow::load_ensemble(dir), LoadError);
  }

  std::filesystem::remove_all(dir);
}

TEST_CASE("refinetune keeps pretrained models and membership fixed") {
  Fixture f = make_fixture(8);
  auto base = train_small(f, 3, 55);

  auto task = data::derive_task(f.spec, data::TaskKind::disjoint, 777, 5);
  auto re = shadow::refinetune_ensemble(base, task, data::TaskKind::disjoint,
                                        f.strategy, f.bundle, 888);

  REQUIRE(re.entries.size() == base.entries.size());
  for (size_t i = 0; i < re.entries.size(); ++i) {
    // The pretrained network and the membership definition carry over.
    CHECK(re.entries[i].pretrained == base.entries[i].pretrained);
    CHECK(re.entries[i].member_ids == base.entries[i].member_ids);
    // The finetuned network is fresh, for the new task's class count.
    CHECK(re.entries[i].finetuned.class_count == 5);
    CHECK(re.entries[i].finetuned != base.entries[i].finetuned);
  }
  CHECK(re.manifest.downstream_kind == "disjoint");
  CHECK(re.manifest.downstream_class_count == 5);
  CHECK(re.manifest.master_seed == 888);

  // keep_n truncates the ensemble.
  auto re2 = shadow::refinetune_ensemble(base, task, data::TaskKind::disjoint,
                                         f.strategy, f.bundle, 888, 2);
  CHECK(re2.entries.size() == 2);
  CHECK(re2.entries[0].pretrained == base.entries[0].pretrained);

  // Same master seed reproduces the refinetuned models.
  auto re3 = shadow::refinetune_ensemble(base, task, data::TaskKind::disjoint,
                                         f.strategy, f.bundle, 888);
  for (size_t i = 0; i < re.entries.size(); ++i)
    CHECK(entries_equal(re.entries[i], re3.entries[i]));
}

TEST_CASE("training validates its inputs") {
  Fixture f = make_fixture(9);
  CHECK_THROWS_AS(train_small(f, 1, 1), SizeError);

  Fixture tiny = make_fixture(10, 80, 8);
  tiny.bundle.ft_train_size = 0;
  CHECK_THROWS_AS(shadow::train_shadow_models(
                      tiny.population, tiny.challenges, tiny.downstream,
                      data::TaskKind::coarse, 2, tiny.strategy, tiny.bundle, 1),
                  ConfigError);
}
