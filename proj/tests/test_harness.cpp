#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "helpers.hpp"
#include "s3pet/experiment.hpp"

namespace s3pet {
namespace {

namespace fs = std::filesystem;

const std::string kSourceDir = S3PET_SOURCE_DIR;
const std::string kCli = S3PET_CLI_PATH;

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("s3pet_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

ExperimentConfig smoke_config() { return load_experiment(kSourceDir + "/configs/smoke.json"); }

TEST(Tasks, DeterministicSplitsOfTheRequestedSize) {
  for (TaskKind kind : {TaskKind::kSequenceCopy, TaskKind::kParity, TaskKind::kKeyValueRecall}) {
    SyntheticTask t;
    t.kind = kind;
    t.seq_len = kind == TaskKind::kSequenceCopy ? 6 : 9;
    t.label_space = kind == TaskKind::kParity ? 2 : 8;
    t.train_size = 40;
    t.val_size = 10;
    t.test_size = 12;
    const DataSplit a = generate_task(t);
    const DataSplit b = generate_task(t);
    EXPECT_EQ(a.train.size(), 40u);
    EXPECT_EQ(a.val.size(), 10u);
    EXPECT_EQ(a.test.size(), 12u);
    EXPECT_EQ(a.delta.size() + a.alpha.size(), a.train.size());
    for (std::size_t i = 0; i < a.train.size(); ++i) {
      EXPECT_EQ(a.train[i].tokens.encoder, b.train[i].tokens.encoder);
      EXPECT_EQ(a.train[i].targets, b.train[i].targets);
    }
    t.seed = 99;
    const DataSplit c = generate_task(t);
    bool differs = false;
    for (std::size_t i = 0; i < a.train.size(); ++i) differs = differs || a.train[i].tokens.encoder != c.train[i].tokens.encoder;
    EXPECT_TRUE(differs) << to_string(kind);
  }
}

TEST(Tasks, LabelsFollowTheTaskRules) {
  SyntheticTask parity;
  parity.kind = TaskKind::kParity;
  parity.seq_len = 10;
  parity.label_space = 2;
  const auto pos = parity_positions(parity);
  ASSERT_EQ(pos.size(), 2u);
  for (const Example& ex : generate_task(parity).train) {
    const int bit = (ex.tokens.encoder[pos[0]] - kFirstContentToken) ^ (ex.tokens.encoder[pos[1]] - kFirstContentToken);
    EXPECT_EQ(ex.targets, std::vector<int>{kFirstContentToken + bit});
  }

  SyntheticTask kv;
  const auto table = key_value_table(kv);
  const int key_base = kFirstContentToken + kv.label_space;
  for (const Example& ex : generate_task(kv).test) {
    ASSERT_EQ(ex.tokens.encoder.size(), static_cast<std::size_t>(kv.seq_len));
    const int query = ex.tokens.encoder.back();
    EXPECT_EQ(ex.tokens.decoder, std::vector<int>{query});
    EXPECT_EQ(ex.targets[0], table[static_cast<std::size_t>(query - key_base)]);
  }

  SyntheticTask copy;
  copy.kind = TaskKind::kSequenceCopy;
  copy.seq_len = 6;
  for (const Example& ex : generate_task(copy).val) EXPECT_EQ(ex.targets, ex.tokens.encoder);
}

TEST(Tasks, RejectsInconsistentSettings) {
  SyntheticTask t;
  t.seq_len = 12;  // key-value-recall needs an odd length
  EXPECT_THROW(generate_task(t), ConfigError);
  t = SyntheticTask{};
  t.kind = TaskKind::kParity;
  EXPECT_THROW(generate_task(t), ConfigError);  // label_space 16
  t = SyntheticTask{};
  t.kind = TaskKind::kParity;
  t.label_space = 2;
  t.seq_len = 3;
  t.train_size = 100;  // only 8 distinct inputs exist
  EXPECT_THROW(generate_task(t), ConfigError);
}

TEST(Config, ShippedConfigsLoadAndRoundTrip) {
  for (const char* name : {"kv_recall.json", "parity_transfer.json", "smoke.json"}) {
    const ExperimentConfig c = load_experiment(kSourceDir + "/configs/" + name);
    const nlohmann::json j = to_json(c);
    EXPECT_EQ(to_json(experiment_from_json(j)), j) << name;
  }
  const ExperimentConfig c = load_experiment(kSourceDir + "/configs/kv_recall.json");
  EXPECT_EQ(c.search.budget.unit, Budget::Unit::kCount);
  EXPECT_EQ(c.search.budget.value, 486.0);
}

TEST(Config, StrictAboutFieldsAndTypes) {
  const nlohmann::json good = to_json(smoke_config());
  nlohmann::json j = good;
  j["search"]["inner_lrr"] = 0.1;
  EXPECT_THROW(experiment_from_json(j), ConfigError);
  j = good;
  j["bogus"] = 1;
  EXPECT_THROW(experiment_from_json(j), ConfigError);
  j = good;
  j["search"]["steps"] = "many";
  EXPECT_THROW(experiment_from_json(j), ConfigError);
  j = good;
  j["search"]["budget"] = "10‱";
  EXPECT_EQ(experiment_from_json(j).search.budget.unit, Budget::Unit::kPermyriad);
  j["search"]["budget"] = -4;
  EXPECT_THROW(experiment_from_json(j), ConfigError);
  j = good;
  j["task"]["seq_len"] = 40;
  EXPECT_THROW(validate(experiment_from_json(j)), ConfigError);
  EXPECT_THROW(load_experiment("/nonexistent/config.json"), IoError);
}

TEST(Budget, RatioExample) {
  EXPECT_DOUBLE_EQ(permyriad_ratio(1000, 100000), 100.0);
  EXPECT_DOUBLE_EQ(Budget::permyriad(100).resolve(100000), 1000.0);
}

TEST(Baselines, ManualKindsCoverEveryLegalSite) {
  const BackboneConfig b;
  struct Want {
    BaselineKind kind;
    std::size_t modules, params;
  };
  for (const Want& w : {Want{BaselineKind::kBitFit, 44, 1536}, Want{BaselineKind::kLNFit, 12, 384},
                        Want{BaselineKind::kLoRAR1, 32, 2304}, Want{BaselineKind::kAdapterLR, 10, 640}}) {
    const SearchedStructure s = baseline_structure(w.kind, -1.0, b, SearchSpace::kMix, 0);
    EXPECT_EQ(s.sites.size(), w.modules) << to_string(w.kind);
    EXPECT_EQ(s.total_params, w.params) << to_string(w.kind);
  }
  const SearchedStructure capped = baseline_structure(BaselineKind::kBitFit, 100.0, b, SearchSpace::kMix, 0);
  EXPECT_LE(capped.total_params, 100u);
  EXPECT_FALSE(capped.sites.empty());
  EXPECT_THROW(baseline_structure(BaselineKind::kLoRAR1, 10.0, b, SearchSpace::kMix, 0), ConfigError);
  EXPECT_EQ(parse_baseline_kind("adapter_lr"), BaselineKind::kAdapterLR);
  EXPECT_THROW(parse_baseline_kind("prefix"), ConfigError);
}

TEST(Baselines, RandomSubsetIsSeededAndWithinBudget) {
  const BackboneConfig b;
  const auto a = baseline_structure(BaselineKind::kRandomSubset, 486.0, b, SearchSpace::kMix, 3);
  const auto again = baseline_structure(BaselineKind::kRandomSubset, 486.0, b, SearchSpace::kMix, 3);
  const auto other = baseline_structure(BaselineKind::kRandomSubset, 486.0, b, SearchSpace::kMix, 4);
  EXPECT_EQ(a, again);
  EXPECT_NE(a.sites, other.sites);
  EXPECT_LE(a.total_params, 486u);
  // Filling stops only when nothing else fits: every left-out module overflows.
  const auto space = enumerate_space(b, SearchSpace::kMix);
  const auto counts = candidate_param_counts(space, b);
  for (std::size_t i = 0; i < space.size(); ++i) {
    bool taken = false;
    for (const auto& e : a.sites) taken = taken || (e.site == space[i].site && e.kind == space[i].kind);
    if (!taken) {
      EXPECT_GT(a.total_params + counts[i], 486u);
    }
  }
  EXPECT_THROW(baseline_structure(BaselineKind::kRandomSubset, -1.0, b, SearchSpace::kMix, 0), ConfigError);
}

// Writes a p.csv with one block at `step` where the i-th candidate has p[i].
std::string write_probabilities(const fs::path& path, const std::vector<Candidate>& space,
                                const std::vector<std::size_t>& counts, const std::vector<ProbabilitySnapshot>& snaps) {
  std::ofstream(path, std::ios::binary) << probability_csv(snaps, space, counts);
  return path.string();
}

TEST(Heatmap, AveragesComplementaryRunsToOneHalf) {
  const fs::path dir = scratch("heatmap");
  const BackboneConfig b;
  const auto space = enumerate_space(b, SearchSpace::kMix);
  const auto counts = candidate_param_counts(space, b);
  Rng rng(41);
  std::vector<double> p(space.size()), q(space.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = rng.uniform_open();
    q[i] = 1.0 - p[i];
  }
  // An earlier block with other values must be ignored.
  const std::vector<double> early(space.size(), 0.9);
  const auto f1 = write_probabilities(dir / "a.csv", space, counts, {{0, early}, {10, p}});
  const auto f2 = write_probabilities(dir / "b.csv", space, counts, {{10, q}});
  const HeatmapGrid g = build_heatmap({f1, f2});
  EXPECT_EQ(g.rows.size(), 6u);
  std::size_t filled = 0;
  for (const auto& row : g.values) {
    for (double v : row) {
      if (std::isnan(v)) continue;
      EXPECT_NEAR(v, 0.5, 1e-12);
      ++filled;
    }
  }
  EXPECT_EQ(filled, space.size());
  EXPECT_EQ(g.rows.front(), "encoder.0");
  EXPECT_EQ(g.rows.back(), "decoder.2");
  fs::remove_all(dir);
}

TEST(Heatmap, SingleRunReproducesItsProbabilities) {
  const fs::path dir = scratch("heatmap_single");
  const BackboneConfig b;
  const auto space = enumerate_space(b, SearchSpace::kMix);
  const auto counts = candidate_param_counts(space, b);
  std::vector<double> p(space.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = (static_cast<double>(i) + 0.5) / static_cast<double>(p.size());
  const HeatmapGrid g = build_heatmap({write_probabilities(dir / "a.csv", space, counts, {{3, p}})});
  for (std::size_t i = 0; i < space.size(); ++i) {
    const SiteId& s = space[i].site;
    const std::string row = std::string(to_string(s.stack)) + "." + std::to_string(s.layer);
    const std::string col = std::string(to_string(s.kind)) + "." + std::string(to_string(s.projection)) + ":" +
                            std::string(to_string(space[i].kind));
    const auto r = std::find(g.rows.begin(), g.rows.end(), row) - g.rows.begin();
    const auto c = std::find(g.columns.begin(), g.columns.end(), col) - g.columns.begin();
    ASSERT_LT(static_cast<std::size_t>(r), g.rows.size()) << row;
    ASSERT_LT(static_cast<std::size_t>(c), g.columns.size()) << col;
    EXPECT_DOUBLE_EQ(g.values[r][c], p[i]);
  }
  fs::remove_all(dir);
}

TEST(Heatmap, RejectsRunsOverDifferentSpaces) {
  const fs::path dir = scratch("heatmap_mismatch");
  const BackboneConfig b;
  const auto mix = enumerate_space(b, SearchSpace::kMix);
  const auto lora = enumerate_space(b, SearchSpace::kLoRA);
  const auto f1 = write_probabilities(dir / "a.csv", mix, candidate_param_counts(mix, b),
                                      {{1, std::vector<double>(mix.size(), 0.5)}});
  const auto f2 = write_probabilities(dir / "b.csv", lora, candidate_param_counts(lora, b),
                                      {{1, std::vector<double>(lora.size(), 0.5)}});
  EXPECT_THROW(build_heatmap({f1, f2}), MismatchError);
  EXPECT_THROW(build_heatmap({(dir / "missing.csv").string()}), IoError);
  std::ofstream(dir / "bad.csv") << "step,p\n1,0.5\n";
  EXPECT_THROW(build_heatmap({(dir / "bad.csv").string()}), ParseError);
  fs::remove_all(dir);
}

TEST(Artifacts, SameSeedGivesByteIdenticalOutput) {
  const fs::path dir = scratch("artifacts");
  const ExperimentConfig c = smoke_config();
  run_search(c, dir / "a");
  run_search(c, dir / "b");
  for (const char* f : {"structure.json", "history.csv", "p.csv", "summary.json", "config.json", "backbone.bin"}) {
    ASSERT_TRUE(fs::exists(dir / "a" / f)) << f;
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
  }
  EXPECT_EQ(slurp(dir / "a" / "history.csv").substr(0, 52), "step,loss_delta,loss_alpha,expected_params,zeta,val_");
  // The saved structure retrains on the same task.
  const RetrainMetrics m = run_retrain((dir / "a" / "structure.json").string(), c, dir / "r");
  EXPECT_TRUE(fs::exists(dir / "r" / "retrain.json"));
  EXPECT_GT(m.trainable_params, 0u);
  fs::remove_all(dir);
}

TEST(Sweep, WritesEveryPointAndSummaries) {
  const fs::path dir = scratch("sweep");
  const ExperimentConfig c = smoke_config();
  const auto serial = run_sweep(c, dir / "one", 1);
  ASSERT_EQ(serial.size(), 4u);
  EXPECT_TRUE(fs::exists(dir / "one" / "sweep.csv"));
  EXPECT_TRUE(fs::exists(dir / "one" / "budget_0" / "summary.json"));
  EXPECT_TRUE(fs::exists(dir / "one" / "budget_1" / "l0" / "seed_0" / "p.csv"));
  for (const auto& p : serial) EXPECT_LE(static_cast<double>(p.summary.total_params), p.summary.budget);
  const auto parallel = run_sweep(c, dir / "two", 2);
  EXPECT_EQ(slurp(dir / "one" / "sweep.csv"), slurp(dir / "two" / "sweep.csv"));

  ExperimentConfig bad = c;
  bad.sweep.budgets_permyriad = {0.001};
  EXPECT_THROW(run_sweep(bad, dir / "bad", 1), ConfigError);
  fs::remove_all(dir);
}

int run_cli(const std::string& args) {
  const std::string cmd = "'" + kCli + "' " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Cli, ExitCodes) {
  const fs::path dir = scratch("cli");
  const std::string smoke = kSourceDir + "/configs/smoke.json";
  EXPECT_EQ(run_cli("selftest"), 0);
  EXPECT_EQ(run_cli("search --config '" + smoke + "' --out '" + (dir / "ok").string() + "'"), 0);
  EXPECT_TRUE(fs::exists(dir / "ok" / "structure.json"));
  EXPECT_EQ(run_cli("heatmap '" + (dir / "ok" / "p.csv").string() + "' --out '" + (dir / "h.csv").string() + "'"), 0);
  EXPECT_EQ(run_cli("baseline --kind bitfit --config '" + smoke + "' --out '" + (dir / "bitfit").string() + "'"), 0);

  EXPECT_EQ(run_cli(""), 1);
  EXPECT_EQ(run_cli("search"), 1);
  EXPECT_EQ(run_cli("search --config '" + smoke + "' --budget 3"), 1);
  EXPECT_EQ(run_cli("search --config '" + smoke + "' --space prefix"), 1);
  {
    nlohmann::json j = nlohmann::json::parse(slurp(smoke));
    j["search"]["extra"] = true;
    std::ofstream(dir / "unknown.json") << j.dump();
    j = nlohmann::json::parse(slurp(smoke));
    j["search"]["inner_lr"] = 1e300;
    j["search"]["alpha_lr"] = 1e300;
    std::ofstream(dir / "diverge.json") << j.dump();
  }
  EXPECT_EQ(run_cli("search --config '" + (dir / "unknown.json").string() + "'"), 1);
  EXPECT_EQ(run_cli("search --config '" + (dir / "diverge.json").string() + "' --out '" + (dir / "nan").string() + "'"), 2);
  EXPECT_EQ(run_cli("search --config '" + (dir / "missing.json").string() + "'"), 3);
  EXPECT_EQ(run_cli("retrain --config '" + smoke + "' --structure '" + (dir / "none.json").string() + "'"), 3);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace s3pet
