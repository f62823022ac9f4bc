#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "helpers.hpp"
#include "s3pet/structure.hpp"

namespace s3pet {
namespace {

struct Best {
  double value = -1.0;
  std::size_t weight = 0;
};

// Exhaustive search over all subsets; highest value, then lowest weight.
Best brute_force(const std::vector<double>& p, const std::vector<std::size_t>& w, double budget) {
  Best best;
  for (std::uint32_t mask = 0; mask < (1u << p.size()); ++mask) {
    double v = 0.0;
    std::size_t used = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (mask & (1u << i)) {
        v += p[i];
        used += w[i];
      }
    }
    if (static_cast<double>(used) > budget) continue;
    if (v > best.value + 1e-12 || (std::abs(v - best.value) <= 1e-12 && used < best.weight)) best = {v, used};
  }
  return best;
}

double value_of(const Selection& s, const std::vector<double>& p) {
  double v = 0.0;
  for (std::size_t i : s.indices) v += p[i];
  return v;
}

std::size_t weight_of(const Selection& s, const std::vector<std::size_t>& w) {
  std::size_t u = 0;
  for (std::size_t i : s.indices) u += w[i];
  return u;
}

TEST(Knapsack, ExactMatchesBruteForce) {
  Rng rng(31, "knapsack");
  const std::size_t sizes[] = {8, 32, 64, 96, 33, 17};
  for (int rep = 0; rep < 40; ++rep) {
    const std::size_t n = 1 + static_cast<std::size_t>(rng.uniform_int(0, 15));
    std::vector<double> p(n);
    std::vector<std::size_t> w(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = rng.uniform_open();
      w[i] = sizes[rng.uniform_int(0, 5)];
    }
    const double budget = 10.0 + rng.uniform_open() * 300.0;
    const Selection s = select_indices(p, w, budget);
    EXPECT_FALSE(s.approximate);
    EXPECT_TRUE(std::is_sorted(s.indices.begin(), s.indices.end()));
    const Best b = brute_force(p, w, budget);
    EXPECT_LE(static_cast<double>(weight_of(s, w)), budget);
    EXPECT_NEAR(value_of(s, p), b.value, 1e-12) << "rep " << rep;
    EXPECT_EQ(weight_of(s, w), b.weight) << "rep " << rep;
  }
}

TEST(Knapsack, PrefersTwoSmallModulesOverOneLarge) {
  const std::vector<double> p = {0.6, 0.5, 0.5};
  const std::vector<std::size_t> w = {60, 50, 50};
  const Selection exact = select_indices(p, w, 100);
  EXPECT_EQ(exact.indices, (std::vector<std::size_t>{1, 2}));
  // Density ties go to the larger p, which blocks the better pair.
  EXPECT_EQ(detail::knapsack_greedy(p, w, 100), (std::vector<std::size_t>{0}));
}

TEST(Knapsack, EqualValueTiesPickTheLighterSubset) {
  const std::vector<double> p = {0.5, 0.5};
  const std::vector<std::size_t> w = {40, 20};
  EXPECT_EQ(select_indices(p, w, 50).indices, (std::vector<std::size_t>{1}));
}

TEST(Knapsack, GreedyFallbackForLargeHeterogeneousSpaces) {
  Rng rng(32);
  const std::size_t n = 80;
  std::vector<double> p(n);
  std::vector<std::size_t> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = rng.uniform_open();
    w[i] = 5 + i % 12;
  }
  const Selection s = select_indices(p, w, 200);
  EXPECT_TRUE(s.approximate);
  EXPECT_LE(weight_of(s, w), 200u);
  // Many items but few distinct sizes stays exact.
  std::vector<std::size_t> few(n, 32);
  EXPECT_FALSE(select_indices(p, few, 200).approximate);
  EXPECT_EQ(weight_of(select_indices(p, few, 200), few), 192u);
}

const BackboneConfig kToy{};

TEST(SelectStructure, EmptyWithWarningBelowSmallestModule) {
  const auto space = enumerate_space(kToy, SearchSpace::kMix);
  const auto counts = candidate_param_counts(space, kToy);
  const std::vector<double> p(space.size(), 0.5);
  const SearchedStructure s = select_structure(p, counts, 5.0, space);
  EXPECT_TRUE(s.sites.empty());
  EXPECT_EQ(s.total_params, 0u);
  EXPECT_FALSE(s.warning.empty());
  EXPECT_THROW(select_structure(std::vector<double>(3, 0.5), counts, 100.0, space), DimensionError);
}

SearchedStructure sample_structure(std::uint64_t seed) {
  Rng rng(seed);
  const auto space = enumerate_space(kToy, SearchSpace::kMix);
  const auto counts = candidate_param_counts(space, kToy);
  std::vector<double> p(space.size());
  for (double& x : p) x = rng.uniform_open();
  SearchedStructure s = select_structure(p, counts, 486.0, space);
  s.backbone = kToy;
  s.backbone_fingerprint = Backbone(kToy).fingerprint();
  s.task = "key-value-recall";
  s.seed = seed;
  return s;
}

TEST(StructureJson, RoundTripsThroughFile) {
  const auto dir = std::filesystem::temp_directory_path() / "s3pet_structure_test";
  std::filesystem::create_directories(dir);
  for (std::uint64_t seed : {1, 2, 3}) {
    const SearchedStructure s = sample_structure(seed);
    ASSERT_FALSE(s.sites.empty());
    const std::string path = (dir / ("s" + std::to_string(seed) + ".json")).string();
    save_structure(s, path);
    EXPECT_EQ(load_structure(path), s);
  }
  std::filesystem::remove_all(dir);
}

TEST(StructureJson, ErrorsNameTheOffendingField) {
  const nlohmann::json good = to_json(sample_structure(4));
  ASSERT_GE(good["sites"].size(), 2u);

  auto expect_field = [](const nlohmann::json& j, const std::string& field) {
    try {
      structure_from_json(j);
      ADD_FAILURE() << "no error for " << field;
    } catch (const ParseError& e) {
      EXPECT_EQ(e.field(), field);
    }
  };
  nlohmann::json j = good;
  j["sites"][1]["layer"] = 99;
  expect_field(j, "sites[1].layer");
  j = good;
  j["sites"][0]["stack"] = "middle";
  expect_field(j, "sites[0].stack");
  j = good;
  j["sites"][1] = j["sites"][0];
  expect_field(j, "sites[1]");
  j = good;
  j["total_params"] = 1;
  expect_field(j, "total_params");
  j = good;
  j["format_version"] = 7;
  expect_field(j, "format_version");
  j = good;
  j.erase("budget");
  expect_field(j, "budget");
  j = good;
  j["sites"][0]["rank"] = "one";
  expect_field(j, "sites[0].rank");
}

TEST(StructureJson, MissingFileAndMalformedJson) {
  EXPECT_THROW(load_structure("/nonexistent/structure.json"), IoError);
  const auto path = std::filesystem::temp_directory_path() / "s3pet_bad_structure.json";
  {
    std::ofstream(path) << "{ not json";
  }
  EXPECT_THROW(load_structure(path.string()), ParseError);
  std::filesystem::remove(path);
}

TEST(StructureJson, FingerprintMismatchWarnsWithoutThrowing) {
  SearchedStructure s = sample_structure(5);
  BackboneConfig other = kToy;
  other.seed = 77;
  std::ostringstream log;
  EXPECT_TRUE(check_fingerprint(s, Backbone(kToy), log));
  EXPECT_TRUE(log.str().empty());
  EXPECT_FALSE(check_fingerprint(s, Backbone(other), log));
  EXPECT_NE(log.str().find("fingerprint"), std::string::npos);
}

BackboneConfig tiny_backbone() {
  BackboneConfig c;
  c.num_encoder_layers = 1;
  c.num_decoder_layers = 1;
  c.hidden_dim = 8;
  c.ffn_dim = 16;
  c.vocab_size = 32;
  c.max_seq_len = 8;
  c.seed = 3;
  return c;
}

DataSplit tiny_split() {
  SyntheticTask t;
  t.vocab_size = 32;
  t.seq_len = 5;
  t.label_space = 4;
  t.train_size = 32;
  t.val_size = 16;
  t.test_size = 16;
  return generate_task(t);
}

SearchedStructure tiny_structure(const Backbone& bb) {
  const auto space = enumerate_space(bb.config(), SearchSpace::kMix);
  const auto counts = candidate_param_counts(space, bb.config());
  std::vector<double> p(space.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = 1.0 / (1.0 + static_cast<double>(i));
  return select_structure(p, counts, 60.0, space);
}

TEST(Retrain, DeterministicForFixedSeed) {
  const Backbone bb(tiny_backbone());
  const DataSplit split = tiny_split();
  const SearchedStructure s = tiny_structure(bb);
  ASSERT_FALSE(s.sites.empty());
  const TrainConfig cfg{.steps = 6, .lr = 1e-2, .batch_size = 4, .eval_interval = 2};
  const RetrainMetrics a = retrain(s, bb, split, cfg);
  const RetrainMetrics b = retrain(s, bb, split, cfg);
  EXPECT_EQ(a.val_metric, b.val_metric);
  EXPECT_EQ(a.test_metric, b.test_metric);
  EXPECT_EQ(a.best_step, b.best_step);
  EXPECT_EQ(a.trainable_params, s.total_params);
}

TEST(Retrain, EmptyStructureReportsFrozenMetrics) {
  const Backbone bb(tiny_backbone());
  const DataSplit split = tiny_split();
  const RetrainMetrics m = retrain(SearchedStructure{}, bb, split, TrainConfig{.steps = 5});
  EXPECT_EQ(m.trainable_params, 0u);
  EXPECT_EQ(m.val_metric, accuracy(bb, nullptr, split.val));
  EXPECT_EQ(m.test_metric, accuracy(bb, nullptr, split.test));
}

TEST(Retrain, RejectsSitesMissingFromTheBackbone) {
  const Backbone bb(tiny_backbone());
  SearchedStructure s;
  StructureEntry e;
  e.site = SiteId{Stack::kEncoder, 3, SublayerKind::kSelfAttn, Projection::kQ};
  e.kind = PetKind::kBitFit;
  s.sites.push_back(e);
  EXPECT_THROW(retrain(s, bb, tiny_split(), TrainConfig{.steps = 1}), MismatchError);
}

}  // namespace
}  // namespace s3pet
