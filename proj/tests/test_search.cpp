#include <gtest/gtest.h>

#include "bilevel_toy.hpp"

namespace s3pet {
namespace {

using namespace testing;

TEST(AdamW, MatchesHandComputedSteps) {
  Tensor x = Tensor::vector({1.0, -2.0}, true);
  AdamW opt({x}, {.lr = 0.1, .weight_decay = 0.01, .total_steps = 4});
  EXPECT_DOUBLE_EQ(opt.current_lr(), 0.1);
  opt.step({{0.5, -1.0}});
  EXPECT_NEAR(x[0], 0.89900000199999996, 1e-14);
  EXPECT_NEAR(x[1], -1.89800000099999999, 1e-14);
  EXPECT_DOUBLE_EQ(opt.current_lr(), 0.075);
  opt.step({{0.2, 0.3}});
  EXPECT_NEAR(x[0], 0.83093261342569567949, 1e-14);
  EXPECT_NEAR(x[1], -1.8644878570711695498, 1e-14);
  EXPECT_EQ(opt.steps_taken(), 2u);
}

TEST(AdamW, LearningRateDecaysToZero) {
  Tensor x = Tensor::vector({3.0}, true);
  AdamW opt({x}, {.lr = 1.0, .total_steps = 2});
  opt.step({{1.0}});
  opt.step({{1.0}});
  const double after = x[0];
  EXPECT_EQ(opt.current_lr(), 0.0);
  opt.step({{1.0}});
  EXPECT_EQ(x[0], after);
}

TEST(StructuralGradient, MatchesNestedFiniteDifferences) {
  for (std::uint64_t seed : {1, 2, 3}) {
    ToyProblem toy(seed);
    GateState gate = toy_gate_state(seed);
    const double xi = 0.5;
    const StructuralGradient sg =
        structural_gradient(toy.problem, gate, toy.batch_delta(), toy.batch_alpha(), xi, 0.01);
    const auto oracle = nested_fd_hypergradient(toy, gate, xi);
    EXPECT_LE(max_rel(sg.alpha, oracle, 1e-6), 5e-2) << "seed " << seed;
    // The second-order term matters here, so a first-order answer would fail.
    const StructuralGradient fo =
        structural_gradient(toy.problem, gate, toy.batch_delta(), toy.batch_alpha(), xi, 0.01, true);
    EXPECT_GT(max_rel(fo.alpha, oracle, 1e-6), 5e-2) << "seed " << seed;
  }
}

TEST(StructuralGradient, FirstOrderEqualsZeroVirtualStep) {
  for (std::uint64_t seed : {4, 5, 6}) {
    ToyProblem toy(seed, Parameterization::kGlobal);
    GateState gate = toy_gate_state(seed);
    const auto a = structural_gradient(toy.problem, gate, toy.batch_delta(), toy.batch_alpha(), 0.0, 0.01);
    const auto b = structural_gradient(toy.problem, gate, toy.batch_delta(), toy.batch_alpha(), 0.3, 0.01, true);
    EXPECT_EQ(a.alpha, b.alpha);
    EXPECT_EQ(a.loss_delta, b.loss_delta);
    for (double s : b.second_order) EXPECT_EQ(s, 0.0);
  }
}

TEST(StructuralGradient, RestoresDeltaBitwise) {
  for (std::uint64_t seed : {7, 8, 9}) {
    ToyProblem toy(seed);
    GateState gate = toy_gate_state(seed);
    std::vector<std::vector<double>> before;
    for (const Tensor& t : toy.problem.delta) before.push_back(t.values());
    const auto alpha_before = gate.alpha.values();
    structural_gradient(toy.problem, gate, toy.batch_delta(), toy.batch_alpha(), 0.7, 0.01);
    for (std::size_t k = 0; k < before.size(); ++k) EXPECT_EQ(toy.problem.delta[k].values(), before[k]);
    EXPECT_EQ(gate.alpha.values(), alpha_before);
  }
}

TEST(StructuralGradient, RestoresDeltaWhenAPassThrows) {
  ToyProblem toy(10);
  GateState gate = toy_gate_state(10);
  std::vector<std::vector<double>> before;
  for (const Tensor& t : toy.problem.delta) before.push_back(t.values());
  int calls = 0;
  auto inner = toy.problem.loss;
  toy.problem.loss = [&](const Tensor& z, const Batch& b) {
    if (++calls == 3) throw NumericError("injected");
    return inner(z, b);
  };
  EXPECT_THROW(structural_gradient(toy.problem, gate, toy.batch_delta(), toy.batch_alpha(), 0.7, 0.01), NumericError);
  for (std::size_t k = 0; k < before.size(); ++k) EXPECT_EQ(toy.problem.delta[k].values(), before[k]);
}

TEST(StructuralGradient, AllPassesShareOneGateSample) {
  ToyProblem toy(11, Parameterization::kGlobal);
  GateState gate = toy_gate_state(11);
  std::vector<std::vector<double>> seen;
  auto inner = toy.problem.loss;
  toy.problem.loss = [&](const Tensor& z, const Batch& b) {
    seen.push_back(z.values());
    return inner(z, b);
  };
  structural_gradient(toy.problem, gate, toy.batch_delta(), toy.batch_alpha(), 0.7, 0.01);
  ASSERT_EQ(seen.size(), 4u);
  for (const auto& z : seen) EXPECT_EQ(z, seen.front());
}

TEST(StructuralGradient, ZeroWhenLossIgnoresGates) {
  ToyProblem toy(12);
  GateState gate = toy_gate_state(12);
  toy.problem.loss = [delta = toy.problem.delta](const Tensor&, const Batch&) {
    return sum(mul(delta[0], delta[1]));
  };
  const auto sg = structural_gradient(toy.problem, gate, toy.batch_delta(), toy.batch_alpha(), 0.7, 0.01);
  for (double g : sg.alpha) EXPECT_EQ(g, 0.0);
}

TEST(StructuralGradient, L0PenaltyOnlyInOuterLoss) {
  ToyProblem toy(13);
  GateState gate = toy_gate_state(13);
  const auto plain = structural_gradient(toy.problem, gate, toy.batch_delta(), toy.batch_alpha(), 0.0, 0.01);
  toy.problem.l0_lambda = 0.1;
  const auto pen = structural_gradient(toy.problem, gate, toy.batch_delta(), toy.batch_alpha(), 0.0, 0.01);
  EXPECT_EQ(plain.loss_delta, pen.loss_delta);
  double expected = 0.0;
  for (std::size_t i = 0; i < kGates; ++i) expected += 0.1 * 3 * gate.p[i];
  EXPECT_NEAR(pen.loss_alpha - plain.loss_alpha, expected, 1e-12);
}

// A backbone and task small enough to run many searches in a unit test.
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

SearchConfig tiny_search(int steps) {
  SearchConfig c;
  c.budget = Budget::count(120);
  c.steps = steps;
  c.eval_interval = 2;
  c.batch_size = 4;
  c.inner_lr = 1e-2;
  return c;
}

TEST(Search, ZeroStepsEvaluatesInitialStructure) {
  const Backbone bb(tiny_backbone());
  const auto r = search(tiny_search(0), tiny_split(), bb);
  ASSERT_EQ(r.history.size(), 1u);
  EXPECT_EQ(r.best_step, 0);
  EXPECT_TRUE(std::isnan(r.history[0].loss_delta));
  EXPECT_GE(r.best_val_metric, 0.0);
  EXPECT_LE(static_cast<double>(r.structure.total_params), r.budget);
  ASSERT_EQ(r.snapshots.size(), 1u);
}

TEST(Search, RespectsBudgetThroughout) {
  const Backbone bb(tiny_backbone());
  for (std::uint64_t seed : {0, 1}) {
    SearchConfig c = tiny_search(5);
    c.seed = seed;
    const auto r = search(c, tiny_split(), bb);
    ASSERT_EQ(r.history.size(), 5u);
    for (const auto& row : r.history) {
      EXPECT_LE(row.expected_params, r.budget + 1e-6);
      EXPECT_GT(row.expected_params, r.budget - std::max(1.0, 1e-6 * r.budget));
    }
    EXPECT_LE(static_cast<double>(r.structure.total_params), r.budget);
    EXPECT_GT(r.structure.total_params, 0u);
    // Evaluations at steps 2, 4 and the last step.
    ASSERT_EQ(r.snapshots.size(), 3u);
    EXPECT_EQ(r.snapshots.back().step, 5);
  }
}

TEST(Search, DeterministicForFixedSeed) {
  const Backbone bb(tiny_backbone());
  const auto a = search(tiny_search(3), tiny_split(), bb);
  const auto b = search(tiny_search(3), tiny_split(), bb);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].loss_delta, b.history[i].loss_delta);
    EXPECT_EQ(a.history[i].loss_alpha, b.history[i].loss_alpha);
    EXPECT_EQ(a.history[i].zeta, b.history[i].zeta);
  }
  EXPECT_EQ(a.structure, b.structure);
  EXPECT_EQ(a.snapshots.back().p, b.snapshots.back().p);
}

TEST(Search, L0ModeKeepsZetaAtZero) {
  const Backbone bb(tiny_backbone());
  SearchConfig c = tiny_search(2);
  c.sparsity_mode = SparsityMode::kL0;
  const auto r = search(c, tiny_split(), bb);
  for (const auto& row : r.history) EXPECT_EQ(row.zeta, 0.0);
  EXPECT_LE(static_cast<double>(r.structure.total_params), r.budget);
}

TEST(Search, RejectsInfeasibleBudgetAndBadConfig) {
  const Backbone bb(tiny_backbone());
  SearchConfig c = tiny_search(1);
  c.budget = Budget::count(2);
  EXPECT_THROW(search(c, tiny_split(), bb), ConfigError);
  c = tiny_search(1);
  c.eval_interval = 0;
  EXPECT_THROW(search(c, tiny_split(), bb), ConfigError);
  EXPECT_EQ(parse_sparsity_mode("l0"), SparsityMode::kL0);
  EXPECT_THROW(parse_sparsity_mode("l1"), ConfigError);
}

}  // namespace
}  // namespace s3pet
