#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "s3pet/structure.hpp"

namespace s3pet {

enum class SparsityMode { kGlobalSigmoid, kL0 };

inline std::string_view to_string(SparsityMode m) {
  return m == SparsityMode::kGlobalSigmoid ? "global-sigmoid" : "l0";
}

inline SparsityMode parse_sparsity_mode(std::string_view s) {
  if (s == "global-sigmoid") return SparsityMode::kGlobalSigmoid;
  if (s == "l0") return SparsityMode::kL0;
  throw ConfigError("unknown sparsity mode '" + std::string(s) + "' (valid: global-sigmoid, l0)");
}

struct SearchConfig {
  Budget budget = Budget::permyriad(1.39);
  // Learning rate of the PET parameters; also the virtual-step size xi.
  double inner_lr = 3e-4;
  double alpha_lr = 0.1;
  // Finite-difference step numerator: eps = epsilon / ||grad_delta' L_alpha||.
  double epsilon = 0.01;
  int steps = 200;
  int eval_interval = 50;
  std::uint64_t seed = 0;
  SearchSpace search_space = SearchSpace::kMix;
  SparsityMode sparsity_mode = SparsityMode::kGlobalSigmoid;
  bool first_order_only = false;
  double tau = 1.0;
  double beta = 1.0;
  int batch_size = 16;
  double l0_lambda = 1e-3;
  double alpha_init_std = 0.01;
  double weight_decay = 0.0;
  Parameterization parameterization = Parameterization::kGlobal;
  int rank = 1;

  void validate() const {
    if (!(inner_lr > 0.0) && !first_order_only) throw ConfigError("inner_lr (xi) must be positive");
    if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
    if (!(alpha_lr > 0.0)) throw ConfigError("alpha_lr must be positive");
    if (steps < 0) throw ConfigError("steps must be non-negative");
    if (eval_interval < 1) throw ConfigError("eval_interval must be >= 1");
    if (!(tau > 0.0) || !(beta > 0.0)) throw ConfigError("tau and beta must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (l0_lambda < 0.0) throw ConfigError("l0_lambda must be non-negative");
    if (rank < 1) throw ConfigError("rank must be >= 1");
  }
};

// Everything the structural gradient needs to know about a model: the PET
// parameters, a loss for a given gate vector, and the module sizes.
struct BilevelProblem {
  std::vector<Tensor> delta;
  std::function<Tensor(const Tensor& z_hat, const Batch& batch)> loss;
  std::vector<std::size_t> counts;
  // When positive, the outer loss gains l0_lambda * sum_i p_i |delta_i|.
  double l0_lambda = 0.0;
  Parameterization parameterization = Parameterization::kGlobal;
};

struct LossGrad {
  double loss = 0.0;
  std::vector<std::vector<double>> d_delta;
  std::vector<double> d_alpha;
};

// One forward/backward pass with the gate's fixed (zeta, u).
inline LossGrad loss_and_grads(const BilevelProblem& problem, GateState& gate, const Batch& batch, bool outer) {
  std::vector<Tensor> delta = problem.delta;
  for (Tensor& t : delta) t.zero_grad();
  gate.alpha.zero_grad();
  Tape tape;
  Tensor loss;
  {
    auto rec = tape.record();
    const GateGraph g = gate_forward(gate.alpha, gate.zeta, gate.tau, gate.beta, gate.u, problem.parameterization);
    loss = problem.loss(g.z_hat, batch);
    if (outer && problem.l0_lambda > 0.0) loss = add(loss, l0_penalty(g.p, problem.counts, problem.l0_lambda));
  }
  if (!std::isfinite(loss.item())) throw NumericError("non-finite loss during search");
  tape.backward(loss);
  LossGrad out;
  out.loss = loss.item();
  for (Tensor& t : delta) {
    out.d_delta.emplace_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                          : std::vector<double>(t.numel(), 0.0));
    t.zero_grad();
  }
  out.d_alpha = gate.alpha.has_grad() ? std::vector<double>(gate.alpha.grad().begin(), gate.alpha.grad().end())
                                      : std::vector<double>(gate.alpha.numel(), 0.0);
  gate.alpha.zero_grad();
  return out;
}

struct StructuralGradient {
  std::vector<double> alpha;                   // approximate d L_alpha(delta*) / d alpha
  std::vector<std::vector<double>> delta;      // d L_delta(delta, alpha) / d delta, for the inner step
  std::vector<double> second_order;            // (g+ - g-) / (2 eps), zero in first-order mode
  double loss_delta = 0.0;
  double loss_alpha = 0.0;
  double epsilon = 0.0;
};

namespace detail {

inline std::vector<std::vector<double>> snapshot(const std::vector<Tensor>& params) {
  std::vector<std::vector<double>> s;
  s.reserve(params.size());
  for (const Tensor& p : params) s.push_back(p.values());
  return s;
}

inline void restore(std::vector<Tensor>& params, const std::vector<std::vector<double>>& s) {
  for (std::size_t k = 0; k < params.size(); ++k) std::copy(s[k].begin(), s[k].end(), params[k].mutable_data().begin());
}

// params = base + step * dir
inline void set_shifted(std::vector<Tensor>& params, const std::vector<std::vector<double>>& base,
                        const std::vector<std::vector<double>>& dir, double step) {
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto data = params[k].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = base[k][i] + step * dir[k][i];
  }
}

}  // namespace detail

// grad_alpha L_alpha(delta', alpha) - xi (grad_alpha L_delta(delta+, alpha) - grad_alpha L_delta(delta-, alpha)) / (2 eps)
// with delta' = delta - xi grad_delta L_delta(delta, alpha) and
// delta+- = delta +- eps grad_delta' L_alpha(delta', alpha). All four passes share
// the gate's uniform draws. The PET parameters are restored bitwise on exit.
inline StructuralGradient structural_gradient(BilevelProblem& problem, GateState& gate, const Batch& batch_delta,
                                              const Batch& batch_alpha, double xi, double eps_scale,
                                              bool first_order_only = false) {
  const auto saved = detail::snapshot(problem.delta);
  StructuralGradient out;
  try {
    LossGrad inner = loss_and_grads(problem, gate, batch_delta, /*outer=*/false);
    out.loss_delta = inner.loss;
    out.delta = std::move(inner.d_delta);
    if (first_order_only) {
      LossGrad outer = loss_and_grads(problem, gate, batch_alpha, /*outer=*/true);
      out.loss_alpha = outer.loss;
      out.alpha = std::move(outer.d_alpha);
      out.second_order.assign(out.alpha.size(), 0.0);
      return out;
    }
    detail::set_shifted(problem.delta, saved, out.delta, -xi);
    LossGrad outer = loss_and_grads(problem, gate, batch_alpha, /*outer=*/true);
    out.loss_alpha = outer.loss;
    double norm2 = 0.0;
    for (const auto& v : outer.d_delta)
      for (double x : v) norm2 += x * x;
    const double norm = std::sqrt(norm2);
    out.epsilon = norm > 0.0 ? eps_scale / norm : 1e-3;

    detail::set_shifted(problem.delta, saved, outer.d_delta, out.epsilon);
    const LossGrad plus = loss_and_grads(problem, gate, batch_delta, /*outer=*/false);
    detail::set_shifted(problem.delta, saved, outer.d_delta, -out.epsilon);
    const LossGrad minus = loss_and_grads(problem, gate, batch_delta, /*outer=*/false);
    detail::restore(problem.delta, saved);

    out.alpha.resize(outer.d_alpha.size());
    out.second_order.resize(outer.d_alpha.size());
    for (std::size_t i = 0; i < out.alpha.size(); ++i) {
      out.second_order[i] = (plus.d_alpha[i] - minus.d_alpha[i]) / (2.0 * out.epsilon);
      out.alpha[i] = outer.d_alpha[i] - xi * out.second_order[i];
    }
  } catch (...) {
    detail::restore(problem.delta, saved);
    throw;
  }
  if (!all_finite(out.alpha)) throw NumericError("non-finite structural gradient");
  return out;
}

// One optimizer step on the PET parameters from a precomputed gradient.
inline void inner_step(AdamW& optimizer, const std::vector<std::vector<double>>& grad_delta) {
  for (const auto& g : grad_delta) {
    if (!all_finite(g)) throw NumericError("non-finite PET gradient in inner step");
  }
  optimizer.step(grad_delta);
}

// Computes grad_delta L_delta(delta, alpha) for the current gate sample and steps.
inline double inner_step(BilevelProblem& problem, GateState& gate, const Batch& batch, AdamW& optimizer) {
  LossGrad g = loss_and_grads(problem, gate, batch, /*outer=*/false);
  inner_step(optimizer, g.d_delta);
  return g.loss;
}

struct HistoryRow {
  int step = 0;
  double loss_delta = 0.0;
  double loss_alpha = 0.0;
  double expected_params = 0.0;
  double zeta = 0.0;
  double val_metric = std::numeric_limits<double>::quiet_NaN();
};

struct ProbabilitySnapshot {
  int step = 0;
  std::vector<double> p;
};

struct SearchResult {
  SearchedStructure structure;
  std::vector<HistoryRow> history;
  std::vector<ProbabilitySnapshot> snapshots;
  std::vector<Candidate> candidates;
  std::vector<std::size_t> counts;
  double budget = 0.0;
  double best_val_metric = -1.0;
  int best_step = -1;
};

// The bi-level structure search. Each step: solve zeta, compute p and draw
// z_hat; compute the structural gradient and update alpha; update delta with
// grad_delta L_delta from the same sample. Every eval_interval steps the
// structure implied by the latest p is extracted and scored on D_val with hard
// gates; the best-scoring snapshot (earliest on ties) is returned.
inline SearchResult search(const SearchConfig& config, const DataSplit& split, const Backbone& backbone,
                           const std::vector<Candidate>* custom_space = nullptr) {
  config.validate();
  SearchResult result;
  result.candidates = custom_space ? *custom_space : enumerate_space(backbone.config(), config.search_space, config.rank);
  result.counts = candidate_param_counts(result.candidates, backbone.config());
  if (result.candidates.empty()) throw ConfigError("empty search space");
  result.budget = config.budget.resolve(backbone.parameter_count());
  const std::size_t min_count = *std::min_element(result.counts.begin(), result.counts.end());
  if (result.budget < static_cast<double>(min_count)) {
    throw ConfigError("budget of " + std::to_string(static_cast<long long>(result.budget)) +
                      " parameters is below the smallest module (" + std::to_string(min_count) + ")");
  }
  const std::size_t n = result.candidates.size();
  PetSet supernet = PetSet::build(result.candidates, backbone.config(), config.seed);
  GateState gate = GateState::init(n, config.seed, config.alpha_init_std, config.tau, config.beta);

  BilevelProblem problem;
  problem.delta = supernet.parameters();
  problem.counts = result.counts;
  problem.parameterization = config.parameterization;
  problem.l0_lambda = config.sparsity_mode == SparsityMode::kL0 ? config.l0_lambda : 0.0;
  problem.loss = [&](const Tensor& z_hat, const Batch& batch) {
    supernet.set_gates(z_hat);
    return batch_loss(backbone, &supernet, batch);
  };

  BatchStream delta_stream(split.delta, static_cast<std::size_t>(config.batch_size), config.seed, "d_delta");
  BatchStream alpha_stream(split.alpha, static_cast<std::size_t>(config.batch_size), config.seed, "d_alpha");
  Rng noise(config.seed, "gate-noise");
  AdamW alpha_opt({gate.alpha}, {.lr = config.alpha_lr});
  AdamW delta_opt(problem.delta, {.lr = config.inner_lr,
                                  .weight_decay = config.weight_decay,
                                  .total_steps = static_cast<std::size_t>(config.steps)});

  auto prepare_gate = [&] {
    gate.zeta = config.sparsity_mode == SparsityMode::kGlobalSigmoid
                    ? solve_zeta(gate.alpha.values(), gate.tau, result.counts, result.budget)
                    : 0.0;
    gate.u.resize(n);
    for (double& x : gate.u) x = noise.uniform_open();
    gate.refresh(config.parameterization);
  };

  auto evaluate = [&](int step) {
    SearchedStructure s = select_structure(gate.p, result.counts, result.budget, result.candidates);
    std::vector<double> hard(n, 0.0);
    std::size_t k = 0;
    for (std::size_t i = 0; i < n && k < s.sites.size(); ++i) {
      if (s.sites[k].site == result.candidates[i].site && s.sites[k].kind == result.candidates[i].kind) {
        hard[i] = 1.0;
        ++k;
      }
    }
    supernet.set_gates(Tensor::vector(hard));
    const double metric = accuracy(backbone, &supernet, split.val);
    result.snapshots.push_back({step, gate.p});
    if (metric > result.best_val_metric) {
      result.best_val_metric = metric;
      result.best_step = step;
      result.structure = std::move(s);
    }
    return metric;
  };

  if (config.steps == 0) {
    prepare_gate();
    result.history.push_back({0, std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN(),
                              expected_param_count(gate.p, result.counts), gate.zeta, evaluate(0)});
  }
  for (int step = 0; step < config.steps; ++step) {
    prepare_gate();
    HistoryRow row;
    row.step = step;
    row.zeta = gate.zeta;
    row.expected_params = expected_param_count(gate.p, result.counts);
    const Batch bd = delta_stream.next();
    const Batch ba = alpha_stream.next();
    StructuralGradient sg =
        structural_gradient(problem, gate, bd, ba, config.inner_lr, config.epsilon, config.first_order_only);
    row.loss_delta = sg.loss_delta;
    row.loss_alpha = sg.loss_alpha;
    alpha_opt.step({sg.alpha});
    inner_step(delta_opt, sg.delta);
    if ((step + 1) % config.eval_interval == 0 || step + 1 == config.steps) row.val_metric = evaluate(step + 1);
    result.history.push_back(row);
  }
  supernet.clear_gates();
  result.structure.search_space = custom_space ? "manual" : std::string(to_string(config.search_space));
  result.structure.backbone = backbone.config();
  result.structure.backbone_fingerprint = backbone.fingerprint();
  result.structure.seed = config.seed;
  return result;
}

}  // namespace s3pet
