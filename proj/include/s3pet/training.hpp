#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "s3pet/optim.hpp"
#include "s3pet/pet.hpp"
#include "s3pet/tasks.hpp"

namespace s3pet {

using Batch = std::vector<const Example*>;

inline Batch as_batch(const std::vector<Example>& data) {
  Batch b;
  b.reserve(data.size());
  for (const Example& ex : data) b.push_back(&ex);
  return b;
}

// Mean over examples of the per-example token cross-entropy.
inline Tensor batch_loss(const Backbone& backbone, const SiteHooks* hooks, const Batch& batch) {
  if (batch.empty()) throw InputError("empty batch");
  Tensor total;
  for (const Example* ex : batch) {
    Tensor l = cross_entropy(backbone.forward(ex->tokens, hooks), ex->targets);
    total = total.defined() ? add(total, l) : l;
  }
  return scale(total, 1.0 / static_cast<double>(batch.size()));
}

// Fraction of scored decoder positions whose argmax equals the target.
inline double accuracy(const Backbone& backbone, const SiteHooks* hooks, const std::vector<Example>& data) {
  std::size_t correct = 0, scored = 0;
  for (const Example& ex : data) {
    const Tensor logits = backbone.forward(ex.tokens, hooks);
    const std::size_t vocab = logits.cols();
    for (std::size_t r = 0; r < ex.targets.size(); ++r) {
      if (ex.targets[r] < 0) continue;
      std::size_t best = 0;
      for (std::size_t j = 1; j < vocab; ++j) {
        if (logits.at(r, j) > logits.at(r, best)) best = j;
      }
      correct += static_cast<int>(best) == ex.targets[r] ? 1 : 0;
      ++scored;
    }
  }
  return scored ? static_cast<double>(correct) / static_cast<double>(scored) : 0.0;
}

inline bool all_finite(std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

struct TrainConfig {
  int steps = 300;
  double lr = 3e-4;
  int batch_size = 16;
  int eval_interval = 50;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
};

struct TrainResult {
  double val_metric = 0.0;
  double test_metric = 0.0;
  int best_step = 0;
};

// Trains every parameter of `set` with gates fixed at 1 on `train`, tracks the
// best validation snapshot (step 0 included) and reports test at that snapshot.
inline TrainResult train_and_evaluate(const Backbone& backbone, PetSet& set, const std::vector<Example>& train,
                                      const std::vector<Example>& val, const std::vector<Example>& test,
                                      const TrainConfig& config) {
  set.clear_gates();
  TrainResult result;
  result.val_metric = accuracy(backbone, &set, val);
  std::vector<Tensor> params = set.parameters();
  if (params.empty() || config.steps <= 0) {
    result.test_metric = accuracy(backbone, &set, test);
    return result;
  }
  auto snapshot = [&] {
    std::vector<std::vector<double>> s;
    for (const Tensor& p : params) s.push_back(p.values());
    return s;
  };
  std::vector<std::vector<double>> best = snapshot();
  AdamW opt(params, {.lr = config.lr,
                     .weight_decay = config.weight_decay,
                     .total_steps = static_cast<std::size_t>(config.steps)});
  BatchStream stream(train, static_cast<std::size_t>(config.batch_size), config.seed, "retrain-batches");
  const int interval = std::max(1, config.eval_interval);
  for (int step = 1; step <= config.steps; ++step) {
    for (Tensor& p : params) p.zero_grad();
    Tape tape;
    Tensor loss;
    {
      auto rec = tape.record();
      loss = batch_loss(backbone, &set, stream.next());
    }
    if (!std::isfinite(loss.item())) throw NumericError("non-finite training loss at step " + std::to_string(step));
    tape.backward(loss);
    opt.step();
    if (step % interval == 0 || step == config.steps) {
      const double v = accuracy(backbone, &set, val);
      if (v > result.val_metric) {
        result.val_metric = v;
        result.best_step = step;
        best = snapshot();
      }
    }
  }
  for (Tensor& p : params) p.zero_grad();
  for (std::size_t k = 0; k < params.size(); ++k) {
    std::copy(best[k].begin(), best[k].end(), params[k].mutable_data().begin());
  }
  result.test_metric = accuracy(backbone, &set, test);
  return result;
}

}  // namespace s3pet
