#pragma once

#include <ostream>
#include <string>

#include "s3pet/gradcheck.hpp"
#include "s3pet/search.hpp"

namespace s3pet {

// Quick internal consistency checks, run by `s3pet selftest`. Prints one line
// per check and returns true when all pass.
inline bool run_selftest(std::ostream& os) {
  bool all = true;
  auto report = [&](const std::string& name, bool ok, const std::string& detail) {
    os << (ok ? "ok   " : "FAIL ") << name << "  " << detail << '\n';
    all = all && ok;
  };

  try {
    Rng rng(11);
    auto rand_tensor = [&](Shape s) {
      std::vector<double> v(shape_numel(s));
      for (double& x : v) x = rng.gaussian(0.0, 1.0);
      return Tensor::from(std::move(s), std::move(v));
    };
    Tensor a = rand_tensor({3, 4}), b = rand_tensor({4, 5}), s = rand_tensor({5});
    const GradCheck g = gradcheck(
        [&] {
          const Tensor h = matmul(a, b);
          return sum(mul(softmax_rows(layernorm_scale(h, s, s)), sigmoid(h)));
        },
        {a, b, s});
    report("gradients", g.max_rel_error < 1e-4, "max rel err " + std::to_string(g.max_rel_error));
  } catch (const std::exception& e) {
    report("gradients", false, e.what());
  }

  try {
    Rng rng(12);
    const int n = 20000;
    int above = 0;
    for (int i = 0; i < n; ++i) above += sample_binary_concrete(0.3, 1.0, rng) > 0.5 ? 1 : 0;
    const double freq = static_cast<double>(above) / n;
    report("binary-concrete", std::abs(freq - 0.3) < 0.02, "P(z>0.5) = " + std::to_string(freq) + " for p = 0.3");
  } catch (const std::exception& e) {
    report("binary-concrete", false, e.what());
  }

  try {
    Rng rng(13);
    bool ok = true;
    for (int trial = 0; trial < 20 && ok; ++trial) {
      std::vector<double> p(10);
      std::vector<std::size_t> c(10);
      for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = rng.uniform_open();
        c[i] = static_cast<std::size_t>(rng.uniform_int(1, 20));
      }
      const double budget = rng.uniform_int(1, 100);
      double best = 0.0;
      for (unsigned mask = 0; mask < (1u << p.size()); ++mask) {
        double v = 0.0, w = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
          if (mask >> i & 1u) {
            v += p[i];
            w += static_cast<double>(c[i]);
          }
        }
        if (w <= budget) best = std::max(best, v);
      }
      double got = 0.0;
      for (std::size_t i : select_indices(p, c, budget).indices) got += p[i];
      ok = std::abs(got - best) <= 1e-12;
    }
    report("knapsack", ok, "20 instances against exhaustive enumeration");
  } catch (const std::exception& e) {
    report("knapsack", false, e.what());
  }

  try {
    const Backbone backbone(BackboneConfig{});
    const TokenPair tokens{{3, 4, 5, 6}, {1, 7, 8}};
    const Tensor frozen = backbone.forward(tokens, nullptr);
    const PetSet set = PetSet::build(enumerate_space(backbone.config(), SearchSpace::kMix), backbone.config(), 5);
    const Tensor with = backbone.forward(tokens, &set);
    report("identity-init", frozen.values() == with.values(), "fresh modules leave the backbone output unchanged");
  } catch (const std::exception& e) {
    report("identity-init", false, e.what());
  }

  try {
    const BackboneConfig cfg;
    const auto counts = candidate_param_counts(enumerate_space(cfg, SearchSpace::kMix), cfg);
    Rng rng(14);
    std::vector<double> alpha(counts.size());
    for (double& x : alpha) x = rng.gaussian(0.0, 1.0);
    const double budget = 500.0;
    const double zeta = solve_zeta(alpha, 1.0, counts, budget);
    const double e = expected_count_at(alpha, zeta, 1.0, counts);
    report("budget-shift", e <= budget && e > budget - 1.0, "E[N] = " + std::to_string(e) + " for B = 500");
  } catch (const std::exception& e) {
    report("budget-shift", false, e.what());
  }
  return all;
}

}  // namespace s3pet
