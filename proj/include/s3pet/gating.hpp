#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "s3pet/ops.hpp"
#include "s3pet/rng.hpp"

namespace s3pet {

// Probabilities are kept this far from {0, 1} before taking log-odds.
inline constexpr double kProbClamp = 1e-7;

// Trainable-parameter budget, either an absolute count or a ratio of the
// backbone size in permyriad (‱, hundredths of a percent).
struct Budget {
  enum class Unit { kCount, kPermyriad };
  Unit unit = Unit::kCount;
  double value = 0.0;

  static Budget count(double n) { return {Unit::kCount, n}; }
  static Budget permyriad(double r) { return {Unit::kPermyriad, r}; }

  // Accepts "1200", "104‱" or "104bp".
  static Budget parse(const std::string& text) {
    std::string s = text;
    Unit unit = Unit::kCount;
    for (const std::string suffix : {"‱", "bp"}) {
      if (s.size() > suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0) {
        s.resize(s.size() - suffix.size());
        unit = Unit::kPermyriad;
        break;
      }
    }
    double v = 0.0;
    try {
      std::size_t used = 0;
      v = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw ConfigError("invalid budget '" + text + "' (expected a count or a ratio like 10‱)");
    }
    if (!std::isfinite(v) || v < 0) throw ConfigError("budget must be a non-negative number");
    return {unit, v};
  }

  std::string str() const {
    std::string s = std::to_string(value);
    s.erase(s.find_last_not_of('0') + 1);
    if (!s.empty() && s.back() == '.') s.pop_back();
    return unit == Unit::kPermyriad ? s + "‱" : s;
  }

  // Absolute parameter count for a backbone with `backbone_params` weights.
  double resolve(std::size_t backbone_params) const {
    if (unit == Unit::kCount) return std::floor(value);
    return std::floor(value * 1e-4 * static_cast<double>(backbone_params));
  }
};

// Trainable parameters as a ratio of the backbone, in ‱.
inline double permyriad_ratio(double params, std::size_t backbone_params) {
  return params / static_cast<double>(backbone_params) * 1e4;
}

// Binary Concrete sample sigma(log(u p / ((1-u)(1-p))) / beta).
inline double sample_binary_concrete(double p, double beta, double u) {
  if (!(beta > 0.0)) throw ConfigError("binary concrete temperature must be positive");
  if (!(u > 0.0 && u < 1.0)) throw InputError("uniform draw must lie strictly inside (0, 1)");
  const double pc = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
  const double logit = std::log(u) - std::log1p(-u) + std::log(pc) - std::log1p(-pc);
  return detail::stable_sigmoid(logit / beta);
}

// Draws u on (0, 1) from `rng` (resampling endpoints) and returns the sample.
inline double sample_binary_concrete(double p, double beta, Rng& rng) {
  return sample_binary_concrete(p, beta, rng.uniform_open());
}

// Differentiable w.r.t. p; the uniform draws are fixed constants.
inline Tensor binary_concrete(const Tensor& p, double beta, std::span<const double> u) {
  if (u.size() != p.numel()) throw DimensionError("binary_concrete: one uniform draw per gate");
  if (!(beta > 0.0)) throw ConfigError("binary concrete temperature must be positive");
  std::vector<double> noise(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) noise[i] = std::log(u[i]) - std::log1p(-u[i]);
  const Tensor pc = clamp(p, kProbClamp, 1.0 - kProbClamp);
  const Tensor log_odds = sub(log(pc), log(add_scalar(neg(pc), 1.0)));
  return sigmoid(scale(add(log_odds, Tensor::vector(std::move(noise))), 1.0 / beta));
}

// sigma((alpha - zeta) / tau)
inline Tensor shifted_sigmoid(const Tensor& alpha, double zeta, double tau) {
  if (!(tau > 0.0)) throw ConfigError("sigmoid temperature tau must be positive");
  return sigmoid(scale(add_scalar(alpha, -zeta), 1.0 / tau));
}

inline double shifted_sigmoid(double alpha, double zeta, double tau) {
  return detail::stable_sigmoid((alpha + (-zeta)) * (1.0 / tau));
}

// p_i = p~_i * sum_j detach(p~_j) / sum_j p~_j. Values equal p~ exactly; the
// gradient reaching alpha is centred by the p~-weighted mean of dL/dp.
inline Tensor global_normalize(const Tensor& p_tilde) {
  for (double x : p_tilde.data()) {
    if (!(x > 0.0)) throw InputError("global_normalize needs strictly positive probabilities");
  }
  return mul(p_tilde, div(sum(detach(p_tilde)), sum(p_tilde)));
}

inline double expected_param_count(std::span<const double> p, std::span<const std::size_t> counts) {
  if (p.size() != counts.size()) {
    throw DimensionError("expected_param_count: " + std::to_string(p.size()) + " probabilities vs " +
                         std::to_string(counts.size()) + " counts");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += p[i] * static_cast<double>(counts[i]);
  return total;
}

inline Tensor counts_tensor(std::span<const std::size_t> counts) {
  std::vector<double> c(counts.begin(), counts.end());
  return Tensor::vector(std::move(c));
}

// lambda * sum_i p_i |delta_i|, the L0-style alternative to the budget shift.
inline Tensor l0_penalty(const Tensor& p, std::span<const std::size_t> counts, double lambda) {
  if (lambda < 0.0) throw ConfigError("l0 lambda must be non-negative");
  if (p.numel() != counts.size()) throw DimensionError("l0_penalty: length mismatch");
  return scale(sum(mul(p, counts_tensor(counts))), lambda);
}

// Expected count as a function of the shift.
inline double expected_count_at(std::span<const double> alpha, double zeta, double tau,
                                std::span<const std::size_t> counts) {
  double total = 0.0;
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    total += shifted_sigmoid(alpha[i], zeta, tau) * static_cast<double>(counts[i]);
  }
  return total;
}

// Largest expected count not exceeding the budget: bisection for the smallest
// zeta with E[N](zeta) <= budget over [min alpha - 40 tau, max alpha + 40 tau].
// When even the lower bracket leaves E[N] below the budget the constraint is
// slack and the lower bracket is returned.
inline double solve_zeta(std::span<const double> alpha, double tau,
                         std::span<const std::size_t> counts, double budget) {
  if (alpha.size() != counts.size()) throw DimensionError("solve_zeta: length mismatch");
  if (alpha.empty()) throw ConfigError("solve_zeta: empty search space");
  if (!(tau > 0.0)) throw ConfigError("sigmoid temperature tau must be positive");
  if (!(budget >= 0.0)) throw ConfigError("budget must be non-negative");
  for (double a : alpha) {
    if (!std::isfinite(a)) throw NumericError("non-finite structural parameter");
  }
  const auto [amin, amax] = std::minmax_element(alpha.begin(), alpha.end());
  double lo = *amin - 40.0 * tau;
  double hi = *amax + 40.0 * tau;
  if (expected_count_at(alpha, lo, tau, counts) <= budget) return lo;
  for (int i = 0; i < 64 && expected_count_at(alpha, hi, tau, counts) > budget; ++i) {
    hi += (hi - lo);
  }
  if (expected_count_at(alpha, hi, tau, counts) > budget) {
    throw ConfigError("budget " + std::to_string(budget) + " cannot be met by any shift");
  }
  for (int iter = 0; iter < 400; ++iter) {
    const double mid = lo + 0.5 * (hi - lo);
    if (mid <= lo || mid >= hi) break;
    if (expected_count_at(alpha, mid, tau, counts) <= budget) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  return hi;
}

enum class Parameterization { kGlobal, kLocal };

struct GateGraph {
  Tensor p_tilde;
  Tensor p;
  Tensor z_hat;
};

// p~, p and the soft samples for fixed (zeta, u), differentiable w.r.t. alpha
// when recorded on a tape.
inline GateGraph gate_forward(const Tensor& alpha, double zeta, double tau, double beta,
                              std::span<const double> u,
                              Parameterization param = Parameterization::kGlobal) {
  GateGraph g;
  g.p_tilde = shifted_sigmoid(alpha, zeta, tau);
  g.p = param == Parameterization::kGlobal ? global_normalize(g.p_tilde) : g.p_tilde;
  g.z_hat = binary_concrete(g.p, beta, u);
  return g;
}

// Structural parameters and the values derived from them in one search step.
struct GateState {
  Tensor alpha;  // leaf, requires grad
  double zeta = 0.0;
  double tau = 1.0;
  double beta = 1.0;
  std::vector<double> p_tilde;
  std::vector<double> p;
  std::vector<double> z_hat;
  std::vector<double> u;

  static GateState init(std::size_t n, std::uint64_t seed, double init_std = 0.01, double tau = 1.0,
                        double beta = 1.0) {
    Rng rng(seed, "alpha-init");
    std::vector<double> a(n);
    for (double& x : a) x = rng.gaussian(0.0, init_std);
    GateState s;
    s.alpha = Tensor::vector(std::move(a), true);
    s.tau = tau;
    s.beta = beta;
    return s;
  }

  // Recomputes p~, p and z_hat for the current alpha, zeta and u.
  void refresh(Parameterization param = Parameterization::kGlobal) {
    GateGraph g = gate_forward(alpha, zeta, tau, beta, u, param);
    p_tilde = g.p_tilde.values();
    p = g.p.values();
    z_hat = g.z_hat.values();
  }
};

}  // namespace s3pet
