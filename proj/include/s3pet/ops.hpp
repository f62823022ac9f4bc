#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "s3pet/tensor.hpp"

// Differentiable operations. Every op computes its forward value eagerly and,
// when a tape is recording and some input requires grad, appends a node whose
// closure accumulates the input gradients.
//
// Broadcasting is limited to two cases for the right-hand operand of binary
// ops: a single-element tensor, or a vector matching the trailing dimension.

namespace s3pet {

// Floor applied to the row variance in layernorm_scale.
inline constexpr double kVarianceFloor = 1e-9;

namespace detail {

inline Tensor make_output(Shape shape, std::vector<double> data,
                          std::initializer_list<Tensor> inputs) {
  bool track = false;
  if (Tape::current() != nullptr) {
    for (const Tensor& t : inputs) track = track || t.requires_grad();
  }
  return Tensor::from(std::move(shape), std::move(data), track);
}

inline void record(std::vector<Tensor> inputs, const Tensor& out, Tape::Backward backward) {
  Tape::current()->push(Tape::Node{std::move(inputs), out, std::move(backward), false});
}

enum class Broadcast { kSame, kScalar, kRow };

inline Broadcast broadcast_mode(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (b.numel() == 1) return Broadcast::kScalar;
  if (b.dim() == 1 && a.dim() >= 1 && b.numel() == a.cols()) return Broadcast::kRow;
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) +
                       " onto " + shape_str(a.shape()));
}

inline std::size_t b_index(Broadcast mode, std::size_t i, std::size_t cols) {
  switch (mode) {
    case Broadcast::kSame: return i;
    case Broadcast::kScalar: return 0;
    case Broadcast::kRow: return i % cols;
  }
  return 0;
}

template <class Forward, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, Forward f, DA da, DB db) {
  const Broadcast mode = broadcast_mode(a, b, name);
  const std::size_t n = a.numel();
  const std::size_t cols = a.cols();
  std::vector<double> out(n);
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i], bv[b_index(mode, i, cols)]);
  Tensor result = make_output(a.shape(), std::move(out), {a, b});
  if (result.requires_grad()) {
    record({a, b}, result, [a, b, mode, cols, da, db](std::span<const double> g) mutable {
      auto av = a.data();
      auto bv = b.data();
      if (a.requires_grad()) {
        auto& ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] += g[i] * da(av[i], bv[b_index(mode, i, cols)]);
        }
      }
      if (b.requires_grad()) {
        auto& gb = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const std::size_t j = b_index(mode, i, cols);
          gb[j] += g[i] * db(av[i], bv[j]);
        }
      }
    });
  }
  return result;
}

// Unary op whose derivative is expressed through input x and output y.
template <class Forward, class Deriv>
Tensor unary(const Tensor& a, Forward f, Deriv d) {
  std::vector<double> out(a.numel());
  auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  Tensor result = make_output(a.shape(), std::move(out), {a});
  if (result.requires_grad()) {
    record({a}, result, [a, result, d](std::span<const double> g) mutable {
      auto av = a.data();
      auto yv = result.data();
      auto& ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * d(av[i], yv[i]);
    });
  }
  return result;
}

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary(
      a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary(
      a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor exp(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return detail::stable_sigmoid(x); },
      [](double, double y) { return y * (1.0 - y); });
}

// Gradient passes only where lo < x < hi.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  return detail::unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// Same value, no gradient. Recorded as a detached node so the cut is visible
// on the tape.
inline Tensor detach(const Tensor& a) {
  Tensor result = Tensor::from(a.shape(), a.values(), false);
  if (Tape::current() != nullptr && a.requires_grad()) {
    Tape::current()->push(Tape::Node{{a}, result, [](std::span<const double>) {}, true});
  }
  return result;
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  Tensor result = detail::make_output({1}, {s}, {a});
  if (result.requires_grad()) {
    detail::record({a}, result, [a](std::span<const double> g) mutable {
      auto& ga = a.grad_buffer();
      for (double& x : ga) x += g[0];
    });
  }
  return result;
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

// Population variance over all elements.
inline Tensor variance(const Tensor& a) {
  const double n = static_cast<double>(a.numel());
  double mu = 0.0;
  for (double x : a.data()) mu += x;
  mu /= n;
  double v = 0.0;
  for (double x : a.data()) v += (x - mu) * (x - mu);
  v /= n;
  Tensor result = detail::make_output({1}, {v}, {a});
  if (result.requires_grad()) {
    detail::record({a}, result, [a, mu, n](std::span<const double> g) mutable {
      auto av = a.data();
      auto& ga = a.grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * 2.0 * (av[i] - mu) / n;
    });
  }
  return result;
}

inline Tensor element(const Tensor& a, std::size_t index) {
  if (index >= a.numel()) throw DimensionError("element index out of range");
  Tensor result = detail::make_output({1}, {a[index]}, {a});
  if (result.requires_grad()) {
    detail::record({a}, result, [a, index](std::span<const double> g) mutable {
      a.grad_buffer()[index] += g[0];
    });
  }
  return result;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2) {
    throw DimensionError("matmul expects matrices, got " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double x = av[i * k + p];
      if (x == 0.0) continue;
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += x * brow[j];
    }
  }
  Tensor result = detail::make_output({m, n}, std::move(out), {a, b});
  if (result.requires_grad()) {
    detail::record({a, b}, result, [a, b, m, k, n](std::span<const double> g) mutable {
      auto av = a.data();
      auto bv = b.data();
      if (a.requires_grad()) {
        auto& ga = a.grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            const double* grow = g.data() + i * n;
            const double* brow = bv.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ga[i * k + p] += acc;
          }
        }
      }
      if (b.requires_grad()) {
        auto& gb = b.grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = g.data() + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double x = av[i * k + p];
            if (x == 0.0) continue;
            double* gbrow = gb.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += x * grow[j];
          }
        }
      }
    });
  }
  return result;
}

inline Tensor transpose(const Tensor& a) {
  if (a.dim() != 2) throw DimensionError("transpose expects a matrix");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  auto av = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  Tensor result = detail::make_output({n, m}, std::move(out), {a});
  if (result.requires_grad()) {
    detail::record({a}, result, [a, m, n](std::span<const double> g) mutable {
      auto& ga = a.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
  }
  return result;
}

// Row-wise softmax. With `causal`, entry (i, j) for j > i is masked out.
inline Tensor softmax_rows(const Tensor& a, bool causal = false) {
  if (a.dim() != 2) throw DimensionError("softmax_rows expects a matrix");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n, 0.0);
  auto av = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t limit = causal ? std::min(n, i + 1) : n;
    double mx = av[i * n];
    for (std::size_t j = 1; j < limit; ++j) mx = std::max(mx, av[i * n + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < limit; ++j) {
      out[i * n + j] = std::exp(av[i * n + j] - mx);
      z += out[i * n + j];
    }
    for (std::size_t j = 0; j < limit; ++j) out[i * n + j] /= z;
  }
  Tensor result = detail::make_output({m, n}, std::move(out), {a});
  if (result.requires_grad()) {
    detail::record({a}, result, [a, result, m, n](std::span<const double> g) mutable {
      auto yv = result.data();
      auto& ga = a.grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * yv[i * n + j];
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += yv[i * n + j] * (g[i * n + j] - dot);
      }
    });
  }
  return result;
}

// Repeats a length-d vector over `rows` rows. Gradient is the column sum.
inline Tensor broadcast_rows(const Tensor& v, std::size_t rows) {
  const std::size_t d = v.numel();
  std::vector<double> out(rows * d);
  auto vv = v.data();
  for (std::size_t r = 0; r < rows; ++r) std::copy(vv.begin(), vv.end(), out.begin() + r * d);
  Tensor result = detail::make_output({rows, d}, std::move(out), {v});
  if (result.requires_grad()) {
    detail::record({v}, result, [v, rows, d](std::span<const double> g) mutable {
      auto& gv = v.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gv[j] += g[r * d + j];
    });
  }
  return result;
}

// Rows of `table` selected by `ids`.
inline Tensor embedding(const Tensor& table, std::span<const int> ids) {
  if (table.dim() != 2) throw DimensionError("embedding table must be a matrix");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  std::vector<double> out(ids.size() * d);
  auto tv = table.data();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw InputError("token id " + std::to_string(ids[r]) + " outside vocabulary of size " +
                       std::to_string(vocab));
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[r] * d), d, out.begin() + r * d);
  }
  Tensor result = detail::make_output({ids.size(), d}, std::move(out), {table});
  if (result.requires_grad()) {
    std::vector<int> kept(ids.begin(), ids.end());
    detail::record({table}, result, [table, kept, d](std::span<const double> g) mutable {
      auto& gt = table.grad_buffer();
      for (std::size_t r = 0; r < kept.size(); ++r)
        for (std::size_t j = 0; j < d; ++j) gt[kept[r] * d + j] += g[r * d + j];
    });
  }
  return result;
}

// Mean negative log-likelihood over rows whose target is >= 0; rows with a
// negative target are ignored. Returns 0 when no row is targeted.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  if (logits.dim() != 2 || logits.shape()[0] != targets.size()) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t m = logits.shape()[0], n = logits.shape()[1];
  auto lv = logits.data();
  std::vector<double> probs(m * n, 0.0);
  double loss = 0.0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] < 0) continue;
    if (static_cast<std::size_t>(targets[i]) >= n) throw InputError("cross_entropy target out of range");
    double mx = lv[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, lv[i * n + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(lv[i * n + j] - mx);
    const double log_z = std::log(z) + mx;
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] = std::exp(lv[i * n + j] - log_z);
    loss -= lv[i * n + targets[i]] - log_z;
    ++counted;
  }
  const double norm = counted ? 1.0 / static_cast<double>(counted) : 0.0;
  Tensor result = detail::make_output({1}, {loss * norm}, {logits});
  if (result.requires_grad()) {
    std::vector<int> kept(targets.begin(), targets.end());
    detail::record({logits}, result,
                   [logits, kept, probs = std::move(probs), n, norm](std::span<const double> g) mutable {
                     auto& gl = logits.grad_buffer();
                     for (std::size_t i = 0; i < kept.size(); ++i) {
                       if (kept[i] < 0) continue;
                       for (std::size_t j = 0; j < n; ++j) {
                         const double onehot = (static_cast<int>(j) == kept[i]) ? 1.0 : 0.0;
                         gl[i * n + j] += g[0] * norm * (probs[i * n + j] - onehot);
                       }
                     }
                   });
  }
  return result;
}

// h / var(h) * s + b per row, where var is the population variance of the
// row floored at kVarianceFloor. This divides by the variance rather than the
// standard deviation and does not subtract the mean from the numerator.
inline Tensor layernorm_scale(const Tensor& h, const Tensor& s, const Tensor& b) {
  if (h.dim() != 2) throw DimensionError("layernorm_scale expects a matrix input");
  const std::size_t m = h.shape()[0], d = h.shape()[1];
  if (s.numel() != d || b.numel() != d) {
    throw DimensionError("layernorm_scale: scale/shift must have length " + std::to_string(d));
  }
  auto hv = h.data();
  auto sv = s.data();
  auto bv = b.data();
  std::vector<double> mu(m), denom(m);
  std::vector<bool> clamped(m);
  std::vector<double> out(m * d);
  for (std::size_t r = 0; r < m; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) acc += hv[r * d + j];
    mu[r] = acc / static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (hv[r * d + j] - mu[r]) * (hv[r * d + j] - mu[r]);
    var /= static_cast<double>(d);
    clamped[r] = var < kVarianceFloor;
    denom[r] = clamped[r] ? kVarianceFloor : var;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = hv[r * d + j] / denom[r] * sv[j] + bv[j];
  }
  Tensor result = detail::make_output({m, d}, std::move(out), {h, s, b});
  if (result.requires_grad()) {
    detail::record({h, s, b}, result,
                   [h, s, b, m, d, mu, denom, clamped](std::span<const double> g) mutable {
                     auto hv = h.data();
                     auto sv = s.data();
                     if (b.requires_grad()) {
                       auto& gb = b.grad_buffer();
                       for (std::size_t r = 0; r < m; ++r)
                         for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
                     }
                     if (s.requires_grad()) {
                       auto& gs = s.grad_buffer();
                       for (std::size_t r = 0; r < m; ++r)
                         for (std::size_t j = 0; j < d; ++j) gs[j] += g[r * d + j] * hv[r * d + j] / denom[r];
                     }
                     if (h.requires_grad()) {
                       auto& gh = h.grad_buffer();
                       const double two_over_d = 2.0 / static_cast<double>(d);
                       for (std::size_t r = 0; r < m; ++r) {
                         const double c = denom[r];
                         double dot = 0.0;
                         for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * sv[j] * hv[r * d + j];
                         for (std::size_t k = 0; k < d; ++k) {
                           double v = g[r * d + k] * sv[k] / c;
                           if (!clamped[r]) v -= dot / (c * c) * two_over_d * (hv[r * d + k] - mu[r]);
                           gh[r * d + k] += v;
                         }
                       }
                     }
                   });
  }
  return result;
}

}  // namespace s3pet
