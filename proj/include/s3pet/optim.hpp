#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "s3pet/tensor.hpp"

namespace s3pet {

struct AdamWOptions {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  // Learning rate decays linearly to zero over this many steps; 0 disables decay.
  std::size_t total_steps = 0;
};

// AdamW with decoupled weight decay and a linear learning-rate schedule.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWOptions options)
      : params_(std::move(params)), options_(options) {
    for (const Tensor& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  double current_lr() const {
    if (options_.total_steps == 0) return options_.lr;
    const double frac = static_cast<double>(step_) / static_cast<double>(options_.total_steps);
    return options_.lr * std::max(0.0, 1.0 - frac);
  }

  std::size_t steps_taken() const noexcept { return step_; }

  // Applies one update from the parameters' accumulated gradients. A
  // parameter with no gradient is treated as having gradient zero.
  void step() {
    std::vector<std::vector<double>> grads;
    grads.reserve(params_.size());
    for (const Tensor& p : params_) {
      if (p.has_grad()) {
        grads.emplace_back(p.grad().begin(), p.grad().end());
      } else {
        grads.emplace_back(p.numel(), 0.0);
      }
    }
    step(grads);
  }

  void step(const std::vector<std::vector<double>>& grads) {
    const double lr = current_lr();
    ++step_;
    const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto data = params_[k].mutable_data();
      const auto& g = grads[k];
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < data.size(); ++i) {
        data[i] -= lr * options_.weight_decay * data[i];
        m[i] = options_.beta1 * m[i] + (1.0 - options_.beta1) * g[i];
        v[i] = options_.beta2 * v[i] + (1.0 - options_.beta2) * g[i] * g[i];
        const double m_hat = m[i] / bc1;
        const double v_hat = v[i] / bc2;
        data[i] -= lr * m_hat / (std::sqrt(v_hat) + options_.eps);
      }
    }
  }

 private:
  std::vector<Tensor> params_;
  AdamWOptions options_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::size_t step_ = 0;
};

}  // namespace s3pet
