#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "s3pet/ops.hpp"

namespace s3pet {

struct GradCheck {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
};

// |a - n| / max(|a|, |n|, floor): relative where the gradient is sizeable,
// absolute (scaled by 1/floor) where both are near zero.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Compares the tape gradient of the scalar `loss()` with respect to every
// element of `inputs` against central differences with step `h`. `loss` must
// rebuild its value from the inputs' current data on every call.
inline GradCheck gradcheck(const std::function<Tensor()>& loss, std::vector<Tensor> inputs, double h = 1e-5,
                           double floor = 1e-6) {
  for (Tensor& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape tape;
    Tensor out;
    {
      auto rec = tape.record();
      out = loss();
    }
    tape.backward(out);
  }
  GradCheck result;
  for (Tensor& t : inputs) {
    const std::vector<double> analytic =
        t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end()) : std::vector<double>(t.numel(), 0.0);
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double x = data[i];
      data[i] = x + h;
      const double up = loss().item();
      data[i] = x - h;
      const double down = loss().item();
      data[i] = x;
      const double numeric = (up - down) / (2.0 * h);
      result.max_rel_error = std::max(result.max_rel_error, relative_error(analytic[i], numeric, floor));
      result.max_abs_error = std::max(result.max_abs_error, std::abs(analytic[i] - numeric));
      ++result.checked;
    }
    t.zero_grad();
  }
  return result;
}

}  // namespace s3pet
