#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "s3pet/errors.hpp"

namespace s3pet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient arrives
  bool requires_grad = false;
};

}  // namespace detail

// Dense row-major array of doubles with a gradient slot. Copies are shallow:
// two Tensor handles may refer to the same storage, which is how the tape
// routes gradients back to leaves.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorImpl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor filled(Shape shape, double value) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, value));
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data,
                       bool requires_grad = false) {
    return from({rows, cols}, std::move(data), requires_grad);
  }

  static Tensor vector(std::vector<double> data, bool requires_grad = false) {
    const std::size_t n = data.size();
    return from({n}, std::move(data), requires_grad);
  }

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  // Leading dimension for matrices, 1 for vectors.
  std::size_t rows() const { return dim() >= 2 ? impl_->shape[0] : 1; }
  // Trailing dimension.
  std::size_t cols() const { return impl_->shape.back(); }

  std::span<const double> data() const { return impl_->data; }
  // Mutation is reserved for leaf parameters (optimizer updates, test setup).
  std::span<double> mutable_data() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }

  double item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }

  bool requires_grad() const noexcept { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool flag) { impl_->requires_grad = flag; }

  bool has_grad() const noexcept { return impl_ && !impl_->grad.empty(); }
  // Gradient, or an empty span when nothing has flowed in yet.
  std::span<const double> grad() const { return impl_->grad; }
  std::vector<double>& grad_buffer() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
  }
  void zero_grad() const { impl_->grad.clear(); }

  // Deep copy with no gradient history.
  Tensor clone(bool requires_grad = false) const {
    return from(shape(), impl_->data, requires_grad);
  }

  const void* id() const noexcept { return impl_.get(); }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Append-only record of differentiable operations. Append order is a valid
// topological order, so backward simply walks the nodes in reverse.
class Tape {
 public:
  using Backward = std::function<void(std::span<const double> grad_out)>;

  struct Node {
    std::vector<Tensor> inputs;
    Tensor output;
    Backward backward;
    bool detached = false;
  };

  // RAII: while alive, ops executed on this thread record onto the tape.
  class Recording {
   public:
    explicit Recording(Tape& tape) : previous_(active()) { active() = &tape; }
    ~Recording() { active() = previous_; }
    Recording(const Recording&) = delete;
    Recording& operator=(const Recording&) = delete;

   private:
    Tape* previous_;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  [[nodiscard]] Recording record() { return Recording(*this); }

  static Tape* current() noexcept { return active(); }

  void push(Node node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<Node>& nodes() const noexcept { return nodes_; }

  // Seeds d(loss)/d(loss) = 1 and propagates in reverse append order.
  // Leaf gradients accumulate across calls until zeroed by the caller.
  void backward(Tensor loss) {
    if (loss.numel() != 1) throw DimensionError("backward() needs a scalar loss");
    loss.grad_buffer()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->detached || !it->output.has_grad()) continue;
      it->backward(it->output.grad());
    }
  }

 private:
  static Tape*& active() {
    thread_local Tape* tape = nullptr;
    return tape;
  }

  std::vector<Node> nodes_;
};

}  // namespace s3pet
