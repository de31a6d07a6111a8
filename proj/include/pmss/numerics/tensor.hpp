#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pmss {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised for every contract violation detected by the numerics core
/// (shape mismatches, bad layer geometry, misuse of the tape).
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty means "no gradient"
  bool requires_grad = false;
  bool leaf = true;
};

/// Shared handle to a dense row-major array of doubles. Copies alias the same
/// storage; use clone() for a detached deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  explicit operator bool() const { return static_cast<bool>(impl_); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  double item() const;

  // 4-D accessors for N x C x H x W tensors.
  double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const;
  double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w);

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  bool is_leaf() const { return impl_->leaf; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  /// Gradient buffer, allocated as zeros on first use. Gradient state is
  /// bookkeeping on the shared storage, so it is reachable through const handles.
  std::span<double> grad_buffer() const;
  void clear_grad() const;

  bool all_finite() const;
  Tensor clone(bool requires_grad = false) const;
  bool same_as(const Tensor& other) const { return impl_ == other.impl_; }
  TensorImpl* impl() const { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  friend Tensor make_result(Shape shape, bool requires_grad);
  std::shared_ptr<TensorImpl> impl_;
};

/// Non-leaf tensor produced by an operation.
Tensor make_result(Shape shape, bool requires_grad);

/// Exact equality of shape and every element's bit pattern.
bool bitwise_equal(const Tensor& a, const Tensor& b);

}  // namespace pmss
