#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dsta {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Dense row-major array of doubles with an optional gradient buffer.
//
// Tensor is a shared handle: copies alias the same storage. Use clone() for a
// detached deep copy. Values are treated as immutable once an operation has
// produced them; only the gradient buffer changes afterwards (and parameters,
// which the optimizer updates in place between steps).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<double> data();
  std::span<const double> data() const;
  double item() const;
  double& operator[](std::size_t i) { return data()[i]; }
  double operator[](std::size_t i) const { return data()[i]; }
  // Element access for rank-2 tensors.
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);

  bool has_grad() const;
  // Allocates a zero gradient on first use. The gradient is accumulation
  // state shared by every handle, so it stays writable through const handles.
  std::span<double> grad() const;
  void zero_grad() const;
  void drop_grad() const;

  Tensor clone() const;
  // Same values, new shape (storage copied).
  Tensor reshaped(Shape shape) const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

  std::shared_ptr<Impl> impl_;
};

// Ordered record of differentiable operations.
//
// Operations append an entry when the tape is recording and at least one input
// requires a gradient. backward() walks the entries in reverse and accumulates
// d(loss)/d(input) into every tensor that requires a gradient.
class Tape {
 public:
  using BackwardRule = std::function<void()>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool recording() const { return recording_; }

  // True when an op on these inputs must be recorded.
  bool wants(std::initializer_list<const Tensor*> inputs) const;

  void record(std::vector<Tensor> inputs, Tensor output, BackwardRule rule);

  // Seeds d(loss)/d(loss) = 1 and runs every rule in reverse order. Gradients
  // of intermediate tensors are reset first, so calling this twice adds the
  // same contribution to the leaves twice.
  void backward(const Tensor& loss);

  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

 private:
  struct Entry {
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardRule rule;
  };
  bool recording_;
  std::vector<Entry> entries_;
};

}  // namespace dsta
