#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace biatten {

class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Thrown when operand shapes violate an operation's contract.
class ShapeError : public TensorError {
 public:
  using TensorError::TensorError;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

/// Dense row-major N-d array of T with an optional gradient slot.
/// Values are immutable once an op has produced the tensor; only the
/// grad slot is written afterwards (by Graph::backward).
template <typename T = float>
struct Tensor {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until gradients are accumulated
  bool requires_grad = false;

  Tensor() = default;

  explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)) {
    data.assign(shape_numel(shape), fill);
  }

  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor shape " + shape_str(shape) + " does not match " +
                       std::to_string(data.size()) + " values");
    }
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

  static Tensor full(Shape s, T value) { return Tensor(std::move(s), value); }

  static Tensor vector(std::vector<T> values) {
    Shape s{values.size()};
    return Tensor(std::move(s), std::move(values));
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }

  void zero_grad() { grad.assign(data.size(), T(0)); }

  bool all_finite() const {
    for (T v : data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.requires_grad = requires_grad;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

}  // namespace detail

}  // namespace biatten
