// Dense row-major tensors with reverse-mode differentiation.
//
// Tensors are shared-storage handles (copying a Tensor aliases its data and
// grad buffers). Operations never mutate their inputs; recording a Tape entry
// per executed op gives backward traversal in exact reverse execution order.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#if defined(_OPENMP)
#define DSSM_OMP_FOR _Pragma("omp parallel for schedule(static)")
#else
#define DSSM_OMP_FOR
#endif

namespace dssm {

using Shape = std::vector<int64_t>;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& m) : std::runtime_error(m) {}
};
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};
struct DataError : std::runtime_error {
  explicit DataError(const std::string& m) : std::runtime_error(m) {}
};
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& m) : std::runtime_error(m) {}
};
struct ResourceError : std::runtime_error {
  explicit ResourceError(const std::string& m) : std::runtime_error(m) {}
};
struct IntegrityError : std::runtime_error {
  explicit IntegrityError(const std::string& m) : std::runtime_error(m) {}
};

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

enum class Dtype { f32, f64 };

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

template <typename T>
class Tensor {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);

  struct Storage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // same length as data once requires_grad is set
    bool requires_grad = false;
  };

 public:
  Tensor() : s_(std::make_shared<Storage>()) {}

  explicit Tensor(Shape shape, T fill = T(0)) : s_(std::make_shared<Storage>()) {
    s_->shape = std::move(shape);
    s_->data.assign(shape_numel(s_->shape), fill);
  }

  static Tensor scalar(T v) {
    Tensor t(Shape{1});
    t.data()[0] = v;
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
      throw ShapeError("tensor init: shape " + shape_str(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    Tensor t;
    t.s_->shape = std::move(shape);
    t.s_->data = std::move(values);
    return t;
  }

  const Shape& shape() const { return s_->shape; }
  int rank() const { return static_cast<int>(s_->shape.size()); }
  int64_t dim(int i) const { return s_->shape[static_cast<size_t>(i)]; }
  int64_t size() const { return static_cast<int64_t>(s_->data.size()); }
  bool defined() const { return !s_->shape.empty() || !s_->data.empty(); }

  Dtype dtype() const { return std::is_same_v<T, float> ? Dtype::f32 : Dtype::f64; }

  T* data() { return s_->data.data(); }
  const T* data() const { return s_->data.data(); }
  std::vector<T>& vec() { return s_->data; }
  const std::vector<T>& vec() const { return s_->data; }

  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return s_->data[0];
  }

  bool requires_grad() const { return s_->requires_grad; }
  Tensor& set_requires_grad(bool v = true) {
    s_->requires_grad = v;
    if (v && s_->grad.size() != s_->data.size()) s_->grad.assign(s_->data.size(), T(0));
    return *this;
  }

  // Grad buffer; allocated zero-filled on first touch.
  T* grad() {
    if (s_->grad.size() != s_->data.size()) s_->grad.assign(s_->data.size(), T(0));
    return s_->grad.data();
  }
  const std::vector<T>& grad_vec() const { return s_->grad; }
  bool has_grad() const { return s_->grad.size() == s_->data.size(); }
  void zero_grad() {
    if (has_grad()) std::fill(s_->grad.begin(), s_->grad.end(), T(0));
  }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

  bool all_finite() const {
    for (T v : s_->data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  Tensor clone() const {
    Tensor t;
    t.s_->shape = s_->shape;
    t.s_->data = s_->data;
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> t(shape());
    for (int64_t i = 0; i < size(); ++i) t.data()[i] = static_cast<U>(data()[i]);
    return t;
  }

 private:
  std::shared_ptr<Storage> s_;
};

// ---------------------------------------------------------------------------
// Tape: ordered record of executed operations
// ---------------------------------------------------------------------------

template <typename T>
class Tape {
 public:
  void record(std::function<void()> backward_fn) { entries_.push_back(std::move(backward_fn)); }

  size_t size() const { return entries_.size(); }

  // Seeds d(loss)/d(loss) = 1 and replays entries in exact reverse order.
  void backward(Tensor<T>& loss) {
    if (loss.size() != 1) throw ShapeError("backward: loss must be a scalar tensor, got " + shape_str(loss.shape()));
    loss.grad()[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  }

  void clear() { entries_.clear(); }

 private:
  std::vector<std::function<void()>> entries_;
};

}  // namespace dssm
