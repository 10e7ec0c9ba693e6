#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace transgeo {

using Shape = std::vector<std::size_t>;

class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when an op produces NaN or Inf. The step that produced it must be abandoned.
class NonFiniteError : public TensorError {
 public:
  using TensorError::TensorError;
};

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

template <class T>
class Tensor;

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  // Tape generation that recorded this node; 0 for leaves.
  std::uint64_t generation = 0;

  std::vector<T>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Keeps large activation buffers on the heap instead of fresh mmap pages, which the
/// tape's allocate-per-op pattern otherwise pays for in page faults. Call once from main.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Ordered record of executed differentiable ops. One tape per thread and scalar type.
///
/// backward() replays the recorded closures in strict reverse order and then clears the
/// tape, bumping its generation. A loss produced under an older generation is rejected,
/// so a second backward over the same graph without re-running the forward fails.
template <class T>
class Tape {
 public:
  void record(std::function<void()> backward_fn) { entries_.push_back(std::move(backward_fn)); }

  std::uint64_t generation() const { return generation_; }
  std::size_t size() const { return entries_.size(); }

  /// Drops every recorded op without running it (used after a failed forward).
  void reset() {
    entries_.clear();
    ++generation_;
  }

  void backward(const Tensor<T>& loss);

 private:
  std::vector<std::function<void()>> entries_;
  std::uint64_t generation_ = 1;
};

template <class T>
Tape<T>& active_tape() {
  thread_local Tape<T> tape;
  return tape;
}

/// Dense row-major n-dimensional array with optional gradient.
///
/// Tensor is a handle: copies share storage. Use clone() for a deep copy.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : node_(std::make_shared<detail::Node<T>>()) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    validate_shape(shape);
    Tensor t;
    t.node_->data.assign(shape_numel(shape), value);
    t.node_->shape = std::move(shape);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    validate_shape(shape);
    if (shape_numel(shape) != data.size()) {
      throw TensorError("data length " + std::to_string(data.size()) + " does not match shape " +
                        shape_str(shape));
    }
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from(Shape{1}, {value}, requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  std::vector<T>& storage() { return node_->data; }
  const std::vector<T>& storage() const { return node_->data; }

  bool has_grad() const { return node_->grad.size() == node_->data.size() && !node_->data.empty(); }
  std::span<T> grad() { return node_->ensure_grad(); }
  std::span<const T> grad() const { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.assign(node_->data.size(), T(0)); }
  void clear_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  T item() const {
    if (numel() != 1) throw TensorError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  T& operator[](std::size_t i) { return node_->data[i]; }
  T operator[](std::size_t i) const { return node_->data[i]; }

  /// Deep copy of the values as a fresh leaf (no gradient, no graph history).
  Tensor clone() const { return from(shape(), node_->data, false); }

  /// Shares nothing with the graph; same values, not requiring grad.
  Tensor detach() const { return clone(); }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  detail::Node<T>& node() const { return *node_; }
  const std::shared_ptr<detail::Node<T>>& node_ptr() const { return node_; }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw TensorError("tensor rank must be at least 1");
    for (auto e : shape) {
      if (e == 0) throw TensorError("shape extents must be positive: " + shape_str(shape));
    }
  }

  std::shared_ptr<detail::Node<T>> node_;
};

template <class T>
void Tape<T>::backward(const Tensor<T>& loss) {
  auto& node = loss.node();
  if (loss.numel() != 1) {
    throw TensorError("backward() requires a scalar loss, got " + shape_str(loss.shape()));
  }
  if (!node.requires_grad) throw TensorError("backward() on a loss that does not require grad");
  if (node.generation != 0 && node.generation != generation_) {
    throw TensorError("loss is not on the active tape (backward already ran for this graph)");
  }
  node.ensure_grad()[0] += T(1);
  auto entries = std::move(entries_);
  entries_.clear();
  ++generation_;
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) (*it)();
}

template <class T>
void backward(const Tensor<T>& loss) {
  active_tape<T>().backward(loss);
}

namespace detail {

template <class T>
void check_finite(const Tensor<T>& t, const char* op) {
  for (T v : t.data()) {
    if (!std::isfinite(v)) throw NonFiniteError(std::string("non-finite value produced by ") + op);
  }
}

inline bool any_requires_grad() { return false; }

template <class First, class... Rest>
bool any_requires_grad(const First& first, const Rest&... rest) {
  return first.requires_grad() || any_requires_grad(rest...);
}

/// Creates an op output; marks it differentiable when grad mode is on and any input needs it.
template <class T, class... Inputs>
Tensor<T> make_output(Shape shape, std::vector<T> data, const Inputs&... inputs) {
  auto out = Tensor<T>::from(std::move(shape), std::move(data), false);
  if (grad_mode() && any_requires_grad(inputs...)) {
    out.set_requires_grad(true);
    out.node().generation = active_tape<T>().generation();
  }
  return out;
}

/// Registers a backward closure for `out` if it requires grad.
template <class T, class Fn>
void record(const Tensor<T>& out, Fn&& fn) {
  if (!out.requires_grad()) return;
  active_tape<T>().record(std::forward<Fn>(fn));
}

}  // namespace detail

}  // namespace transgeo
