#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "camforge/random.hpp"

namespace camforge {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl;

// One recorded operation. `backward` reads the output's grad buffer and
// accumulates into the grads of those inputs that require grad.
struct Node {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool retain_grad = false;
  std::shared_ptr<Node> grad_fn;

  std::vector<double>& ensure_grad();
};

}  // namespace detail

/// Dense row-major float64 tensor with an optional reverse-mode tape.
///
/// A Tensor is a shared handle: copies alias the same storage. Results of
/// differentiable ops record a node when grad mode is enabled and any input
/// requires grad; `backward()` walks those nodes in reverse topological order.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access. Only meaningful for leaves (parameters, inputs);
  // mutating an intermediate invalidates any tape that saved it.
  std::span<double> mutable_data();
  double item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value = true);
  Tensor& retain_grad();
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Seeds d(root)/d(root) = 1. Throws unless this tensor holds one element.
  void backward() const;
  /// Explicit upstream gradient; `seed` must match numel().
  void backward(std::span<const double> seed) const;

  /// Same storage values, new leaf without history.
  Tensor detach() const;
  Tensor clone() const;

  detail::TensorImpl& impl() const;
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }
  static Tensor from_impl(std::shared_ptr<detail::TensorImpl> impl);

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Keeps freed tensor buffers in the process heap so that the next step
/// reuses them instead of faulting in fresh pages. No-op outside glibc.
void tune_allocator();

/// Thread-local switch for tape recording.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

// Builds an op result; attaches `backward` only if some input requires grad
// and grad mode is on.
Tensor make_result(Shape shape, std::vector<double> data, std::string op,
                   std::vector<Tensor> inputs,
                   std::function<void(const TensorImpl& out)> backward);

// Throws if a non-finite value appears in `data`. No-op in release builds.
void check_finite(const std::vector<double>& data, const std::string& op);

}  // namespace detail

}  // namespace camforge
