#include "camforge/tensor.hpp"

#include <cmath>
#if defined(__GLIBC__)
#include <malloc.h>
#endif
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace camforge {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

std::vector<double>& TensorImpl::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor make_result(Shape shape, std::vector<double> data, std::string op,
                   std::vector<Tensor> inputs,
                   std::function<void(const TensorImpl& out)> backward) {
  check_finite(data, op);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  if (grad_enabled()) {
    bool any = false;
    for (const Tensor& t : inputs) any = any || (t.defined() && t.requires_grad());
    if (any) {
      auto node = std::make_shared<Node>();
      node->op = std::move(op);
      for (const Tensor& t : inputs) node->inputs.push_back(t.impl_ptr());
      node->backward = std::move(backward);
      impl->grad_fn = std::move(node);
      impl->requires_grad = true;
    }
  }
  return Tensor::from_impl(std::move(impl));
}

void check_finite([[maybe_unused]] const std::vector<double>& data,
                  [[maybe_unused]] const std::string& op) {
#ifndef NDEBUG
  for (double v : data) {
    if (!std::isfinite(v)) throw std::runtime_error("non-finite value produced by " + op);
  }
#endif
}

}  // namespace detail

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<detail::TensorImpl>()) {
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  if (shape_numel(shape) != values.size()) {
    throw std::invalid_argument("tensor shape " + shape_str(shape) + " holds " +
                                std::to_string(shape_numel(shape)) + " elements, got " +
                                std::to_string(values.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.impl_->data) v = dist(rng);
  return t;
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : t.impl_->data) v = dist(rng);
  return t;
}

detail::TensorImpl& Tensor::impl() const {
  if (!impl_) throw std::logic_error("use of undefined tensor");
  return *impl_;
}

Tensor Tensor::from_impl(std::shared_ptr<detail::TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

const Shape& Tensor::shape() const { return impl().shape; }

std::size_t Tensor::size(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw std::out_of_range("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return impl().data.size(); }

std::span<const double> Tensor::data() const { return impl().data; }
std::span<double> Tensor::mutable_data() { return impl().data; }

double Tensor::item() const {
  if (numel() != 1) {
    throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
  }
  return impl().data[0];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  if (!is_leaf() && !value) {
    throw std::logic_error("cannot clear requires_grad on a non-leaf tensor; use detach()");
  }
  impl().requires_grad = value;
  return *this;
}

Tensor& Tensor::retain_grad() {
  impl().retain_grad = true;
  return *this;
}

bool Tensor::is_leaf() const { return impl().grad_fn == nullptr; }

bool Tensor::has_grad() const { return !impl().grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw std::logic_error("tensor has no gradient");
  return impl().grad;
}

std::span<double> Tensor::mutable_grad() { return impl().ensure_grad(); }

void Tensor::zero_grad() { impl().grad.clear(); }

void Tensor::backward() const {
  if (numel() != 1) {
    throw std::invalid_argument("backward() without a seed needs a scalar root, got shape " +
                                shape_str(shape()));
  }
  const double one = 1.0;
  backward(std::span<const double>(&one, 1));
}

void Tensor::backward(std::span<const double> seed) const {
  if (seed.size() != numel()) {
    throw std::invalid_argument("backward seed has " + std::to_string(seed.size()) +
                                " elements, root has " + std::to_string(numel()));
  }
  if (!requires_grad()) throw std::logic_error("backward() on a tensor that does not require grad");

  // Iterative post-order DFS gives a topological order with each node once.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> visited;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto* fn = node->grad_fn.get();
    if (fn && next < fn->inputs.size()) {
      detail::TensorImpl* child = fn->inputs[next++].get();
      if (child && child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  auto& root_grad = impl_->ensure_grad();
  for (std::size_t i = 0; i < seed.size(); ++i) root_grad[i] += seed[i];

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl* node = *it;
    if (!node->grad_fn) continue;
    if (!node->grad.empty()) node->grad_fn->backward(*node);
    if (node != impl_.get() && !node->retain_grad) {
      std::vector<double>().swap(node->grad);
    }
  }
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = shape();
  impl->data = impl_->data;
  return from_impl(std::move(impl));
}

Tensor Tensor::clone() const { return detach(); }

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_MAX, 0);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace camforge
