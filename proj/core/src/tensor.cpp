#include "lightclip/tensor.hpp"

#include <algorithm>
#include <numeric>

#include "lightclip/errors.hpp"

namespace lightclip {

namespace {
thread_local Tape* g_active_tape = nullptr;
}  // namespace

std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

std::span<double> TensorStorage::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor make_tensor(Shape shape, Buffer values, bool requires_grad) {
  for (auto extent : shape) {
    if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (values.size() != numel_of(shape)) {
    throw DimensionError("tensor data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorStorage>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = numel_of(shape);
  return make_tensor(std::move(shape), Buffer(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = numel_of(shape);
  return make_tensor(std::move(shape), Buffer(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return make_tensor(std::move(shape), Buffer(values.begin(), values.end()), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return make_tensor({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape()));
  }
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }

std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::mutable_data() { return impl_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw DimensionError("index rank mismatch for " + shape_str(shape()));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= impl_->shape[axis]) throw DimensionError("index out of range for " + shape_str(shape()));
    flat = flat * impl_->shape[axis] + i;
    ++axis;
  }
  return impl_->data[flat];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool value) { impl_->requires_grad = value; }
bool Tensor::has_grad() const { return !impl_->grad.empty(); }
std::span<const double> Tensor::grad() const { return impl_->grad; }
std::span<double> Tensor::mutable_grad() { return impl_->grad_buffer(); }

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return make_tensor(impl_->shape, impl_->data, false); }

void Tape::record(const Tensor& output, BackwardFn fn) {
  if (consumed_) throw ContractError("cannot record onto a tape that has already run backward");
  entries_.push_back({output.storage(), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw ContractError("backward already ran on this tape; call reset() first");
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) throw ContractError("loss does not depend on any requires_grad tensor");
  consumed_ = true;
  loss.storage()->grad.assign(1, 1.0);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->fn(it->output->grad);
  }
}

void Tape::reset() {
  entries_.clear();
  consumed_ = false;
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

}  // namespace lightclip
