#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace lightclip {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Allocator pinning buffers to 64 bytes. Vectorized reductions pick their
/// split points from the address, so unaligned buffers would make the
/// floating-point summation order depend on where the heap put them.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

/// Backing store shared by Tensor handles. `grad` is empty until a backward
/// pass (or the optimizer) writes to it.
struct TensorStorage {
  Shape shape;
  Buffer data;
  Buffer grad;
  bool requires_grad = false;

  /// Returns the gradient buffer, allocating zeros on first use.
  std::span<double> grad_buffer();
};

/// Dense row-major array of doubles with an optional gradient.
///
/// A Tensor is a cheap handle; copies alias the same storage. Values are
/// treated as immutable once produced by an op. Only leaf parameters are
/// written in place (by the optimizer), and only between tapes.
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

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Copy of the values with no gradient tracking.
  Tensor detach() const;

  const std::shared_ptr<TensorStorage>& storage() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorStorage> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorStorage> impl_;

  friend Tensor make_tensor(Shape, Buffer, bool);
};

Tensor make_tensor(Shape shape, Buffer values, bool requires_grad);

/// Ordered record of primitive operations for reverse-mode differentiation.
///
/// Entries are appended in forward order, so walking them backwards is a
/// valid reverse topological order. One tape supports exactly one backward
/// pass; reset() clears it for reuse.
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double> grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(const Tensor& output, BackwardFn fn);
  void backward(const Tensor& loss);
  void reset();

  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Entry {
    std::shared_ptr<TensorStorage> output;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  bool consumed_ = false;
};

/// Makes `tape` the active tape of the calling thread for its lifetime.
/// Ops executed with no active tape record nothing (inference mode).
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

/// Suspends recording for its lifetime, e.g. to compute constant targets.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

}  // namespace lightclip
