#pragma once

// Dense float64 tensors with a reverse-mode gradient tape.
//
// A Tensor is a shared handle to an immutable node. Operations executed while
// a Tape is active on the current thread (see TapeScope) are recorded in
// creation order, which is a valid topological order for reverse replay.
// Without an active tape, operations compute values only.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace tdt::ad {

using Shape = std::vector<std::size_t>;

// 64-byte aligned storage, so vectorized kernels see the same alignment on every run.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() noexcept = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;  // empty until something accumulates into it
  bool requires_grad = false;
  bool is_leaf = true;
  // Propagates self.grad into the inputs captured by the closure.
  std::function<void(Node& self)> backward;

  std::span<double> ensure_grad();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double fill, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  double item() const;
  double operator[](std::size_t flat) const { return data()[flat]; }
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  bool has_grad() const;
  // Gradient buffer; zeros of the right shape when nothing accumulated.
  std::vector<double> grad_vector() const;
  std::span<const double> grad() const;
  void zero_grad();

  // Raw write access. Only valid on leaves that are not referenced by a live
  // tape (optimizer updates, checkpoint loading, finite-difference probes).
  std::span<double> mutable_data();

  // Same values, no history, no gradient.
  Tensor detach() const;
  // Deep copy of the values into a fresh leaf with the given grad flag.
  Tensor clone(bool requires_grad) const;

  // Internal: used by ops.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Ordered record of operations executed while this tape was current.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  void record(std::shared_ptr<detail::Node> node);
  // Seeds d(loss)/d(loss) = 1 and replays the record in reverse. Gradients
  // accumulate (sum) into every participating tensor that requires grad.
  void backward(const Tensor& loss);
  // Drops the record and breaks closure references. Leaf gradients survive.
  void clear();
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

// Makes `tape` current for this thread for the lifetime of the scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
  ~TapeScope();

 private:
  Tape* previous_;
};

Tape* current_tape() noexcept;

// Builds an op result. If a tape is current and any input requires grad, the
// node is marked differentiable, given `backward`, and recorded.
Tensor make_result(Shape shape, Buffer value, std::initializer_list<Tensor> inputs,
                   std::function<void(detail::Node&)> backward);
Tensor make_result(Shape shape, Buffer value, std::span<const Tensor> inputs,
                   std::function<void(detail::Node&)> backward);

}  // namespace tdt::ad
