#include "tdt/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "tdt/errors.hpp"

namespace tdt::ad {

namespace {
thread_local Tape* g_current_tape = nullptr;
}

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::span<double> detail::Node::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double fill, bool requires_grad) {
  std::vector<double> v(numel_of(shape), fill);
  return from(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel_of(shape) != values.size())
    throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value.assign(values.begin(), values.end());
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({}, {v}, requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= node_->shape.size())
    throw IndexError("axis " + std::to_string(axis) + " out of range for " + shape_str(node_->shape));
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->value.size(); }

std::span<const double> Tensor::data() const { return node_->value; }

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw DimensionError("index rank mismatch for " + shape_str(s));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= s[axis]) throw IndexError("index out of range for " + shape_str(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node_->value[flat];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::vector<double> Tensor::grad_vector() const {
  if (node_->grad.empty()) return std::vector<double>(numel(), 0.0);
  return std::vector<double>(node_->grad.begin(), node_->grad.end());
}

std::span<const double> Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() { node_->grad.clear(); }

std::span<double> Tensor::mutable_data() { return node_->value; }

namespace {

Tensor leaf_copy(const detail::Node& src, bool requires_grad) {
  auto node = std::make_shared<detail::Node>();
  node->shape = src.shape;
  node->value = src.value;
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

}  // namespace

Tensor Tensor::detach() const { return leaf_copy(*node_, false); }

Tensor Tensor::clone(bool requires_grad) const { return leaf_copy(*node_, requires_grad); }

Tape::~Tape() { clear(); }

void Tape::record(std::shared_ptr<detail::Node> node) { nodes_.push_back(std::move(node)); }

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) throw DimensionError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  auto& seed = *loss.node();
  seed.ensure_grad()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    detail::Node& n = **it;
    if (n.backward && !n.grad.empty()) n.backward(n);
  }
}

void Tape::clear() {
  for (auto& n : nodes_) {
    n->backward = nullptr;
    n->grad.clear();
  }
  nodes_.clear();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_current_tape) { g_current_tape = &tape; }

TapeScope::~TapeScope() { g_current_tape = previous_; }

Tape* current_tape() noexcept { return g_current_tape; }

Tensor make_result(Shape shape, Buffer value, std::span<const Tensor> inputs,
                   std::function<void(detail::Node&)> backward) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->is_leaf = false;
  Tape* tape = g_current_tape;
  if (tape) {
    bool any = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor& t) { return t.defined() && t.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->backward = std::move(backward);
      tape->record(node);
    }
  }
  return Tensor(std::move(node));
}

Tensor make_result(Shape shape, Buffer value, std::initializer_list<Tensor> inputs,
                   std::function<void(detail::Node&)> backward) {
  return make_result(std::move(shape), std::move(value), std::span<const Tensor>(inputs.begin(), inputs.size()),
                     std::move(backward));
}

}  // namespace tdt::ad
