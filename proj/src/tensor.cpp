#include "dhicm/tensor.hpp"

#include <sstream>
#include <stdexcept>

namespace dhicm {

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

static std::size_t checked_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor: non-positive dimension in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(std::vector<int> shape, real fill, bool requires_grad) {
  std::size_t n = checked_numel(shape);
  node_ = std::make_shared<TensorData>();
  node_->shape = std::move(shape);
  node_->value.assign(n, fill);
  node_->requires_grad = requires_grad;
}

Tensor::Tensor(std::vector<int> shape, std::vector<real> values, bool requires_grad) {
  std::size_t n = checked_numel(shape);
  if (values.size() != n) {
    throw std::invalid_argument("tensor: data length " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape));
  }
  node_ = std::make_shared<TensorData>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(real v) { return Tensor({1}, std::vector<real>{v}); }
Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  return Tensor(std::move(shape), 0.0, requires_grad);
}
Tensor Tensor::full(std::vector<int> shape, real v, bool requires_grad) {
  return Tensor(std::move(shape), v, requires_grad);
}

real Tensor::item() const {
  if (numel() != 1) throw std::runtime_error("item(): tensor has " + std::to_string(numel()) + " elements");
  return node_->value[0];
}

real& Tensor::at(int i, int j) {
  return node_->value[static_cast<std::size_t>(i) * static_cast<std::size_t>(node_->shape[1]) +
                      static_cast<std::size_t>(j)];
}
real Tensor::at(int i, int j) const {
  return node_->value[static_cast<std::size_t>(i) * static_cast<std::size_t>(node_->shape[1]) +
                      static_cast<std::size_t>(j)];
}
real& Tensor::at(int i, int j, int k) {
  std::size_t s1 = static_cast<std::size_t>(node_->shape[1]);
  std::size_t s2 = static_cast<std::size_t>(node_->shape[2]);
  return node_->value[(static_cast<std::size_t>(i) * s1 + static_cast<std::size_t>(j)) * s2 +
                      static_cast<std::size_t>(k)];
}
real Tensor::at(int i, int j, int k) const {
  std::size_t s1 = static_cast<std::size_t>(node_->shape[1]);
  std::size_t s2 = static_cast<std::size_t>(node_->shape[2]);
  return node_->value[(static_cast<std::size_t>(i) * s1 + static_cast<std::size_t>(j)) * s2 +
                      static_cast<std::size_t>(k)];
}

std::vector<real>& Tensor::grad() {
  if (node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
  return node_->grad;
}

const std::vector<real>& Tensor::grad() const {
  if (node_->grad.empty()) throw std::runtime_error("grad(): no gradient has been accumulated");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
}

Tensor Tensor::clone() const {
  return Tensor(node_->shape, node_->value, node_->requires_grad);
}

// ---- Tape ----

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape::Tape() {
  prev_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::shared_ptr<TensorData> out, std::function<void()> backward) {
  entries_.push_back(Entry{std::move(out), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw std::runtime_error("backward: loss must be a scalar tensor");
  }
  if (entries_.empty()) throw std::runtime_error("backward: tape is empty");
  if (backward_done_) throw std::runtime_error("backward: called twice without reset");
  backward_done_ = true;

  loss.node()->grad.assign(1, 1.0);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    // Outputs that never received gradient are not ancestors of the loss.
    if (it->out->grad.empty()) continue;
    it->fn();
  }
}

void Tape::reset() {
  entries_.clear();
  backward_done_ = false;
}

bool track_grad(const Tensor& t) {
  return Tape::active() != nullptr && t.defined() && t.requires_grad();
}

}  // namespace dhicm
