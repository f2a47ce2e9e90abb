#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace dhicm {

#ifdef DHICM_REAL_FLOAT
using real = float;
#else
using real = double;
#endif

std::string shape_str(const std::vector<int>& shape);

// Shared storage behind a Tensor handle.
struct TensorData {
  std::vector<int> shape;
  std::vector<real> value;
  std::vector<real> grad;  // allocated lazily, same length as value once touched
  bool requires_grad = false;
};

// Dense n-dimensional array of reals with value semantics on the handle and
// shared storage underneath, so ops can route gradients to the same buffers
// the caller holds.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, real fill = 0.0, bool requires_grad = false);
  Tensor(std::vector<int> shape, std::vector<real> values, bool requires_grad = false);

  static Tensor scalar(real v);
  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, real v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::size_t numel() const { return node_->value.size(); }
  bool is_scalar() const { return defined() && numel() == 1; }

  std::vector<real>& value() { return node_->value; }
  const std::vector<real>& value() const { return node_->value; }

  real item() const;

  real& at(int i) { return node_->value[static_cast<std::size_t>(i)]; }
  real at(int i) const { return node_->value[static_cast<std::size_t>(i)]; }
  real& at(int i, int j);
  real at(int i, int j) const;
  real& at(int i, int j, int k);
  real at(int i, int j, int k) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  // Gradient buffer, zero-initialized on first access.
  std::vector<real>& grad();
  const std::vector<real>& grad() const;
  bool has_grad() const { return defined() && !node_->grad.empty(); }
  void zero_grad();

  // Value copy detached from any storage sharing.
  Tensor clone() const;

  std::shared_ptr<TensorData> node() const { return node_; }
  TensorData* raw() const { return node_.get(); }

 private:
  std::shared_ptr<TensorData> node_;
};

// Records the operations of one forward pass in execution order (which is a
// topological order of the DAG) and replays their backward rules in reverse.
//
// A Tape installs itself as the active tape for the current thread on
// construction and restores the previous one on destruction. Ops record onto
// the active tape only when at least one input requires a gradient; with no
// active tape, forward passes build no graph at all.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::shared_ptr<TensorData> out, std::function<void()> backward);

  // Seeds d(loss)/d(loss) = 1 and runs every recorded rule in reverse order.
  // Entries whose output never received a gradient are skipped. Throws if the
  // loss is not scalar, the tape is empty, or backward already ran.
  void backward(const Tensor& loss);

  // Clears recorded entries so the tape can host a new forward pass.
  void reset();

  std::size_t size() const { return entries_.size(); }

 private:
  struct Entry {
    std::shared_ptr<TensorData> out;
    std::function<void()> fn;
  };
  std::vector<Entry> entries_;
  bool backward_done_ = false;
  Tape* prev_ = nullptr;
};

// True when an op executed now should record gradients for this input.
bool track_grad(const Tensor& t);

}  // namespace dhicm
