#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "dsnet/common.hpp"

namespace dsnet {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense float64 storage plus an optional gradient buffer of the same extent.
struct TensorData {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated iff requires_grad
  bool requires_grad = false;
  // Set on op outputs that depend on a grad-requiring leaf. Tracked tensors
  // propagate adjoints during backward but do not themselves keep a .grad.
  bool tracked = false;
};

// Value-semantic handle over shared storage. Tensors are immutable after an
// op produces them, except for grad population during a backward pass.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor scalar(double v);

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  std::size_t rank() const { return d_->shape.size(); }
  std::size_t dim(std::size_t i) const { return d_->shape[i]; }
  std::size_t size() const { return d_->value.size(); }

  double* data() { return d_->value.data(); }
  const double* data() const { return d_->value.data(); }
  std::vector<double>& vec() { return d_->value; }
  const std::vector<double>& vec() const { return d_->value; }

  // single-element read for scalars
  double item() const;

  bool requires_grad() const { return d_->requires_grad; }
  bool tracked() const { return d_->tracked; }
  Tensor& mark_tracked() {
    d_->tracked = true;
    return *this;
  }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return !d_->grad.empty(); }
  std::vector<double>& grad_vec() { return d_->grad; }
  const std::vector<double>& grad_vec() const { return d_->grad; }
  void zero_grad();

  bool all_finite() const;

  // Debug text format: "shape: d0 d1 ...", then one value per line,
  // row-major, 17 significant digits.
  void dump(std::ostream& os) const;

  const std::shared_ptr<TensorData>& storage() const { return d_; }

 private:
  explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
  std::shared_ptr<TensorData> d_;
};

// Scratch adjoint buffers for one backward sweep, keyed by storage identity.
// Adjoints are flushed into Tensor.grad additively at the end of the sweep,
// so running backward twice on the same graph exactly doubles grads.
class BackwardCtx {
 public:
  const std::vector<double>* find(const TensorData* t) const {
    auto it = adj_.find(t);
    return it == adj_.end() ? nullptr : &it->second;
  }
  std::vector<double>& accum(const std::shared_ptr<TensorData>& t) {
    auto it = adj_.find(t.get());
    if (it != adj_.end()) return it->second;
    keep_.push_back(t);
    return adj_.emplace(t.get(), std::vector<double>(t->value.size(), 0.0))
        .first->second;
  }
  const std::vector<std::shared_ptr<TensorData>>& touched() const {
    return keep_;
  }
  const std::vector<double>& of(const TensorData* t) const {
    return adj_.at(t);
  }

 private:
  std::unordered_map<const TensorData*, std::vector<double>> adj_;
  std::vector<std::shared_ptr<TensorData>> keep_;
};

struct GraphNode {
  std::string op;
  std::shared_ptr<TensorData> out;
  std::vector<std::shared_ptr<TensorData>> ins;
  // Accumulates input adjoints given the output adjoint.
  std::function<void(BackwardCtx&, const std::vector<double>&)> apply;
};

// Ordered record of executed operations. Execution order is topological, so
// a reverse sweep replays all adjoints; each node is visited exactly once.
class Graph {
 public:
  bool recording() const { return enabled_; }
  void set_enabled(bool on) { enabled_ = on; }
  void record(GraphNode node) { nodes_.push_back(std::move(node)); }
  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

  void backward(const Tensor& loss);

 private:
  std::vector<GraphNode> nodes_;
  bool enabled_ = true;
};

// Thread-local active graph that ops record onto.
Graph& graph();

void backward(const Tensor& loss);

struct NoGradGuard {
  NoGradGuard() : prev_(graph().recording()) { graph().set_enabled(false); }
  ~NoGradGuard() { graph().set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

}  // namespace dsnet
