#include "dsnet/tensor.hpp"

#include <cmath>
#include <cstdio>

namespace dsnet {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor Tensor::zeros(Shape shape) {
  auto d = std::make_shared<TensorData>();
  d->value.assign(numel(shape), 0.0);
  d->shape = std::move(shape);
  return Tensor(std::move(d));
}

Tensor Tensor::full(Shape shape, double v) {
  auto d = std::make_shared<TensorData>();
  d->value.assign(numel(shape), v);
  d->shape = std::move(shape);
  return Tensor(std::move(d));
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  if (numel(shape) != values.size())
    throw ConfigError("Tensor::from: " + std::to_string(values.size()) +
                      " values for shape " + shape_str(shape));
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(shape);
  d->value = std::move(values);
  return Tensor(std::move(d));
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

double Tensor::item() const {
  if (size() != 1)
    throw ConfigError("Tensor::item: tensor has " + std::to_string(size()) +
                      " elements");
  return d_->value[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  d_->requires_grad = on;
  if (on && d_->grad.size() != d_->value.size())
    d_->grad.assign(d_->value.size(), 0.0);
  if (!on) d_->grad.clear();
  return *this;
}

void Tensor::zero_grad() {
  for (double& g : d_->grad) g = 0.0;
}

bool Tensor::all_finite() const {
  for (double v : d_->value)
    if (!std::isfinite(v)) return false;
  return true;
}

void Tensor::dump(std::ostream& os) const {
  os << "shape:";
  for (std::size_t d : d_->shape) os << " " << d;
  os << "\n";
  char buf[40];
  for (double v : d_->value) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    os << buf << "\n";
  }
}

Graph& graph() {
  thread_local Graph g;
  return g;
}

void Graph::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ConfigError("backward: loss must be a defined scalar tensor");
  if (!std::isfinite(loss.item()))
    throw NumericError("backward: loss is not finite");

  BackwardCtx ctx;
  ctx.accum(loss.storage())[0] = 1.0;

  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    const std::vector<double>* out_adj = ctx.find(it->out.get());
    if (!out_adj) continue;  // not an ancestor of the loss
    it->apply(ctx, *out_adj);
  }

  for (const auto& t : ctx.touched()) {
    if (!t->requires_grad) continue;
    if (t->grad.size() != t->value.size()) t->grad.assign(t->value.size(), 0.0);
    const std::vector<double>& adj = ctx.of(t.get());
    for (std::size_t i = 0; i < adj.size(); ++i) t->grad[i] += adj[i];
  }
}

void backward(const Tensor& loss) { graph().backward(loss); }

}  // namespace dsnet
