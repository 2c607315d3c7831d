#include "moestack/tensor.hpp"

#include <numeric>
#include <sstream>

namespace moestack {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  auto impl = std::make_shared<Impl>();
  impl->shape = shape;
  impl->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0f);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(const Shape& shape, float value, bool requires_grad) {
  Tensor t = zeros(shape, requires_grad);
  for (float& v : t.data()) v = value;
  return t;
}

Tensor Tensor::from_data(const Shape& shape, std::vector<float> data,
                         bool requires_grad) {
  if (static_cast<int64_t>(data.size()) != shape_numel(shape)) {
    throw ShapeError("from_data: " + std::to_string(data.size()) +
                     " values for shape " + shape_str(shape));
  }
  auto impl = std::make_shared<Impl>();
  impl->shape = shape;
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::uniform(const Shape& shape, float lo, float hi, Rng& rng,
                       bool requires_grad) {
  Tensor t = zeros(shape, requires_grad);
  for (float& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

Tensor Tensor::randn(const Shape& shape, float stddev, Rng& rng,
                     bool requires_grad) {
  Tensor t = zeros(shape, requires_grad);
  for (float& v : t.data()) v = stddev * rng.normal();
  return t;
}

float Tensor::item() const {
  if (numel() != 1) {
    throw ArgumentError("item() on tensor of shape " + shape_str(shape()));
  }
  return impl_->data[0];
}

std::span<float> Tensor::grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
  return impl_->grad;
}

std::span<const float> Tensor::grad() const {
  if (impl_->grad.empty()) {
    throw StateError("grad accessed before backward populated it");
  }
  return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

void Tensor::accumulate_grad(std::span<const float> g) {
  auto dst = grad();
  if (g.size() != dst.size()) {
    throw ShapeError("grad accumulation size mismatch");
  }
  for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<Impl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->requires_grad = impl_->requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::detached() const {
  auto impl = std::make_shared<Impl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->requires_grad = false;
  return Tensor(std::move(impl));
}

}  // namespace moestack
