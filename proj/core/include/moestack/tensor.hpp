#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "moestack/common.hpp"

namespace moestack {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major float32 array with an optional gradient buffer.
//
// Tensor is a cheap handle: copies share storage, clone() copies it.
// Autodiff ops hold input handles alive through the tape, so a Tensor
// that participated in a recorded forward stays valid until backward.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, float value, bool requires_grad = false);
  static Tensor ones(const Shape& shape, bool requires_grad = false) {
    return full(shape, 1.0f, requires_grad);
  }
  static Tensor scalar(float value, bool requires_grad = false) {
    return full({1}, value, requires_grad);
  }
  static Tensor from_data(const Shape& shape, std::vector<float> data,
                          bool requires_grad = false);
  static Tensor uniform(const Shape& shape, float lo, float hi, Rng& rng,
                        bool requires_grad = false);
  static Tensor randn(const Shape& shape, float stddev, Rng& rng,
                      bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }
  int64_t dim(size_t i) const { return impl_->shape[i]; }
  size_t ndim() const { return impl_->shape.size(); }

  std::span<float> data() { return impl_->data; }
  std::span<const float> data() const { return impl_->data; }
  float* ptr() { return impl_->data.data(); }
  const float* ptr() const { return impl_->data.data(); }

  float item() const;

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  std::span<float> grad();              // allocates zeros on first touch
  std::span<const float> grad() const;  // requires has_grad()
  void zero_grad();                     // drops the grad buffer
  void accumulate_grad(std::span<const float> g);

  Tensor clone() const;     // deep copy of data (not grad), keeps requires_grad
  Tensor detached() const;  // deep copy of data, requires_grad = false

  // identity of the underlying storage, used by the tape
  const void* id() const { return impl_.get(); }

 private:
  struct Impl {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty until first accumulation
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;

  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
};

}  // namespace moestack
