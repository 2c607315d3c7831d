#include "moestack/stacked.hpp"

namespace moestack {

namespace {
thread_local ShuttleStats g_shuttle;
thread_local int64_t g_resident = 0;

struct ArenaGuard {
  explicit ArenaGuard(bool cold) {
    ++g_resident;
    if (g_resident > g_shuttle.peak_resident) g_shuttle.peak_resident = g_resident;
    if (cold) ++g_shuttle.shuttles;
  }
  ~ArenaGuard() { --g_resident; }
};
}  // namespace

ShuttleStats& shuttle_stats() { return g_shuttle; }
void reset_shuttle_stats() {
  g_shuttle = ShuttleStats{};
  g_resident = 0;
}

StackedLayer::StackedLayer(std::string name, Tensor base_weight)
    : name_(std::move(name)), base_(std::move(base_weight)) {
  if (base_.ndim() != 2) {
    throw ShapeError("stacked layer " + name_ + ": base weight must be 2-d");
  }
}

float StackedLayer::weight_for(const std::string& domain) const {
  auto it = weights_.find(domain);
  return it == weights_.end() ? 1.0f : it->second;
}

Tensor StackedLayer::forward(const Tensor& x, bool train_mode, Rng* rng,
                             LayerRecords* records) const {
  Tensor out = ops::matmul(x, base_);

  Tensor frozen_sum;
  for (const auto& fs : frozen_) {
    const float w = weight_for(fs.domain);
    if (w == 0.0f) continue;  // gated off: never computed
    ArenaGuard arena(fs.storage == FrozenStack::Storage::cold);
    auto [d, rec] = fs.delta.forward(x, /*train_mode=*/false, nullptr, name_);
    if (w != 1.0f) d = ops::scale(d, w);
    frozen_sum = frozen_sum.defined() ? ops::add(frozen_sum, d) : d;
    if (records) records->frozen.emplace_back(fs.domain, std::move(rec));
  }
  if (frozen_sum.defined()) {
    out = ops::add(out, frozen_sum);
    if (records) records->frozen_delta_sum = frozen_sum;
  }

  if (active_.has_value()) {
    auto [d, rec] = active_->forward(x, train_mode, rng, name_);
    if (projector_.defined()) d = ops::sub(d, ops::matmul(d, projector_));
    out = ops::add(out, d);
    if (records) records->active = std::move(rec);
  }
  return out;
}

void StackedLayer::add_active_stack(const MoEConfig& cfg, Rng& rng) {
  if (active_.has_value()) {
    throw StateError("stacked layer " + name_ +
                     ": active stack already present, freeze it first");
  }
  active_ = MoELoRADelta::init(cfg, d_in(), d_out(), rng);
}

FrozenStack& StackedLayer::freeze_active(const std::string& domain, int round) {
  if (!active_.has_value()) {
    throw StateError("stacked layer " + name_ + ": no active stack to freeze");
  }
  FrozenStack fs;
  fs.delta = std::move(*active_);
  fs.delta.set_trainable(false);
  fs.domain = domain;
  fs.round = round;
  fs.storage = FrozenStack::Storage::cold;
  active_.reset();
  frozen_.push_back(std::move(fs));
  return frozen_.back();
}

void StackedLayer::install_frozen(FrozenStack stack) {
  if (stack.delta.d_in() != d_in() || stack.delta.d_out() != d_out()) {
    throw ShapeError("stacked layer " + name_ + ": frozen stack dims " +
                     std::to_string(stack.delta.d_in()) + "x" +
                     std::to_string(stack.delta.d_out()) + " do not fit");
  }
  stack.delta.set_trainable(false);
  frozen_.push_back(std::move(stack));
}

void StackedLayer::drop_active() { active_.reset(); }

void StackedLayer::set_domain_weights(const std::map<std::string, float>& weights) {
  for (const auto& [domain, w] : weights) {
    if (w < 0.0f || w > 1.0f) {
      throw ArgumentError("domain weight for '" + domain + "' is " +
                          std::to_string(w) + ", must be in [0,1]");
    }
  }
  weights_ = weights;
}

void StackedLayer::set_projector(Tensor p) {
  if (p.ndim() != 2 || p.dim(0) != d_out() || p.dim(1) != d_out()) {
    throw ShapeError("stacked layer " + name_ + ": projector " +
                     shape_str(p.shape()) + " does not match d_out " +
                     std::to_string(d_out()));
  }
  p.set_requires_grad(false);
  projector_ = std::move(p);
}

void StackedLayer::clear_projector() { projector_ = Tensor(); }

MoELoRADelta& StackedLayer::active() {
  if (!active_.has_value()) {
    throw StateError("stacked layer " + name_ + ": no active stack");
  }
  return *active_;
}

const MoELoRADelta& StackedLayer::active() const {
  if (!active_.has_value()) {
    throw StateError("stacked layer " + name_ + ": no active stack");
  }
  return *active_;
}

}  // namespace moestack
