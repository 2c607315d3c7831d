#include "moestack/optim.hpp"

#include <cmath>

namespace moestack {

AdamW::AdamW(std::vector<std::pair<std::string, Tensor>> params,
             AdamWConfig cfg)
    : cfg_(cfg) {
  slots_.reserve(params.size());
  for (auto& [name, p] : params) {
    if (!p.defined()) throw ArgumentError("optimizer: undefined parameter " + name);
    Slot s;
    s.name = name;
    s.param = p;
    s.m.assign(static_cast<size_t>(p.numel()), 0.0f);
    s.v.assign(static_cast<size_t>(p.numel()), 0.0f);
    slots_.push_back(std::move(s));
  }
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(double(cfg_.beta1), double(t_));
  const double bc2 = 1.0 - std::pow(double(cfg_.beta2), double(t_));
  for (auto& s : slots_) {
    if (!s.param.has_grad()) continue;
    auto g = s.param.grad();
    for (float gv : g) {
      if (!std::isfinite(gv)) {
        throw InstabilityError("non-finite gradient in parameter '" + s.name +
                               "' at optimizer step " + std::to_string(t_));
      }
    }
    auto p = s.param.data();
    for (size_t i = 0; i < p.size(); ++i) {
      s.m[i] = cfg_.beta1 * s.m[i] + (1.0f - cfg_.beta1) * g[i];
      s.v[i] = cfg_.beta2 * s.v[i] + (1.0f - cfg_.beta2) * g[i] * g[i];
      const double mhat = double(s.m[i]) / bc1;
      const double vhat = double(s.v[i]) / bc2;
      p[i] -= static_cast<float>(
          cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                     double(cfg_.weight_decay) * double(p[i])));
    }
  }
}

void AdamW::zero_grad() {
  for (auto& s : slots_) s.param.zero_grad();
}

float cosine_lr(int64_t step, int64_t total_steps, float lr_max, float lr_min) {
  if (total_steps <= 0) return lr_max;
  if (step >= total_steps) return lr_min;
  if (step < 0) step = 0;
  const double t = double(step) / double(total_steps);
  return static_cast<float>(lr_min +
                            0.5 * (double(lr_max) - double(lr_min)) *
                                (1.0 + std::cos(M_PI * t)));
}

}  // namespace moestack
