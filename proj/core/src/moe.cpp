#include "moestack/moe.hpp"

#include <cmath>

namespace moestack {

void MoEConfig::validate() const {
  if (n_experts < 1) throw ConfigError("n_experts must be >= 1");
  if (top_k < 1 || top_k > n_experts) {
    throw ConfigError("top_k " + std::to_string(top_k) +
                      " out of range for n_experts " + std::to_string(n_experts));
  }
  if (rank < 1) throw ConfigError("rank must be >= 1");
  if (!(scale() > 0.0f) || !std::isfinite(scale())) {
    throw ConfigError("scale alpha/sqrt(rank) must be finite and positive");
  }
  if (aux_coeff < 0.0f) throw ConfigError("aux_coeff must be >= 0");
}

MoELoRADelta MoELoRADelta::init(const MoEConfig& cfg, int64_t d_in,
                                int64_t d_out, Rng& rng) {
  cfg.validate();
  if (d_in < 1 || d_out < 1) throw ArgumentError("delta dims must be positive");
  MoELoRADelta d;
  d.cfg_ = cfg;
  d.d_in_ = d_in;
  d.d_out_ = d_out;
  const int64_t n = cfg.n_experts, r = cfg.rank;
  const float kaiming = std::sqrt(6.0f / static_cast<float>(d_in));
  d.a_ = Tensor::uniform({n, r, d_in}, -kaiming, kaiming, rng, true);
  d.b_ = Tensor::zeros({n, d_out, r}, true);
  if (n > 1) {
    const float rb = 1.0f / std::sqrt(static_cast<float>(d_in));
    d.wr_ = Tensor::uniform({d_in, n}, -rb, rb, rng, true);
    d.wn_ = Tensor::uniform({d_in, n}, -rb, rb, rng, true);
  }
  d.trainable_ = true;
  return d;
}

std::pair<Tensor, RoutingRecord> MoELoRADelta::route(
    const Tensor& x, bool train_mode, Rng* rng, const std::string& site) const {
  if (x.ndim() != 2 || x.dim(1) != d_in_) {
    throw ShapeError("route: input " + shape_str(x.shape()) + " for d_in " +
                     std::to_string(d_in_));
  }
  const int64_t t = x.dim(0);
  if (t == 0) throw ArgumentError("route: empty batch at " + site);
  const int64_t n = cfg_.n_experts;

  RoutingRecord rec;
  rec.tokens = t;

  if (n == 1) {
    // degenerate single-expert: always-on gate, perfectly balanced by
    // definition
    rec.mean_prob = Tensor::ones({1});
    rec.dispatch_fraction = {1.0};
    rec.mean_gate = {1.0};
    rec.aux = Tensor::ones({1});
    rec.aux_value = 1.0;
    return {Tensor::ones({t, 1}), rec};
  }

  Tensor clean = ops::matmul(x, wr_);  // [t, N]
  Tensor logits = clean;
  if (train_mode) {
    if (rng == nullptr) {
      throw ArgumentError("route: train mode needs an rng at " + site);
    }
    Tensor std_dev = ops::softplus(ops::matmul(x, wn_));
    Tensor eps = Tensor::randn({t, n}, 1.0f, *rng);  // constant draw
    logits = ops::add(clean, ops::mul(std_dev, eps));
  }
  for (float v : logits.data()) {
    if (std::isnan(v)) {
      throw RoutingError("NaN routing logit at site " +
                         (site.empty() ? std::string("<unnamed>") : site));
    }
  }

  Tensor gates = ops::softmax(ops::topk_mask(logits, cfg_.top_k));

  // balance bookkeeping: P(e) from clean full softmax (differentiable),
  // f(e) from the realized dispatch (constant)
  rec.mean_prob = ops::mean_rows(ops::softmax(clean));
  rec.dispatch_fraction.assign(static_cast<size_t>(n), 0.0);
  rec.mean_gate.assign(static_cast<size_t>(n), 0.0);
  const float* gp = gates.ptr();
  for (int64_t ti = 0; ti < t; ++ti)
    for (int64_t e = 0; e < n; ++e) {
      const float gv = gp[ti * n + e];
      if (gv > 0.0f) rec.dispatch_fraction[static_cast<size_t>(e)] += 1.0;
      rec.mean_gate[static_cast<size_t>(e)] += gv;
    }
  for (double& f : rec.dispatch_fraction) f /= double(t) * double(cfg_.top_k);
  for (double& g : rec.mean_gate) g /= double(t);

  std::vector<float> ffl(rec.dispatch_fraction.begin(),
                         rec.dispatch_fraction.end());
  Tensor fconst = Tensor::from_data({n}, std::move(ffl));
  rec.aux = ops::scale(ops::dot(rec.mean_prob, fconst),
                       static_cast<float>(n));
  rec.aux_value = rec.aux.item();
  return {gates, rec};
}

std::pair<Tensor, RoutingRecord> MoELoRADelta::forward(
    const Tensor& x, bool train_mode, Rng* rng, const std::string& site) const {
  auto [gates, rec] = route(x, train_mode, rng, site);
  Tensor expert_out = ops::batched_contract(x, a_, b_, cfg_.scale());
  return {ops::gate_combine(gates, expert_out), std::move(rec)};
}

void MoELoRADelta::set_trainable(bool v) {
  trainable_ = v;
  a_.set_requires_grad(v);
  b_.set_requires_grad(v);
  if (wr_.defined()) wr_.set_requires_grad(v);
  if (wn_.defined()) wn_.set_requires_grad(v);
}

int64_t MoELoRADelta::param_count() const {
  int64_t n = a_.numel() + b_.numel();
  if (wr_.defined()) n += wr_.numel();
  if (wn_.defined()) n += wn_.numel();
  return n;
}

std::vector<std::pair<std::string, Tensor>> MoELoRADelta::named_params(
    const std::string& prefix) const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back(prefix + ".A", a_);
  out.emplace_back(prefix + ".B", b_);
  if (wr_.defined()) out.emplace_back(prefix + ".router", wr_);
  if (wn_.defined()) out.emplace_back(prefix + ".noise", wn_);
  return out;
}

MoELoRADelta MoELoRADelta::clone() const {
  MoELoRADelta d;
  d.cfg_ = cfg_;
  d.d_in_ = d_in_;
  d.d_out_ = d_out_;
  d.trainable_ = trainable_;
  d.a_ = a_.clone();
  d.b_ = b_.clone();
  if (wr_.defined()) d.wr_ = wr_.clone();
  if (wn_.defined()) d.wn_ = wn_.clone();
  return d;
}

void MoELoRADelta::copy_values_from(const MoELoRADelta& other) {
  auto copy_one = [](Tensor dst, const Tensor& src) {
    if (!dst.defined() || !src.defined() || dst.shape() != src.shape()) {
      throw ShapeError("copy_values_from: mismatched delta shapes");
    }
    std::copy(src.data().begin(), src.data().end(), dst.data().begin());
  };
  copy_one(a_, other.a_);
  copy_one(b_, other.b_);
  if (wr_.defined()) copy_one(wr_, other.wr_);
  if (wn_.defined()) copy_one(wn_, other.wn_);
}

uint64_t MoELoRADelta::content_hash() const {
  uint64_t h = kFnvOffset;
  auto mix = [&h](const Tensor& t) {
    if (!t.defined()) return;
    h = fnv1a(t.ptr(), static_cast<size_t>(t.numel()) * sizeof(float), h);
  };
  mix(a_);
  mix(b_);
  mix(wr_);
  mix(wn_);
  return h;
}

}  // namespace moestack
