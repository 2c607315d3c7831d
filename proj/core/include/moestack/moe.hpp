#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "moestack/ops.hpp"
#include "moestack/tensor.hpp"

namespace moestack {

struct MoEConfig {
  int n_experts = 4;
  int top_k = 2;
  int rank = 8;
  float alpha = 8.0f;  // convention: alpha = rank unless overridden
  float aux_coeff = 0.01f;

  // rank-stabilized LoRA scale
  float scale() const { return alpha / std::sqrt(static_cast<float>(rank)); }
  void validate() const;
};

// Per-site routing bookkeeping for one forward pass.
//
// mean_prob is the token-mean of the clean (noise-free) full softmax over
// experts and stays in the graph, so the balance loss is differentiable.
// dispatch_fraction counts which experts actually received tokens after
// top-k masking, normalized by t*K so it sums to 1; it is a constant.
struct RoutingRecord {
  Tensor mean_prob;                       // [N], differentiable
  std::vector<double> dispatch_fraction;  // [N], sums to 1
  std::vector<double> mean_gate;          // [N], token-mean of final gates
  Tensor aux;                             // scalar, N * sum_e P(e) f(e)
  double aux_value = 0.0;
  int64_t tokens = 0;
};

// One mixture-of-LoRA-experts delta attached to a single projection site:
// N rank-r experts (A down, B up, B zero-initialized so a fresh delta is an
// exact no-op), plus learned routing and noise weights for noisy top-k
// gating. With n_experts == 1 the router is degenerate (the single gate is
// identically 1), so no routing weights are allocated: that configuration
// is a plain always-on LoRA.
class MoELoRADelta {
 public:
  MoELoRADelta() = default;

  static MoELoRADelta init(const MoEConfig& cfg, int64_t d_in, int64_t d_out,
                           Rng& rng);

  // gates [t, N] with exactly K positive entries per row summing to 1.
  // train_mode adds softplus(x W_n) * eps noise to the routing logits;
  // eval is noise-free and deterministic. site names this delta in errors.
  std::pair<Tensor, RoutingRecord> route(const Tensor& x, bool train_mode,
                                         Rng* rng,
                                         const std::string& site = "") const;

  // sum_e gates[t,e] * s * B_e(A_e(x)) -> [t, d_out]
  std::pair<Tensor, RoutingRecord> forward(const Tensor& x, bool train_mode,
                                           Rng* rng,
                                           const std::string& site = "") const;

  const MoEConfig& config() const { return cfg_; }
  int64_t d_in() const { return d_in_; }
  int64_t d_out() const { return d_out_; }
  bool defined() const { return a_.defined(); }

  Tensor a() const { return a_; }            // [N, r, d_in]
  Tensor b() const { return b_; }            // [N, d_out, r]
  Tensor router_weight() const { return wr_; }  // [d_in, N] (undefined if N==1)
  Tensor noise_weight() const { return wn_; }   // [d_in, N] (undefined if N==1)

  bool trainable() const { return trainable_; }
  void set_trainable(bool v);

  int64_t param_count() const;
  std::vector<std::pair<std::string, Tensor>> named_params(
      const std::string& prefix) const;

  // deep copy (used for best-snapshot save/restore)
  MoELoRADelta clone() const;
  // overwrite this delta's values with another's (shapes must match)
  void copy_values_from(const MoELoRADelta& other);

  uint64_t content_hash() const;

 private:
  MoEConfig cfg_;
  int64_t d_in_ = 0, d_out_ = 0;
  Tensor a_, b_, wr_, wn_;
  bool trainable_ = true;
};

}  // namespace moestack
