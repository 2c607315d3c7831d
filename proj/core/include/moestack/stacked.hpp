#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "moestack/moe.hpp"

namespace moestack {

// One frozen per-site delta produced by an inner-loop round. Parameters
// are immutable after freezing (requires_grad off, hash-stable).
struct FrozenStack {
  MoELoRADelta delta;
  std::string domain;
  int round = 0;
  enum class Storage { hot, cold };
  Storage storage = Storage::cold;
};

// Instrumentation for the one-resident-frozen-stack forward protocol:
// every frozen delta is checked into a notional hot arena for the duration
// of its computation and checked out immediately after, so the peak
// resident count stays at 1 no matter how many stacks exist.
struct ShuttleStats {
  int64_t peak_resident = 0;
  int64_t shuttles = 0;  // cold-storage check-ins
};
ShuttleStats& shuttle_stats();
void reset_shuttle_stats();

struct LayerRecords {
  std::vector<std::pair<std::string, RoutingRecord>> frozen;  // (domain, rec)
  std::optional<RoutingRecord> active;
  Tensor frozen_delta_sum;  // weighted sum of frozen contributions, if any
};

// Wraps one base projection W with the additive stack composition:
//
//   out = x W + sum_j weight(domain_j) * frozen_j(x) + project(active(x))
//
// Frozen stacks always run in eval routing (noise-free); a domain weight
// of 0 skips the stack entirely (it is never computed). When a projector
// is installed the active delta's output is replaced by delta - delta P
// before being added, which pins its contribution to the complement of
// the protected subspace for every input.
class StackedLayer {
 public:
  StackedLayer() = default;
  StackedLayer(std::string name, Tensor base_weight);

  Tensor forward(const Tensor& x, bool train_mode, Rng* rng,
                 LayerRecords* records = nullptr) const;

  void add_active_stack(const MoEConfig& cfg, Rng& rng);
  FrozenStack& freeze_active(const std::string& domain, int round);
  void install_frozen(FrozenStack stack);  // resume path
  void drop_active();

  void set_domain_weights(const std::map<std::string, float>& weights);
  const std::map<std::string, float>& domain_weights() const { return weights_; }

  void set_projector(Tensor p);  // [d_out, d_out], treated as constant
  void clear_projector();
  bool has_projector() const { return projector_.defined(); }
  Tensor projector() const { return projector_; }

  const std::string& name() const { return name_; }
  Tensor base_weight() const { return base_; }
  int64_t d_in() const { return base_.dim(0); }
  int64_t d_out() const { return base_.dim(1); }

  bool has_active() const { return active_.has_value(); }
  MoELoRADelta& active();
  const MoELoRADelta& active() const;
  const std::vector<FrozenStack>& frozen() const { return frozen_; }
  std::vector<FrozenStack>& frozen_mut() { return frozen_; }

 private:
  std::string name_;
  Tensor base_;  // [d_in, d_out]
  std::vector<FrozenStack> frozen_;
  std::optional<MoELoRADelta> active_;
  Tensor projector_;
  std::map<std::string, float> weights_;  // absent domain -> 1.0

  float weight_for(const std::string& domain) const;
};

}  // namespace moestack
