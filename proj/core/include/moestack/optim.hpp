#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "moestack/tensor.hpp"

namespace moestack {

struct AdamWConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.01f;
};

// Decoupled-weight-decay Adam over a fixed set of named parameters.
// Parameters without a populated gradient are skipped for the step.
// A non-finite gradient raises InstabilityError naming the parameter.
class AdamW {
 public:
  AdamW(std::vector<std::pair<std::string, Tensor>> params,
        AdamWConfig cfg = {});

  void step();
  void zero_grad();

  void set_lr(float lr) { cfg_.lr = lr; }
  float lr() const { return cfg_.lr; }
  int64_t steps_done() const { return t_; }

 private:
  struct Slot {
    std::string name;
    Tensor param;
    std::vector<float> m;
    std::vector<float> v;
  };
  std::vector<Slot> slots_;
  AdamWConfig cfg_;
  int64_t t_ = 0;
};

// Cosine decay: lr_max at step 0, lr_min at total_steps and beyond.
float cosine_lr(int64_t step, int64_t total_steps, float lr_max, float lr_min);

}  // namespace moestack
