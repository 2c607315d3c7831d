#pragma once

#include <array>
#include <set>

#include "moestack/stacked.hpp"

namespace moestack {

struct ModelConfig {
  int n_layers = 4;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 256;
  int vocab_size = 128;  // byte-level
  int max_seq_len = 64;
  uint64_t seed = 42;

  void validate() const;
};

inline constexpr std::array<const char*, 7> kSiteNames = {
    "q_proj", "k_proj", "v_proj",    "o_proj",
    "gate_proj", "up_proj", "down_proj"};

struct SiteInfo {
  int layer;
  std::string site;
  int64_t d_in;
  int64_t d_out;
  std::string full_name;  // "L<layer>.<site>"
};

struct ForwardResult {
  Tensor logits;               // [t, vocab]
  std::vector<Tensor> hidden;  // n_layers+1 states [t, d_model] when captured
  bool truncated = false;
};

// Per-site routing records in injection-site order (layer-major).
struct ForwardRecords {
  std::vector<LayerRecords> sites;
};

// Decoder-only transformer whose seven projections per layer are wrapped
// in StackedLayers. Pre-norm blocks, gelu(gate) * up MLP, no projection
// biases, untied output head, learned absolute positions.
class BaseModel {
 public:
  BaseModel() = default;
  static BaseModel init(const ModelConfig& cfg);

  ForwardResult forward(const std::vector<int>& tokens, bool train_mode,
                        Rng* rng, bool capture_hidden = false,
                        ForwardRecords* records = nullptr) const;

  std::vector<SiteInfo> injection_sites() const;
  size_t n_sites() const { return sites_.size(); }
  StackedLayer& site(size_t flat_index) { return sites_.at(flat_index); }
  const StackedLayer& site(size_t flat_index) const { return sites_.at(flat_index); }
  StackedLayer& site(int layer, const std::string& name);
  const StackedLayer& site(int layer, const std::string& name) const;
  size_t site_index(int layer, const std::string& name) const;

  // ---- stack management across all sites ----
  void add_active_stacks(const MoEConfig& cfg, Rng& rng);
  void freeze_active_stacks(const std::string& domain, int round);
  void drop_active_stacks();
  bool has_active() const;
  int64_t active_param_count() const;
  std::vector<std::pair<std::string, Tensor>> active_params() const;

  // Applies the map to every site; returns names in the map that match no
  // frozen stack's domain (callers may warn).
  std::vector<std::string> set_domain_weights(
      const std::map<std::string, float>& weights);
  std::set<std::string> frozen_domains() const;

  // ---- base parameters ----
  std::vector<std::pair<std::string, Tensor>> base_params() const;
  void freeze_base();
  bool base_frozen() const { return frozen_; }
  uint64_t base_hash() const;

  const ModelConfig& config() const { return cfg_; }

  void save_base(const std::string& path) const;
  static BaseModel load_base(const std::string& path);

 private:
  ModelConfig cfg_;
  Tensor tok_embed_;  // [vocab, d_model]
  Tensor pos_embed_;  // [max_seq, d_model]
  struct LayerNormParams {
    Tensor gamma, beta;
  };
  std::vector<LayerNormParams> ln1_, ln2_;
  std::vector<StackedLayer> sites_;  // layer-major, 7 per layer
  LayerNormParams final_ln_;
  Tensor head_;  // [d_model, vocab]
  bool frozen_ = false;

  // base tensors in canonical (serialization/hash) order
  std::vector<std::pair<std::string, Tensor>> canonical_base() const;
};

// Next-token pretraining over a flat token stream using random windows.
// Returns the model frozen. Throws DataError when the stream is shorter
// than one training window.
BaseModel pretrain_base(const std::vector<int>& stream, int steps,
                        const ModelConfig& cfg, int batch_size = 8,
                        float lr_max = 3e-3f, float lr_min = 3e-4f,
                        std::vector<float>* loss_trace = nullptr);

}  // namespace moestack
