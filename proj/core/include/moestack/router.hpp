#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "moestack/data.hpp"
#include "moestack/model.hpp"

namespace moestack {

// ==== configuration ====

struct RouterConfig {
  // prompt features: blend of two hidden layers of the frozen base
  float mid_blend = 0.45f;
  float last_blend = 0.55f;
  int hidden_dim = 64;
  int seq_len = 64;  // prompts are truncated to this many tokens

  std::vector<std::string> domains;
  std::string chat_domain;        // always kept above the floor
  std::string soft_boost_domain;  // empty disables the soft boost

  float chat_floor = 0.20f;
  float gate_threshold = 0.12f;
  double oracle_improve_threshold = 0.01;
  float soft_boost_target = 0.5f;
  float target_blend_discovered = 0.8f;
  float target_blend_label = 0.2f;

  int epochs = 8;
  float lr = 5e-3f;
  float lr_min = 5e-4f;
  int batch_size = 8;
  float dropout = 0.1f;
  double val_fraction = 0.25;
  uint64_t seed = 42;

  // checkpoint selection: w_top1 * top1 + w_set_match * set_match
  //                       - w_val_bce * val_bce
  double w_top1 = 0.50;
  double w_set_match = 0.35;
  double w_val_bce = 0.15;

  // confidence margin: margin_coeff * mean(max(0, margin - |p - 0.5|));
  // margin_coeff = 0 disables it
  float margin_coeff = 0.05f;
  float margin = 0.3f;

  void validate() const;
  nlohmann::json to_json() const;
  static RouterConfig from_json(const nlohmann::json& j);
};

double composite_score(double top1, double set_match, double val_bce,
                       const RouterConfig& cfg);

// ==== prompt encoding ====

// Base-only features for a prompt: every stack weight is forced to zero for
// the forward pass (and restored afterwards), then the configured blend of
// the middle and final hidden states is returned, truncated to cfg.seq_len.
// Shape: [min(tokens, seq_len), d_model].
Tensor encode_prompt(BaseModel& model, const std::vector<int>& tokens,
                     const RouterConfig& cfg);

// ==== outcome discovery ====

struct OracleTarget {
  uint64_t prompt_id = 0;
  std::string label;
  double base_loss = 0.0;
  std::map<std::string, double> single_losses;
  std::vector<std::string> discovered;  // sorted domain names
  double best_loss = 0.0;
  std::vector<float> target;  // aligned with RouterConfig.domains
  int64_t cached_at = 0;      // unix seconds; informational only

  nlohmann::json to_json() const;
  static OracleTarget from_json(const nlohmann::json& j);
};

// Append-only JSONL cache, one file per (label, installed domain set).
// Unreadable lines are dropped with a warning and recomputed by the caller.
class OracleCache {
 public:
  OracleCache(std::string dir, const std::vector<std::string>& domains);

  std::optional<OracleTarget> lookup(const std::string& label,
                                     uint64_t prompt_id);
  void store(const std::string& label, const OracleTarget& t);
  int64_t dropped_lines() const { return dropped_; }

 private:
  std::string file_for(const std::string& label) const;
  void ensure_loaded(const std::string& label);

  std::string dir_;
  uint64_t set_key_ = 0;  // hash of the sorted installed-domain list
  std::map<std::string, std::map<uint64_t, OracleTarget>> by_label_;
  std::set<std::string> loaded_;
  int64_t dropped_ = 0;
};

// Greedy combination search: start from the bare base, repeatedly add the
// domain whose inclusion reduces this sample's loss the most, accepting only
// reductions above oracle_improve_threshold. The soft-boost domain gets a
// half target whenever adding it helps at all. The blended target mixes the
// discovered set with the sample's nominal label.
OracleTarget oracle_discover(BaseModel& model, const Sample& sample,
                             const RouterConfig& cfg,
                             OracleCache* cache = nullptr);

// Reference search over all 2^|domains| combinations. Returns the best
// domain set and its loss; ties prefer the smaller set.
std::pair<std::vector<std::string>, double> exhaustive_best_combo(
    BaseModel& model, const Sample& sample,
    const std::vector<std::string>& domains);

// ==== router network ====

// Per-domain sigmoid scorer over encoded prompts: token projection, a
// global attention-pooled summary, per-domain cross-attention contexts, a
// shared fusion MLP, and per-domain logit heads with learned temperatures.
class RouterNet {
 public:
  static RouterNet init(const RouterConfig& cfg, int d_model, Rng& rng);

  // features [t, d_model] -> independent probabilities [n_domains]
  Tensor forward(const Tensor& features, bool train_mode = false,
                 Rng* rng = nullptr) const;

  // temperature-scaled logits before the sigmoid; the training loss wants
  // these for numerical stability
  Tensor forward_logits(const Tensor& features, bool train_mode = false,
                        Rng* rng = nullptr) const;

  std::vector<std::pair<std::string, Tensor>> params() const;
  int64_t param_count() const;
  uint64_t content_hash() const;
  const RouterConfig& config() const { return cfg_; }
  int d_model() const { return d_model_; }

  RouterNet clone() const;

  // individual weights, mostly for tests and serialization
  Tensor proj_w() const { return proj_w_; }
  Tensor proj_b() const { return proj_b_; }
  Tensor global_query() const { return global_q_; }
  Tensor domain_queries() const { return domain_q_; }
  Tensor fuse_global() const { return fuse_g_; }
  Tensor fuse_domain() const { return fuse_d_; }
  Tensor fuse_bias() const { return fuse_b_; }
  Tensor head_w() const { return head_w_; }
  Tensor head_b() const { return head_b_; }
  Tensor log_inv_temp() const { return log_inv_temp_; }

 private:
  RouterConfig cfg_;
  int d_model_ = 0;
  Tensor proj_w_;        // [d_model, hidden]
  Tensor proj_b_;        // [hidden]
  Tensor global_q_;      // [1, hidden]
  Tensor domain_q_;      // [n_domains, hidden]
  Tensor fuse_g_;        // [hidden, hidden]
  Tensor fuse_d_;        // [hidden, hidden]
  Tensor fuse_b_;        // [hidden]
  Tensor head_w_;        // [n_domains, hidden], zero at init
  Tensor head_b_;        // [n_domains]
  Tensor log_inv_temp_;  // [n_domains]; probability = sigmoid(logit * e^x)
};

void save_router(const std::string& path, const RouterNet& net);
RouterNet load_router(const std::string& path);

// ==== training ====

struct RouterSample {
  uint64_t prompt_id = 0;
  std::string prompt;
  std::string label;
  Tensor features;
  std::vector<float> target;
  std::vector<std::string> discovered;

  bool mixed() const { return discovered.size() >= 2; }
};

// Joins raw samples with their oracle targets and encodes features.
std::vector<RouterSample> build_router_samples(
    BaseModel& model, const std::vector<Sample>& data,
    const std::vector<OracleTarget>& oracles, const RouterConfig& cfg);

// Unique-prompt split: every occurrence of a prompt lands on one side.
std::pair<std::vector<RouterSample>, std::vector<RouterSample>>
split_router_samples(const std::vector<RouterSample>& samples,
                     double val_fraction, uint64_t seed);

// Raises LeakageError if any prompt string appears on both sides.
void verify_no_leakage(const std::vector<RouterSample>& train,
                       const std::vector<RouterSample>& val);

struct RouterMetrics {
  double top1 = 0.0;
  double set_match = 0.0;
  double val_bce = 0.0;
  double composite = 0.0;
  int best_epoch = -1;
  std::vector<double> epoch_composites;
  int64_t train_samples = 0;
  int64_t val_samples = 0;
};

// BCE against blended targets plus the confidence margin penalty, cosine LR
// over cfg.epochs, checkpointed by composite score on the val split. The
// net ends up holding the best epoch's weights.
RouterMetrics train_router(RouterNet& net,
                           const std::vector<RouterSample>& samples,
                           const RouterConfig& cfg);

// ==== inference ====

// Probabilities -> domain weights: the chat domain is floored, everything
// below gate_threshold drops to zero, nothing is renormalized.
std::map<std::string, float> apply_gate_policy(
    const std::vector<float>& probs, const RouterConfig& cfg);

std::map<std::string, float> route(const RouterNet& net, BaseModel& model,
                                   const std::string& prompt,
                                   const RouterConfig& cfg);

struct RoutingStats {
  double single_top1 = 0.0;
  double mixed_set_match = 0.0;
  std::map<std::string, double> activation_rate;
  double cross_domain_rate = 0.0;  // prompts activating >= 2 domains
  int64_t n_single = 0;
  int64_t n_mixed = 0;

  nlohmann::json to_json() const;
};

RoutingStats routing_stats(const RouterNet& net,
                           const std::vector<RouterSample>& eval_set,
                           const RouterConfig& cfg);

}  // namespace moestack
