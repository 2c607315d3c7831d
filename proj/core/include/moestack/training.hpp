#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "moestack/data.hpp"
#include "moestack/model.hpp"
#include "moestack/store.hpp"

namespace moestack {

// ==== configuration ====

// One boosting round trains one fresh additive stack on the residual task
// loss, with the previously frozen stacks contributing at full weight.
struct InnerConfig {
  int max_rounds = 2;
  int steps_per_round = 400;
  int eval_interval = 25;
  double min_loss_delta = 0.002;  // stop boosting below this improvement
  float lr = 2e-3f;
  int batch_size = 8;
  uint64_t seed = 42;
  MoEConfig moe;  // architecture of every stack this loop creates

  void validate() const;
};

struct BestStackConfig {
  double spike_threshold = 0.1;
  int patience = 4;

  void validate() const;
};

struct DomainSpec {
  std::string name;
  std::vector<Sample> train;
  std::vector<Sample> val;
  int max_rounds = 0;  // 0: use InnerConfig.max_rounds
  int curriculum_position = 0;
};

// ==== best-stack tracking ====

enum class StackAction { snapshot, keep_going, restore_and_stop, plateau_stop };

// Decides, at each validation eval, whether the active stack just improved
// (snapshot it), regressed sharply (restore the best and stop the round), or
// has plateaued for `patience` consecutive evals (ditto). Pure state machine;
// the trainer owns the actual weight copies.
class BestStackCallback {
 public:
  explicit BestStackCallback(const BestStackConfig& cfg);

  StackAction on_eval(double val_loss);
  double best() const { return best_; }
  bool has_best() const { return seen_any_; }

 private:
  BestStackConfig cfg_;
  double best_ = 0.0;
  bool seen_any_ = false;
  int stale_evals_ = 0;
};

// ==== evaluation gating ====

struct Gating {
  enum class Mode { ungated, isolated, routed };
  Mode mode = Mode::ungated;
  std::string domain;                    // isolated target
  std::map<std::string, float> weights;  // routed weights; absent domains -> 0

  static Gating ungated();
  static Gating isolated(const std::string& domain);
  static Gating routed(std::map<std::string, float> weights);
};

// Deterministic token-weighted mean cross-entropy over the val set under the
// requested gating (noise-free routing, frozen dropout). Leaves the model's
// domain weights as the gating set them.
double evaluate(BaseModel& model, const std::vector<Sample>& val,
                const Gating& gating);

// ==== loss traces ====

struct LossRecord {
  int64_t step = 0;
  std::string split;  // "train" | "val"
  std::string domain;
  int round = 0;
  double task_loss = 0.0;
  double aux_loss = 0.0;
  double total = 0.0;
};

// Appends rows; writes the header only when creating the file.
void write_loss_csv(const std::string& path,
                    const std::vector<LossRecord>& trace);

// ==== inner loop ====

struct TrainResult {
  std::vector<LossRecord> trace;
  double best_val_loss = 0.0;
  int steps_run = 0;
  std::string stop_reason;  // "completed" | "spike" | "plateau"
};

// Trains the already-installed active stack for one round. Fresh optimizer,
// loss = answer-masked cross-entropy + aux_coeff * mean site balance loss,
// per-sample gradients scaled by 1/batch. Validation every eval_interval
// steps (and at the final step) drives BestStackCallback; the function
// returns with the best snapshot restored into the active stack.
// A non-finite loss restores the best snapshot and raises InstabilityError.
TrainResult train_stack(BaseModel& model, const DomainSpec& domain,
                        const InnerConfig& cfg,
                        const BestStackConfig& best_cfg, int round);

struct RoundSummary {
  int round = 0;
  double val_loss = 0.0;           // full-stack val loss after this round
  double val_loss_isolated = 0.0;  // this domain alone, right after freezing
  std::string stack_file;          // empty when no stack_dir was given
  int64_t byte_size = 0;
  std::string content_hash;
  std::string stop_reason;
  double wall_seconds = 0.0;
};

struct InnerResult {
  std::string domain;
  double baseline_loss = 0.0;  // before any of this domain's stacks
  std::vector<RoundSummary> rounds;
  std::vector<LossRecord> trace;
  bool plateau_break = false;  // ended early on diminishing returns
};

// Residual boosting: evaluate the baseline, then repeatedly add a stack,
// train it, freeze it, and re-evaluate, stopping once a round improves the
// val loss by less than min_loss_delta (the marginal stack stays frozen) or
// the round budget is spent. Stacks are written to stack_dir when nonempty.
InnerResult inner_loop(BaseModel& model, const DomainSpec& domain,
                       const InnerConfig& cfg,
                       const BestStackConfig& best_cfg,
                       const std::string& stack_dir);

// ==== forgetting matrices ====

// Rows are after-domain checkpoints in training order, columns are eval
// domains; cells hold val losses, NaN marking "not yet trained".
struct ForgettingMatrix {
  std::string mode;  // "ungated" | "isolated"
  std::vector<std::string> rows;
  std::vector<std::string> cols;
  std::vector<std::vector<double>> cells;

  void append_row(const std::string& row, std::vector<double> vals);
  double cell(const std::string& row, const std::string& col) const;

  nlohmann::json to_json() const;  // NaN cells become null
  static ForgettingMatrix from_json(const nlohmann::json& j);
  void save(const std::string& path) const;
  static ForgettingMatrix load(const std::string& path);
};

// ==== outer loop ====

struct OuterConfig {
  InnerConfig inner;
  BestStackConfig best;
  int k_dirs_per_domain = 8;  // protected directions added per prior domain
  int ns_samples = 512;       // token positions sampled for delta collection
  uint64_t ns_seed = 7;
  std::string out_dir;  // run directory: stacks/, manifest, traces, matrices

  // Reserved refinement hook, invoked after each domain freezes. Default
  // no-op.
  std::function<void(BaseModel&, const DomainSpec&)> post_domain_hook;
};

struct OuterResult {
  Manifest manifest;
  ForgettingMatrix ungated;
  ForgettingMatrix isolated;
  std::vector<InnerResult> domains_run;  // executed by this call
  std::vector<std::string> skipped;      // already covered by the manifest
  std::vector<LossRecord> trace;         // this call's rows only
};

// Sequential continual learning over a curriculum of domains. For every
// domain after the first (when use_nullspace is set) the projectors are
// rebuilt from all frozen stacks against all previous domains' val data and
// installed for the duration of that domain's training. After each domain the
// manifest and both forgetting matrices are updated on disk, so an
// interrupted run resumes from the first uncovered domain.
OuterResult outer_loop(BaseModel& model, const std::vector<DomainSpec>& domains,
                       const OuterConfig& cfg, bool use_nullspace);

}  // namespace moestack
