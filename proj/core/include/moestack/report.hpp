#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "moestack/config.hpp"
#include "moestack/router.hpp"
#include "moestack/store.hpp"
#include "moestack/training.hpp"

namespace moestack {

// ==== plot-ready artifacts ====

// One table of figure data. Reports are data, not pictures: CSV plus a JSON
// twin, deterministic cell formatting, and a mandatory pointer to the run
// they derive from.
struct Report {
  std::string kind;  // loss_curve | forgetting_matrix | expert_heatmap |
                     // orthogonality | routing_stats | cache_stats | comparison
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;
  nlohmann::json metadata;  // must carry a non-empty "run" entry

  void validate() const;
  nlohmann::json to_json() const;
  std::string to_csv() const;
};

// Deterministic cell text: shortest round-trip decimal for doubles,
// plain digits for integers.
std::string format_cell(double v);
std::string format_cell(int64_t v);

// Writes <dir>/<kind>.csv and <dir>/<kind>.json (validates first).
void write_report(const Report& r, const std::string& dir);

// Builds a report of the given kind by reading the run's stored artifacts;
// no model evaluation happens here. A missing input names the command that
// produces it.
Report build_report(const std::string& kind, const RunConfig& cfg);
const std::vector<std::string>& report_kinds();

// ==== measurements captured by the eval/generate commands ====

struct HeatmapRow {
  std::string domain;
  std::string site;
  int expert = 0;
  double mean_activation = 0.0;  // dispatch fraction, balanced -> 1/N
};

// Runs every domain's val prompts ungated and averages each stack's expert
// dispatch on its own domain's data.
std::vector<HeatmapRow> expert_utilization(
    BaseModel& model, const std::vector<DomainSpec>& domains);

struct OverlapRow {
  std::string site;
  std::string domain_a;
  std::string domain_b;
  double cos_principal = 0.0;  // largest principal cosine, 0 = orthogonal
};

// Isolates each domain in turn, collects its per-site output deltas on its
// val data, keeps the top-k right singular directions, and reports the
// largest principal cosine for every domain pair at every site.
std::vector<OverlapRow> subspace_overlap(BaseModel& model,
                                         const std::vector<DomainSpec>& domains,
                                         int k_dirs, int n_rows,
                                         uint64_t seed);

// Token-weighted mean answer loss where every sample is gated by its own
// routed weights (floor and threshold applied).
double routed_mean_loss(BaseModel& model, const RouterNet& net,
                        const std::vector<Sample>& val,
                        const RouterConfig& rcfg);

// Greedy next-byte decoding until a newline, max_new_tokens, or the context
// window; returns only the generated text.
std::string greedy_decode(BaseModel& model, const std::string& prompt,
                          int max_new_tokens);

// ==== mixture vs single-delta baseline ====

// Analytic parameter counts for a stack configuration over the model's
// injection sites (a one-expert stack carries no router or noise weights).
int64_t stack_param_count(const BaseModel& model, const MoEConfig& cfg);

// Smallest single-delta rank whose parameter count reaches the mixture's
// (never handicaps the baseline); the result stays within 10%.
int matched_single_rank(const BaseModel& model, const MoEConfig& moe);

struct LoraComparison {
  TrainResult moe;
  TrainResult single;
  int64_t moe_params = 0;
  int64_t single_params = 0;
  int single_rank = 0;
};

// Trains one fresh mixture stack and one parameter-matched single-delta
// stack on the same domain with the same schedule. The two models must
// share a base (checked by hash); both keep their trained active stack.
LoraComparison compare_lora(BaseModel& moe_model, BaseModel& single_model,
                            const DomainSpec& domain, const InnerConfig& cfg);

}  // namespace moestack
