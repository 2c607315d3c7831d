#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "moestack/model.hpp"
#include "moestack/router.hpp"
#include "moestack/training.hpp"

namespace moestack {

// ==== one reproducible experiment ====

struct DomainDataConfig {
  std::string name;
  int n_samples = 200;
  int max_rounds = 0;  // 0: fall back to the inner-loop default
};

struct PretrainSpec {
  int steps = 600;
  int batch_size = 8;
  float lr = 3e-3f;
  float lr_min = 3e-4f;
  int samples_per_domain = 120;  // mixed corpus drawn from every domain
};

// Everything a run needs, serializable as one JSON file. Data is generated,
// never shipped, so RunConfig plus the seed pins the entire experiment:
// corpora, splits, initialization, training order, and artifact layout.
struct RunConfig {
  ModelConfig model;
  std::vector<DomainDataConfig> domains;  // curriculum order
  double val_fraction = 0.25;
  PretrainSpec pretrain;
  InnerConfig inner;
  BestStackConfig best;

  bool use_nullspace = true;
  int k_dirs_per_domain = 8;
  int ns_samples = 512;
  uint64_t ns_seed = 7;

  RouterConfig router;  // domains filled from the curriculum when empty
  int router_samples_per_domain = 40;

  int cache_capacity = 4;
  uint64_t seed = 42;
  std::string out_dir = "runs/default";

  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  void save(const std::string& path) const;
  static RunConfig load(const std::string& path);  // validates

  // ---- artifact layout under out_dir ----
  std::string base_path() const { return out_dir + "/base.bin"; }
  std::string pretrain_trace_path() const {
    return out_dir + "/pretrain_loss.csv";
  }
  std::string train_dir(bool nullspace) const {
    return out_dir + (nullspace ? "/train" : "/train_nons");
  }
  std::string oracle_dir() const { return out_dir + "/oracle"; }
  std::string router_path() const { return out_dir + "/router.bin"; }
  std::string eval_dir() const { return out_dir + "/eval"; }
  std::string generate_dir() const { return out_dir + "/generate"; }
  std::string reports_dir() const { return out_dir + "/reports"; }

  // ---- derived pieces ----
  // Seeds are mixed per purpose so corpora, splits, and pretraining never
  // reuse one stream.
  uint64_t derived_seed(const std::string& tag) const;

  std::vector<Sample> pretrain_corpus() const;
  std::vector<DomainSpec> domain_specs() const;
  std::vector<Sample> router_corpus() const;  // fresh prompts per domain
  std::vector<std::string> domain_names() const;

  OuterConfig outer(bool nullspace) const;
  RouterConfig router_full() const;  // router with the domain list applied
};

}  // namespace moestack
