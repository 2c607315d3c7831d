#pragma once

#include <chrono>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include <json.hpp>

#include "moestack/model.hpp"

namespace moestack {

// ==== stack files ====
//
// One file per (domain, round) holding that round's frozen deltas for every
// injection site: JSON header (config, site list, hash) + raw f32 payload
// with per-site A, B, router, noise tensors in header order.

struct LoadedStack {
  std::string domain;
  int round = 0;
  MoEConfig config;
  std::map<std::string, MoELoRADelta> by_site;  // site full_name -> delta
  std::string content_hash;                     // hex of the payload hash
};

std::string save_stack(const std::string& path, const BaseModel& model,
                const std::string& domain, int round);

// Verifies the payload hash before constructing anything; a damaged file
// never yields a partial stack.
LoadedStack load_stack(const std::string& path);

// All-or-nothing: dimensions for every site are checked before the first
// install.
void install_stack(BaseModel& model, const LoadedStack& stack);

// ==== manifest ====

struct StackRecord {
  int round = 0;
  std::string file;  // relative to the manifest's directory
  int64_t byte_size = 0;
  std::string content_hash;
  double val_loss = 0.0;  // isolated val loss at freeze time
  double wall_seconds = 0.0;
};

struct DomainBlock {
  std::string domain;
  std::vector<StackRecord> stacks;  // round order
  std::string projector_file;       // empty when trained without protection
};

struct Manifest {
  int format_version = 1;
  std::string base_file;
  std::string base_hash;
  std::vector<DomainBlock> domains;  // training order
  std::string router_file;
  nlohmann::json metadata;  // seeds and config summary; no wall-clock data

  nlohmann::json to_json() const;
  static Manifest from_json(const nlohmann::json& j);
  void save(const std::string& path) const;
  static Manifest load(const std::string& path);

  bool has_domain(const std::string& domain) const;
  // stable content digest; per-stack wall_seconds is excluded so repeated
  // runs of one config agree
  uint64_t digest() const;
};

// Installs every recorded stack in training order (verifying each file's
// hash against the manifest) and returns the first planned domain the
// manifest does not cover yet, or "" when training is complete.
// A base-model hash mismatch refuses up front.
std::string resume(const Manifest& manifest, BaseModel& model,
                   const std::string& base_dir,
                   const std::vector<std::string>& planned);

// ==== per-prompt lazy loading with LRU accounting ====

class StackCache {
 public:
  struct LoadEvent {
    std::string domain;
    int round = 0;
    bool hit = false;
    double seconds = 0.0;
  };
  struct RequestReport {
    std::vector<LoadEvent> events;
    int hits = 0;
    int misses = 0;
    std::vector<std::string> evicted;  // "domain:round"
  };

  StackCache(std::string base_dir, Manifest manifest, int capacity);

  // Ensures every stack of every domain with weight > 0 is resident,
  // counting hits (already loaded, zero seconds) and misses (disk load,
  // measured seconds); evicts least-recently-used stacks beyond capacity.
  RequestReport lazy_load(const std::map<std::string, float>& weights);

  // model's frozen stacks := the resident set, installed in training order
  void sync_model(BaseModel& model) const;

  std::vector<std::string> resident_keys() const;  // "domain:round", LRU order
  int capacity() const { return capacity_; }
  int64_t hits() const { return hits_; }
  int64_t misses() const { return misses_; }
  int64_t requests() const { return requests_; }
  const std::vector<double>& load_seconds() const { return load_seconds_; }
  const std::vector<std::string>& eviction_log() const { return evictions_; }
  const std::vector<std::string>& timeline() const { return timeline_; }

 private:
  std::string dir_;
  Manifest manifest_;
  int capacity_ = 4;
  mutable std::mutex mu_;
  struct Entry {
    LoadedStack stack;
    int64_t last_used = 0;
  };
  std::map<std::string, Entry> resident_;  // key "domain:round"
  std::vector<std::string> resident_keys_unlocked() const;
  int64_t clock_ = 0;
  int64_t hits_ = 0, misses_ = 0, requests_ = 0;
  std::vector<double> load_seconds_;
  std::vector<std::string> evictions_;
  std::vector<std::string> timeline_;
};

struct CacheReport {
  double hit_rate = 0.0;
  double mean_load_seconds = 0.0;
  int64_t hits = 0, misses = 0, requests = 0;
  std::vector<std::string> timeline;
  std::vector<std::string> evictions;
};

// Throws StateError when no request has been served yet.
CacheReport cache_report(const StackCache& cache);

}  // namespace moestack
