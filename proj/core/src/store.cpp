#include "moestack/store.hpp"

#include <algorithm>
#include <filesystem>

#include "moestack/io.hpp"

namespace moestack {

namespace {

namespace fs = std::filesystem;

nlohmann::json moe_config_json(const MoEConfig& c) {
  return {{"n_experts", c.n_experts},
          {"top_k", c.top_k},
          {"rank", c.rank},
          {"alpha", c.alpha},
          {"aux_coeff", c.aux_coeff}};
}

MoEConfig moe_config_from(const nlohmann::json& j) {
  MoEConfig c;
  c.n_experts = j.at("n_experts").get<int>();
  c.top_k = j.at("top_k").get<int>();
  c.rank = j.at("rank").get<int>();
  c.alpha = j.at("alpha").get<float>();
  c.aux_coeff = j.at("aux_coeff").get<float>();
  c.validate();
  return c;
}

void append_tensor(std::vector<float>& payload, const Tensor& t) {
  payload.insert(payload.end(), t.data().begin(), t.data().end());
}

int64_t delta_float_count(const MoEConfig& c, int64_t d_in, int64_t d_out) {
  int64_t n = int64_t(c.n_experts) * c.rank * d_in +
              int64_t(c.n_experts) * d_out * c.rank;
  if (c.n_experts > 1) n += 2 * d_in * c.n_experts;
  return n;
}

std::string stack_key(const std::string& domain, int round) {
  return domain + ":" + std::to_string(round);
}

}  // namespace

// ==== stack files ====

std::string save_stack(const std::string& path, const BaseModel& model,
                const std::string& domain, int round) {
  nlohmann::json sites = nlohmann::json::array();
  std::vector<float> payload;
  const MoEConfig* cfg = nullptr;

  for (const auto& info : model.injection_sites()) {
    const StackedLayer& layer = model.site(info.layer, info.site);
    const FrozenStack* found = nullptr;
    for (const auto& f : layer.frozen()) {
      if (f.domain == domain && f.round == round) {
        found = &f;
        break;
      }
    }
    if (found == nullptr) {
      throw StateError("save_stack: site " + info.full_name +
                       " has no frozen stack for " + stack_key(domain, round));
    }
    if (found->delta.trainable()) {
      throw StateError("save_stack: stack " + stack_key(domain, round) +
                       " at " + info.full_name + " is still trainable");
    }
    cfg = &found->delta.config();
    sites.push_back({{"site", info.full_name},
                     {"d_in", found->delta.d_in()},
                     {"d_out", found->delta.d_out()}});
    append_tensor(payload, found->delta.a());
    append_tensor(payload, found->delta.b());
    if (cfg->n_experts > 1) {
      append_tensor(payload, found->delta.router_weight());
      append_tensor(payload, found->delta.noise_weight());
    }
  }
  if (cfg == nullptr) throw StateError("save_stack: model has no sites");

  const std::string digest = hash_hex(io::payload_hash(
      std::span<const float>(payload.data(), payload.size())));
  nlohmann::json header = {
      {"kind", "stack"},
      {"format_version", 1},
      {"domain", domain},
      {"round", round},
      {"moe", moe_config_json(*cfg)},
      {"scale", cfg->scale()},
      {"endianness", "little"},
      {"dtype", "f32"},
      {"sites", sites},
      {"content_hash", digest},
  };
  io::write_headered_atomic(path, header, payload);
  return digest;
}

LoadedStack load_stack(const std::string& path) {
  auto f = io::read_headered(path);
  if (f.header.value("kind", "") != "stack") {
    throw FormatError("not a stack file: " + path);
  }

  // hash before structure: a truncated or bit-flipped payload is corruption
  const std::string want = f.header.value("content_hash", "");
  const std::string got = hash_hex(io::payload_hash(
      std::span<const float>(f.payload.data(), f.payload.size())));
  if (want.empty() || want != got) {
    throw CorruptionError("stack payload hash mismatch in " + path);
  }

  LoadedStack out;
  out.domain = f.header.at("domain").get<std::string>();
  out.round = f.header.at("round").get<int>();
  out.config = moe_config_from(f.header.at("moe"));
  out.content_hash = got;

  int64_t expect = 0;
  for (const auto& js : f.header.at("sites")) {
    expect += delta_float_count(out.config, js.at("d_in").get<int64_t>(),
                                js.at("d_out").get<int64_t>());
  }
  if (int64_t(f.payload.size()) != expect) {
    throw FormatError("stack payload length " +
                      std::to_string(f.payload.size()) + " != declared " +
                      std::to_string(expect) + " in " + path);
  }

  size_t off = 0;
  auto take = [&](Tensor t) {
    const size_t n = size_t(t.numel());
    std::copy_n(f.payload.begin() + int64_t(off), n, t.data().begin());
    off += n;
  };
  Rng dummy(0);
  for (const auto& js : f.header.at("sites")) {
    const std::string site = js.at("site").get<std::string>();
    MoELoRADelta d = MoELoRADelta::init(out.config, js.at("d_in").get<int64_t>(),
                                        js.at("d_out").get<int64_t>(), dummy);
    take(d.a());
    take(d.b());
    if (out.config.n_experts > 1) {
      take(d.router_weight());
      take(d.noise_weight());
    }
    d.set_trainable(false);
    out.by_site.emplace(site, std::move(d));
  }
  return out;
}

void install_stack(BaseModel& model, const LoadedStack& stack) {
  // validate everything up front so a failure installs nothing
  for (const auto& info : model.injection_sites()) {
    auto it = stack.by_site.find(info.full_name);
    if (it == stack.by_site.end()) {
      throw FormatError("stack " + stack_key(stack.domain, stack.round) +
                        " is missing site " + info.full_name);
    }
    if (it->second.d_in() != info.d_in || it->second.d_out() != info.d_out) {
      throw ShapeError("stack " + stack_key(stack.domain, stack.round) +
                       " at " + info.full_name + " has dims " +
                       std::to_string(it->second.d_in()) + "x" +
                       std::to_string(it->second.d_out()));
    }
  }
  for (const auto& info : model.injection_sites()) {
    FrozenStack f;
    f.delta = stack.by_site.at(info.full_name);
    f.domain = stack.domain;
    f.round = stack.round;
    f.storage = FrozenStack::Storage::cold;
    model.site(info.layer, info.site).install_frozen(std::move(f));
  }
}

// ==== manifest ====

nlohmann::json Manifest::to_json() const {
  nlohmann::json jd = nlohmann::json::array();
  for (const auto& d : domains) {
    nlohmann::json js = nlohmann::json::array();
    for (const auto& s : d.stacks) {
      js.push_back({{"round", s.round},
                    {"file", s.file},
                    {"byte_size", s.byte_size},
                    {"content_hash", s.content_hash},
                    {"val_loss", s.val_loss},
                    {"wall_seconds", s.wall_seconds}});
    }
    jd.push_back({{"domain", d.domain},
                  {"stacks", js},
                  {"projector_file", d.projector_file}});
  }
  return {{"kind", "manifest"},
          {"format_version", format_version},
          {"base_file", base_file},
          {"base_hash", base_hash},
          {"domains", jd},
          {"router_file", router_file},
          {"metadata", metadata}};
}

Manifest Manifest::from_json(const nlohmann::json& j) {
  if (j.value("kind", "") != "manifest") {
    throw FormatError("not a manifest document");
  }
  Manifest m;
  m.format_version = j.value("format_version", 1);
  m.base_file = j.value("base_file", "");
  m.base_hash = j.value("base_hash", "");
  m.router_file = j.value("router_file", "");
  m.metadata = j.value("metadata", nlohmann::json::object());
  for (const auto& jd : j.value("domains", nlohmann::json::array())) {
    DomainBlock d;
    d.domain = jd.at("domain").get<std::string>();
    d.projector_file = jd.value("projector_file", "");
    for (const auto& js : jd.value("stacks", nlohmann::json::array())) {
      StackRecord s;
      s.round = js.at("round").get<int>();
      s.file = js.at("file").get<std::string>();
      s.byte_size = js.value("byte_size", int64_t(0));
      s.content_hash = js.value("content_hash", "");
      s.val_loss = js.value("val_loss", 0.0);
      s.wall_seconds = js.value("wall_seconds", 0.0);
      d.stacks.push_back(std::move(s));
    }
    m.domains.push_back(std::move(d));
  }
  return m;
}

void Manifest::save(const std::string& path) const {
  io::write_text_atomic(path, to_json().dump(2) + "\n");
}

Manifest Manifest::load(const std::string& path) {
  const std::string text = io::read_text(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("manifest " + path + ": " + e.what());
  }
  return from_json(j);
}

bool Manifest::has_domain(const std::string& domain) const {
  for (const auto& d : domains)
    if (d.domain == domain) return true;
  return false;
}

uint64_t Manifest::digest() const {
  nlohmann::json j = to_json();
  for (auto& jd : j["domains"])
    for (auto& js : jd["stacks"]) js.erase("wall_seconds");
  const std::string s = j.dump();
  return fnv1a(s.data(), s.size());
}

std::string resume(const Manifest& manifest, BaseModel& model,
                   const std::string& base_dir,
                   const std::vector<std::string>& planned) {
  if (manifest.base_hash != hash_hex(model.base_hash())) {
    throw IncompatibilityError(
        "manifest was built for base " + manifest.base_hash +
        " but the model hashes to " + hash_hex(model.base_hash()));
  }
  const auto already_installed = [&](const std::string& domain, int round) {
    if (model.n_sites() == 0) return false;
    for (const auto& f : model.site(size_t(0)).frozen()) {
      if (f.domain == domain && f.round == round) return true;
    }
    return false;
  };
  for (const auto& block : manifest.domains) {
    for (const auto& rec : block.stacks) {
      // a model that kept its stacks (in-process continuation) keeps them
      if (already_installed(block.domain, rec.round)) continue;
      const std::string path = (fs::path(base_dir) / rec.file).string();
      LoadedStack s;
      try {
        s = load_stack(path);
      } catch (const StorageError& e) {
        throw StorageError("resume: stack " + block.domain + ":" +
                           std::to_string(rec.round) + ": " + e.what());
      }
      if (!rec.content_hash.empty() && s.content_hash != rec.content_hash) {
        throw CorruptionError("resume: stack file " + rec.file +
                              " hash does not match the manifest");
      }
      if (s.domain != block.domain || s.round != rec.round) {
        throw FormatError("resume: stack file " + rec.file + " labeled " +
                          stack_key(s.domain, s.round) + ", manifest says " +
                          stack_key(block.domain, rec.round));
      }
      install_stack(model, s);
    }
  }
  for (const auto& d : planned) {
    if (!manifest.has_domain(d)) return d;
  }
  return "";
}

// ==== lazy loading ====

StackCache::StackCache(std::string base_dir, Manifest manifest, int capacity)
    : dir_(std::move(base_dir)), manifest_(std::move(manifest)),
      capacity_(capacity) {
  if (capacity_ < 1) throw ArgumentError("cache capacity must be >= 1");
}

StackCache::RequestReport StackCache::lazy_load(
    const std::map<std::string, float>& weights) {
  std::lock_guard<std::mutex> lock(mu_);
  RequestReport rep;
  ++requests_;
  for (const auto& block : manifest_.domains) {
    auto it = weights.find(block.domain);
    if (it == weights.end() || it->second <= 0.0f) continue;
    for (const auto& rec : block.stacks) {
      const std::string key = stack_key(block.domain, rec.round);
      LoadEvent ev;
      ev.domain = block.domain;
      ev.round = rec.round;
      auto res = resident_.find(key);
      if (res != resident_.end()) {
        ev.hit = true;
        ev.seconds = 0.0;
        res->second.last_used = ++clock_;
        ++hits_;
        ++rep.hits;
      } else {
        const auto t0 = std::chrono::steady_clock::now();
        LoadedStack s;
        try {
          s = load_stack((fs::path(dir_) / rec.file).string());
        } catch (const StorageError& e) {
          throw StorageError("lazy_load: stack " + key + ": " + e.what());
        }
        const auto t1 = std::chrono::steady_clock::now();
        ev.hit = false;
        ev.seconds = std::chrono::duration<double>(t1 - t0).count();
        load_seconds_.push_back(ev.seconds);
        resident_[key] = Entry{std::move(s), ++clock_};
        ++misses_;
        ++rep.misses;
        while (int64_t(resident_.size()) > capacity_) {
          auto victim = resident_.begin();
          for (auto e = resident_.begin(); e != resident_.end(); ++e)
            if (e->second.last_used < victim->second.last_used) victim = e;
          evictions_.push_back(victim->first);
          rep.evicted.push_back(victim->first);
          resident_.erase(victim);
        }
      }
      rep.events.push_back(std::move(ev));
    }
  }
  std::string row;
  for (const auto& k : resident_keys_unlocked()) {
    if (!row.empty()) row += ",";
    row += k;
  }
  timeline_.push_back(row);
  return rep;
}

std::vector<std::string> StackCache::resident_keys() const {
  std::lock_guard<std::mutex> lock(mu_);
  return resident_keys_unlocked();
}

// least-recently-used first
std::vector<std::string> StackCache::resident_keys_unlocked() const {
  std::vector<std::pair<int64_t, std::string>> order;
  for (const auto& [k, e] : resident_) order.emplace_back(e.last_used, k);
  std::sort(order.begin(), order.end());
  std::vector<std::string> out;
  for (auto& [t, k] : order) out.push_back(std::move(k));
  return out;
}

void StackCache::sync_model(BaseModel& model) const {
  std::lock_guard<std::mutex> lock(mu_);
  for (size_t i = 0; i < model.n_sites(); ++i)
    model.site(i).frozen_mut().clear();
  // manifest (training) order keeps installation deterministic
  for (const auto& block : manifest_.domains) {
    for (const auto& rec : block.stacks) {
      auto it = resident_.find(stack_key(block.domain, rec.round));
      if (it == resident_.end()) continue;
      install_stack(model, it->second.stack);
    }
  }
}

CacheReport cache_report(const StackCache& cache) {
  if (cache.requests() == 0) {
    throw StateError("cache_report: no requests served");
  }
  CacheReport r;
  r.hits = cache.hits();
  r.misses = cache.misses();
  r.requests = cache.requests();
  const int64_t total = r.hits + r.misses;
  r.hit_rate = total > 0 ? double(r.hits) / double(total) : 0.0;
  double s = 0.0;
  for (double x : cache.load_seconds()) s += x;
  r.mean_load_seconds =
      cache.load_seconds().empty() ? 0.0 : s / double(cache.load_seconds().size());
  r.timeline = cache.timeline();
  r.evictions = cache.eviction_log();
  return r;
}

}  // namespace moestack
