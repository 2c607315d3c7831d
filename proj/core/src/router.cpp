#include "moestack/router.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>

#include "moestack/graph.hpp"
#include "moestack/io.hpp"
#include "moestack/ops.hpp"
#include "moestack/optim.hpp"
#include "moestack/training.hpp"

namespace moestack {

namespace fs = std::filesystem;

// ==== configuration ====

void RouterConfig::validate() const {
  if (domains.empty()) throw ConfigError("router: domains list is empty");
  if (std::fabs(mid_blend + last_blend - 1.0f) > 1e-6f) {
    throw ConfigError("router: feature blend weights must sum to 1");
  }
  if (!(chat_floor > gate_threshold)) {
    throw ConfigError("router: chat_floor must exceed gate_threshold");
  }
  if (hidden_dim < 1 || seq_len < 1) {
    throw ConfigError("router: hidden_dim and seq_len must be positive");
  }
  if (epochs < 1 || batch_size < 1) {
    throw ConfigError("router: epochs and batch_size must be positive");
  }
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw ConfigError("router: val_fraction must lie in (0, 1)");
  }
  const auto known = [&](const std::string& d) {
    return std::find(domains.begin(), domains.end(), d) != domains.end();
  };
  if (!chat_domain.empty() && !known(chat_domain)) {
    throw ConfigError("router: chat domain '" + chat_domain +
                      "' is not in the domain list");
  }
  if (!soft_boost_domain.empty() && !known(soft_boost_domain)) {
    throw ConfigError("router: soft-boost domain '" + soft_boost_domain +
                      "' is not in the domain list");
  }
}

nlohmann::json RouterConfig::to_json() const {
  return {{"mid_blend", mid_blend},
          {"last_blend", last_blend},
          {"hidden_dim", hidden_dim},
          {"seq_len", seq_len},
          {"domains", domains},
          {"chat_domain", chat_domain},
          {"soft_boost_domain", soft_boost_domain},
          {"chat_floor", chat_floor},
          {"gate_threshold", gate_threshold},
          {"oracle_improve_threshold", oracle_improve_threshold},
          {"soft_boost_target", soft_boost_target},
          {"target_blend_discovered", target_blend_discovered},
          {"target_blend_label", target_blend_label},
          {"epochs", epochs},
          {"lr", lr},
          {"lr_min", lr_min},
          {"batch_size", batch_size},
          {"dropout", dropout},
          {"val_fraction", val_fraction},
          {"seed", seed},
          {"w_top1", w_top1},
          {"w_set_match", w_set_match},
          {"w_val_bce", w_val_bce},
          {"margin_coeff", margin_coeff},
          {"margin", margin}};
}

RouterConfig RouterConfig::from_json(const nlohmann::json& j) {
  RouterConfig c;
  c.mid_blend = j.value("mid_blend", c.mid_blend);
  c.last_blend = j.value("last_blend", c.last_blend);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.seq_len = j.value("seq_len", c.seq_len);
  c.domains = j.value("domains", c.domains);
  c.chat_domain = j.value("chat_domain", c.chat_domain);
  c.soft_boost_domain = j.value("soft_boost_domain", c.soft_boost_domain);
  c.chat_floor = j.value("chat_floor", c.chat_floor);
  c.gate_threshold = j.value("gate_threshold", c.gate_threshold);
  c.oracle_improve_threshold =
      j.value("oracle_improve_threshold", c.oracle_improve_threshold);
  c.soft_boost_target = j.value("soft_boost_target", c.soft_boost_target);
  c.target_blend_discovered =
      j.value("target_blend_discovered", c.target_blend_discovered);
  c.target_blend_label = j.value("target_blend_label", c.target_blend_label);
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.lr_min = j.value("lr_min", c.lr_min);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.dropout = j.value("dropout", c.dropout);
  c.val_fraction = j.value("val_fraction", c.val_fraction);
  c.seed = j.value("seed", c.seed);
  c.w_top1 = j.value("w_top1", c.w_top1);
  c.w_set_match = j.value("w_set_match", c.w_set_match);
  c.w_val_bce = j.value("w_val_bce", c.w_val_bce);
  c.margin_coeff = j.value("margin_coeff", c.margin_coeff);
  c.margin = j.value("margin", c.margin);
  return c;
}

double composite_score(double top1, double set_match, double val_bce,
                       const RouterConfig& cfg) {
  return cfg.w_top1 * top1 + cfg.w_set_match * set_match -
         cfg.w_val_bce * val_bce;
}

// ==== prompt encoding ====

Tensor encode_prompt(BaseModel& model, const std::vector<int>& tokens,
                     const RouterConfig& cfg) {
  if (tokens.empty()) throw ArgumentError("encode_prompt: empty prompt");
  const int64_t limit = std::min<int64_t>(
      cfg.seq_len, model.config().max_seq_len);
  std::vector<int> trunc(tokens.begin(),
                         tokens.begin() +
                             std::min<int64_t>(int64_t(tokens.size()), limit));

  // stacks are silenced for encoding; previous weights come back after
  const auto domains = model.frozen_domains();
  std::map<std::string, float> zeros;
  for (const auto& d : domains) zeros[d] = 0.0f;
  std::vector<std::map<std::string, float>> saved;
  if (!domains.empty()) {
    saved.reserve(model.n_sites());
    for (size_t i = 0; i < model.n_sites(); ++i) {
      saved.push_back(model.site(i).domain_weights());
    }
    model.set_domain_weights(zeros);
  }

  Tensor features;
  {
    NoGradGuard ng;
    ForwardResult out =
        model.forward(trunc, /*train_mode=*/false, nullptr,
                      /*capture_hidden=*/true);
    const int mid = model.config().n_layers / 2;
    const int last = model.config().n_layers;
    features = ops::add(ops::scale(out.hidden[size_t(mid)], cfg.mid_blend),
                        ops::scale(out.hidden[size_t(last)], cfg.last_blend));
  }
  for (size_t i = 0; i < saved.size(); ++i) {
    model.site(i).set_domain_weights(saved[i]);
  }
  return features;
}

// ==== outcome discovery ====

nlohmann::json OracleTarget::to_json() const {
  return {{"prompt_id", prompt_id},
          {"label", label},
          {"base_loss", base_loss},
          {"single_losses", single_losses},
          {"discovered", discovered},
          {"best_loss", best_loss},
          {"target", target},
          {"cached_at", cached_at}};
}

OracleTarget OracleTarget::from_json(const nlohmann::json& j) {
  OracleTarget t;
  t.prompt_id = j.at("prompt_id").get<uint64_t>();
  t.label = j.at("label").get<std::string>();
  t.base_loss = j.at("base_loss").get<double>();
  t.single_losses =
      j.at("single_losses").get<std::map<std::string, double>>();
  t.discovered = j.at("discovered").get<std::vector<std::string>>();
  t.best_loss = j.at("best_loss").get<double>();
  t.target = j.at("target").get<std::vector<float>>();
  t.cached_at = j.value("cached_at", int64_t(0));
  return t;
}

OracleCache::OracleCache(std::string dir,
                         const std::vector<std::string>& domains)
    : dir_(std::move(dir)) {
  std::vector<std::string> sorted = domains;
  std::sort(sorted.begin(), sorted.end());
  std::string joined;
  for (const auto& d : sorted) joined += d + ";";
  set_key_ = fnv1a(joined);
  fs::create_directories(dir_);
}

std::string OracleCache::file_for(const std::string& label) const {
  return dir_ + "/oracle_" + label + "_" + hash_hex(set_key_) + ".jsonl";
}

void OracleCache::ensure_loaded(const std::string& label) {
  if (loaded_.count(label)) return;
  loaded_.insert(label);
  std::ifstream in(file_for(label));
  if (!in) return;  // nothing cached yet
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      OracleTarget t = OracleTarget::from_json(nlohmann::json::parse(line));
      by_label_[label][t.prompt_id] = std::move(t);
    } catch (const std::exception& e) {
      ++dropped_;
      std::cerr << "warning: dropping unreadable oracle cache line in "
                << file_for(label) << ": " << e.what() << "\n";
    }
  }
}

std::optional<OracleTarget> OracleCache::lookup(const std::string& label,
                                                uint64_t prompt_id) {
  ensure_loaded(label);
  auto lit = by_label_.find(label);
  if (lit == by_label_.end()) return std::nullopt;
  auto it = lit->second.find(prompt_id);
  if (it == lit->second.end()) return std::nullopt;
  return it->second;
}

void OracleCache::store(const std::string& label, const OracleTarget& t) {
  ensure_loaded(label);
  by_label_[label][t.prompt_id] = t;
  std::ofstream out(file_for(label), std::ios::app);
  if (!out) throw StorageError("cannot append to " + file_for(label));
  out << t.to_json().dump() << "\n";
}

namespace {

double combo_loss(BaseModel& model, const Sample& sample,
                  const std::vector<std::string>& combo) {
  std::map<std::string, float> w;
  for (const auto& d : combo) w[d] = 1.0f;
  return evaluate(model, {sample}, Gating::routed(w));
}

}  // namespace

OracleTarget oracle_discover(BaseModel& model, const Sample& sample,
                             const RouterConfig& cfg, OracleCache* cache) {
  cfg.validate();
  const auto frozen = model.frozen_domains();
  for (const auto& d : cfg.domains) {
    if (!frozen.count(d)) {
      throw StateError("oracle: no frozen stack for domain '" + d + "'");
    }
  }
  if (cache) {
    if (auto hit = cache->lookup(sample.domain, sample.id)) return *hit;
  }

  OracleTarget t;
  t.prompt_id = sample.id;
  t.label = sample.domain;
  t.base_loss = combo_loss(model, sample, {});
  for (const auto& d : cfg.domains) {
    t.single_losses[d] = combo_loss(model, sample, {d});
  }

  // greedy: every iteration retests all remaining domains against the
  // current set and keeps the biggest reduction, if it clears the threshold
  std::vector<std::string> chosen;
  double current = t.base_loss;
  while (chosen.size() < cfg.domains.size()) {
    std::string best_d;
    double best_loss = current;
    for (const auto& d : cfg.domains) {
      if (std::find(chosen.begin(), chosen.end(), d) != chosen.end()) continue;
      std::vector<std::string> trial = chosen;
      trial.push_back(d);
      const double l = chosen.empty() && trial.size() == 1
                           ? t.single_losses[d]
                           : combo_loss(model, sample, trial);
      if (l < best_loss) {
        best_loss = l;
        best_d = d;
      }
    }
    if (best_d.empty() || current - best_loss <= cfg.oracle_improve_threshold) {
      break;
    }
    chosen.push_back(best_d);
    current = best_loss;
  }
  std::sort(chosen.begin(), chosen.end());
  t.discovered = chosen;
  t.best_loss = current;

  // discovered component of the target, with the reasoning-analog boost
  std::map<std::string, float> disc;
  for (const auto& d : cfg.domains) disc[d] = 0.0f;
  for (const auto& d : chosen) disc[d] = 1.0f;
  if (!cfg.soft_boost_domain.empty() &&
      std::find(chosen.begin(), chosen.end(), cfg.soft_boost_domain) ==
          chosen.end()) {
    std::vector<std::string> trial = chosen;
    trial.push_back(cfg.soft_boost_domain);
    if (combo_loss(model, sample, trial) < current) {
      disc[cfg.soft_boost_domain] = cfg.soft_boost_target;
    }
  }
  t.target.resize(cfg.domains.size());
  for (size_t i = 0; i < cfg.domains.size(); ++i) {
    const float label_hot = cfg.domains[i] == sample.domain ? 1.0f : 0.0f;
    t.target[i] = cfg.target_blend_discovered * disc[cfg.domains[i]] +
                  cfg.target_blend_label * label_hot;
  }
  t.cached_at = int64_t(std::time(nullptr));
  if (cache) cache->store(sample.domain, t);
  return t;
}

std::pair<std::vector<std::string>, double> exhaustive_best_combo(
    BaseModel& model, const Sample& sample,
    const std::vector<std::string>& domains) {
  if (domains.size() > 16) {
    throw ArgumentError("exhaustive search over " +
                        std::to_string(domains.size()) + " domains");
  }
  std::vector<std::string> best_set;
  double best = combo_loss(model, sample, {});
  for (uint32_t mask = 1; mask < (1u << domains.size()); ++mask) {
    std::vector<std::string> combo;
    for (size_t i = 0; i < domains.size(); ++i) {
      if (mask & (1u << i)) combo.push_back(domains[i]);
    }
    const double l = combo_loss(model, sample, combo);
    if (l < best || (l == best && combo.size() < best_set.size())) {
      best = l;
      best_set = combo;
    }
  }
  std::sort(best_set.begin(), best_set.end());
  return {best_set, best};
}

// ==== router network ====

RouterNet RouterNet::init(const RouterConfig& cfg, int d_model, Rng& rng) {
  cfg.validate();
  if (d_model < 1) throw ArgumentError("router: d_model must be positive");
  RouterNet net;
  net.cfg_ = cfg;
  net.d_model_ = d_model;
  const int64_t h = cfg.hidden_dim;
  const int64_t n = int64_t(cfg.domains.size());
  const float pw = std::sqrt(6.0f / float(d_model));
  const float qw = std::sqrt(6.0f / float(h));
  net.proj_w_ = Tensor::uniform({d_model, h}, -pw, pw, rng, true);
  net.proj_b_ = Tensor::zeros({h}, true);
  net.global_q_ = Tensor::uniform({1, h}, -qw, qw, rng, true);
  net.domain_q_ = Tensor::uniform({n, h}, -qw, qw, rng, true);
  net.fuse_g_ = Tensor::uniform({h, h}, -qw, qw, rng, true);
  net.fuse_d_ = Tensor::uniform({h, h}, -qw, qw, rng, true);
  net.fuse_b_ = Tensor::zeros({h}, true);
  net.head_w_ = Tensor::zeros({n, h}, true);  // neutral start: every p = 0.5
  net.head_b_ = Tensor::zeros({n}, true);
  net.log_inv_temp_ = Tensor::zeros({n}, true);
  return net;
}

Tensor RouterNet::forward_logits(const Tensor& features, bool train_mode,
                                 Rng* rng) const {
  if (!features.defined() || features.shape().size() != 2 ||
      features.shape()[1] != d_model_ || features.shape()[0] < 1) {
    throw ShapeError("router: features must be [tokens, " +
                     std::to_string(d_model_) + "]");
  }
  if (train_mode && rng == nullptr) {
    throw ArgumentError("router: training forward needs an rng");
  }
  const float inv_sqrt = 1.0f / std::sqrt(float(cfg_.hidden_dim));

  Tensor xh = ops::add_rowwise(ops::matmul(features, proj_w_), proj_b_);

  // one global summary vector via learned-query attention pooling
  Tensor sg = ops::scale(ops::matmul(xh, ops::transpose(global_q_)), inv_sqrt);
  Tensor ag = ops::softmax(ops::transpose(sg));  // [1, t]
  Tensor g = ops::matmul(ag, xh);                // [1, hidden]

  // per-domain context via cross-attention with learned queries
  Tensor sd = ops::scale(ops::matmul(xh, ops::transpose(domain_q_)), inv_sqrt);
  Tensor ad = ops::softmax(ops::transpose(sd));  // [n, t], one row per domain
  Tensor ctx = ops::matmul(ad, xh);              // [n, hidden]

  Tensor gb = ops::reshape(ops::matmul(g, fuse_g_), {cfg_.hidden_dim});
  Tensor fused = ops::gelu(ops::add_rowwise(
      ops::add_rowwise(ops::matmul(ctx, fuse_d_), gb), fuse_b_));
  if (train_mode && cfg_.dropout > 0.0f) {
    fused = ops::dropout(fused, cfg_.dropout, *rng);
  }

  // row-wise dot with the per-domain heads: [n, hidden] -> [n]
  Tensor rowsum = ops::scale(ops::mean_rows(ops::transpose(
                                 ops::mul(fused, head_w_))),
                             float(cfg_.hidden_dim));
  Tensor logits = ops::add(rowsum, head_b_);
  return ops::mul(logits, ops::exp(log_inv_temp_));
}

Tensor RouterNet::forward(const Tensor& features, bool train_mode,
                          Rng* rng) const {
  return ops::sigmoid(forward_logits(features, train_mode, rng));
}

std::vector<std::pair<std::string, Tensor>> RouterNet::params() const {
  return {{"proj.w", proj_w_},     {"proj.b", proj_b_},
          {"attn.global_q", global_q_}, {"attn.domain_q", domain_q_},
          {"fuse.g", fuse_g_},     {"fuse.d", fuse_d_},
          {"fuse.b", fuse_b_},     {"head.w", head_w_},
          {"head.b", head_b_},     {"temp.log_inv", log_inv_temp_}};
}

int64_t RouterNet::param_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : params()) {
    (void)name;
    n += t.numel();
  }
  return n;
}

uint64_t RouterNet::content_hash() const {
  uint64_t h = fnv1a(cfg_.to_json().dump());
  for (const auto& [name, t] : params()) {
    h ^= fnv1a(name) * 0x100000001B3ULL;
    h ^= io::payload_hash(std::span<const float>(t.ptr(), size_t(t.numel())));
  }
  return h;
}

RouterNet RouterNet::clone() const {
  RouterNet out = *this;
  auto copy = [](const Tensor& t) {
    return Tensor::from_data(t.shape(), {t.ptr(), t.ptr() + t.numel()},
                             t.requires_grad());
  };
  out.proj_w_ = copy(proj_w_);
  out.proj_b_ = copy(proj_b_);
  out.global_q_ = copy(global_q_);
  out.domain_q_ = copy(domain_q_);
  out.fuse_g_ = copy(fuse_g_);
  out.fuse_d_ = copy(fuse_d_);
  out.fuse_b_ = copy(fuse_b_);
  out.head_w_ = copy(head_w_);
  out.head_b_ = copy(head_b_);
  out.log_inv_temp_ = copy(log_inv_temp_);
  return out;
}

void save_router(const std::string& path, const RouterNet& net) {
  auto params = net.params();
  std::vector<float> payload;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, t] : params) {
    tensors.push_back({{"name", name}, {"shape", t.shape()}});
    payload.insert(payload.end(), t.ptr(), t.ptr() + t.numel());
  }
  nlohmann::json header = {
      {"kind", "router"},
      {"format_version", 1},
      {"d_model", net.d_model()},
      {"config", net.config().to_json()},
      {"tensors", tensors},
      {"content_hash",
       hash_hex(io::payload_hash(
           std::span<const float>(payload.data(), payload.size())))},
  };
  io::write_headered_atomic(path, header, payload);
}

RouterNet load_router(const std::string& path) {
  auto f = io::read_headered(path);
  if (f.header.value("kind", "") != "router") {
    throw FormatError("not a router checkpoint: " + path);
  }
  RouterConfig cfg = RouterConfig::from_json(f.header.at("config"));
  const int d_model = f.header.at("d_model").get<int>();

  int64_t expect = 0;
  for (const auto& jt : f.header.at("tensors")) {
    expect += shape_numel(jt.at("shape").get<Shape>());
  }
  if (expect != int64_t(f.payload.size())) {
    throw FormatError("router payload length mismatch in " + path);
  }
  const std::string want = f.header.value("content_hash", "");
  const std::string got = hash_hex(io::payload_hash(
      std::span<const float>(f.payload.data(), f.payload.size())));
  if (want.empty() || want != got) {
    throw CorruptionError("router checkpoint hash mismatch in " + path);
  }

  Rng dummy(0);
  RouterNet net = RouterNet::init(cfg, d_model, dummy);
  auto params = net.params();
  size_t off = 0;
  for (size_t i = 0; i < params.size(); ++i) {
    const Shape shape = f.header.at("tensors")[i].at("shape").get<Shape>();
    Tensor& t = params[i].second;
    if (shape != t.shape()) {
      throw FormatError("router tensor " + params[i].first +
                        " has unexpected shape in " + path);
    }
    std::memcpy(t.ptr(), f.payload.data() + off,
                sizeof(float) * size_t(t.numel()));
    off += size_t(t.numel());
  }
  return net;
}

// ==== training ====

std::vector<RouterSample> build_router_samples(
    BaseModel& model, const std::vector<Sample>& data,
    const std::vector<OracleTarget>& oracles, const RouterConfig& cfg) {
  std::map<uint64_t, const OracleTarget*> by_id;
  for (const auto& t : oracles) by_id[t.prompt_id] = &t;
  std::vector<RouterSample> out;
  out.reserve(data.size());
  for (const auto& s : data) {
    auto it = by_id.find(s.id);
    if (it == by_id.end()) {
      throw ArgumentError("no oracle target for prompt '" + s.prompt + "'");
    }
    RouterSample rs;
    rs.prompt_id = s.id;
    rs.prompt = s.prompt;
    rs.label = s.domain;
    rs.features = encode_prompt(model, encode_bytes(s.prompt), cfg);
    rs.target = it->second->target;
    rs.discovered = it->second->discovered;
    out.push_back(std::move(rs));
  }
  return out;
}

std::pair<std::vector<RouterSample>, std::vector<RouterSample>>
split_router_samples(const std::vector<RouterSample>& samples,
                     double val_fraction, uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw ArgumentError("val_fraction must lie in (0, 1)");
  }
  std::vector<std::string> prompts;
  std::set<std::string> seen;
  for (const auto& s : samples) {
    if (seen.insert(s.prompt).second) prompts.push_back(s.prompt);
  }
  Rng rng(seed);
  for (size_t i = prompts.size(); i > 1; --i) {
    std::swap(prompts[i - 1], prompts[rng.below(i)]);
  }
  size_t n_val = size_t(std::llround(val_fraction * double(prompts.size())));
  n_val = std::clamp<size_t>(n_val, prompts.size() > 1 ? 1 : 0,
                             prompts.size() > 1 ? prompts.size() - 1
                                                : prompts.size());
  std::set<std::string> val_prompts(prompts.begin(),
                                    prompts.begin() + int64_t(n_val));
  std::pair<std::vector<RouterSample>, std::vector<RouterSample>> out;
  for (const auto& s : samples) {
    (val_prompts.count(s.prompt) ? out.second : out.first).push_back(s);
  }
  verify_no_leakage(out.first, out.second);
  return out;
}

void verify_no_leakage(const std::vector<RouterSample>& train,
                       const std::vector<RouterSample>& val) {
  std::set<std::string> train_prompts;
  for (const auto& s : train) train_prompts.insert(s.prompt);
  for (const auto& s : val) {
    if (train_prompts.count(s.prompt)) {
      throw LeakageError("prompt in both router splits: '" + s.prompt + "'");
    }
  }
}

namespace {

std::vector<std::vector<float>> snapshot_net(
    std::vector<std::pair<std::string, Tensor>>& params) {
  std::vector<std::vector<float>> out;
  for (auto& [name, t] : params) {
    (void)name;
    out.emplace_back(t.ptr(), t.ptr() + t.numel());
  }
  return out;
}

void restore_net(std::vector<std::pair<std::string, Tensor>>& params,
                 const std::vector<std::vector<float>>& snap) {
  for (size_t i = 0; i < params.size(); ++i) {
    std::memcpy(params[i].second.ptr(), snap[i].data(),
                sizeof(float) * snap[i].size());
  }
}

double bce_of(const std::vector<float>& probs,
              const std::vector<float>& target) {
  double acc = 0.0;
  for (size_t i = 0; i < probs.size(); ++i) {
    const double p = std::clamp(double(probs[i]), 1e-7, 1.0 - 1e-7);
    acc -= double(target[i]) * std::log(p) +
           (1.0 - double(target[i])) * std::log1p(-p);
  }
  return acc / double(probs.size());
}

std::vector<float> eval_probs(const RouterNet& net, const RouterSample& s) {
  NoGradGuard ng;
  Tensor p = net.forward(s.features, false, nullptr);
  return {p.ptr(), p.ptr() + p.numel()};
}

std::set<std::string> thresholded_set(const std::vector<float>& probs,
                                      const RouterConfig& cfg) {
  std::set<std::string> out;
  for (size_t i = 0; i < cfg.domains.size(); ++i) {
    if (probs[i] >= cfg.gate_threshold) out.insert(cfg.domains[i]);
  }
  return out;
}

struct EpochEval {
  double top1 = 0.0;
  double set_match = 1.0;  // vacuously perfect when no mixed samples exist
  double val_bce = 0.0;
};

EpochEval eval_router(const RouterNet& net,
                      const std::vector<RouterSample>& val,
                      const RouterConfig& cfg) {
  EpochEval e;
  int64_t singles = 0, singles_right = 0, mixed = 0, mixed_right = 0;
  double bce_acc = 0.0;
  for (const auto& s : val) {
    const auto probs = eval_probs(net, s);
    bce_acc += bce_of(probs, s.target);
    if (s.mixed()) {
      ++mixed;
      const std::set<std::string> want(s.discovered.begin(),
                                       s.discovered.end());
      if (thresholded_set(probs, cfg) == want) ++mixed_right;
    } else {
      ++singles;
      const size_t arg =
          size_t(std::max_element(probs.begin(), probs.end()) - probs.begin());
      if (cfg.domains[arg] == s.label) ++singles_right;
    }
  }
  e.val_bce = bce_acc / double(val.size());
  if (singles > 0) e.top1 = double(singles_right) / double(singles);
  if (mixed > 0) e.set_match = double(mixed_right) / double(mixed);
  return e;
}

}  // namespace

RouterMetrics train_router(RouterNet& net,
                           const std::vector<RouterSample>& samples,
                           const RouterConfig& cfg) {
  cfg.validate();
  std::map<std::string, std::set<std::string>> prompts_per_label;
  for (const auto& s : samples) prompts_per_label[s.label].insert(s.prompt);
  for (const auto& d : cfg.domains) {
    if (prompts_per_label[d].size() < 2) {
      throw ArgumentError("router training needs at least 2 distinct " +
                          std::string("prompts for domain '") + d + "'");
    }
  }

  auto [train, val] = split_router_samples(samples, cfg.val_fraction, cfg.seed);
  verify_no_leakage(train, val);
  if (train.empty() || val.empty()) {
    throw ArgumentError("router split produced an empty side");
  }

  auto params = net.params();
  AdamWConfig ocfg;
  ocfg.lr = cfg.lr;
  AdamW opt(params, ocfg);
  Rng order_rng(cfg.seed ^ 0x5EEDFACEULL);
  Rng drop_rng(cfg.seed ^ 0xD80F0F7ULL);

  const int64_t n = int64_t(cfg.domains.size());
  const int batches_per_epoch =
      int((train.size() + cfg.batch_size - 1) / size_t(cfg.batch_size));
  const int total_steps = cfg.epochs * batches_per_epoch;
  const Tensor half = Tensor::full({n}, 0.5f);
  const Tensor margin = Tensor::full({n}, cfg.margin);

  RouterMetrics best;
  best.train_samples = int64_t(train.size());
  best.val_samples = int64_t(val.size());
  std::vector<std::vector<float>> best_snap = snapshot_net(params);
  double best_composite = -std::numeric_limits<double>::infinity();

  std::vector<size_t> order(train.size());
  std::iota(order.begin(), order.end(), size_t(0));
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[order_rng.below(i)]);
    }
    for (size_t at = 0; at < order.size(); at += size_t(cfg.batch_size)) {
      const size_t stop = std::min(order.size(), at + size_t(cfg.batch_size));
      opt.set_lr(cosine_lr(step, total_steps, cfg.lr, cfg.lr_min));
      opt.zero_grad();
      for (size_t i = at; i < stop; ++i) {
        const RouterSample& s = train[order[i]];
        Tensor z = net.forward_logits(s.features, true, &drop_rng);
        Tensor tgt = Tensor::from_data({n}, std::vector<float>(
                                                s.target.begin(),
                                                s.target.end()));
        Tensor loss =
            ops::scale(ops::sum(ops::bce_with_logits(z, tgt)), 1.0f / float(n));
        if (cfg.margin_coeff > 0.0f) {
          Tensor p = ops::sigmoid(z);
          Tensor hinge =
              ops::relu(ops::sub(margin, ops::abs(ops::sub(p, half))));
          loss = ops::add(loss, ops::scale(ops::sum(hinge),
                                           cfg.margin_coeff / float(n)));
        }
        backward(ops::scale(loss, 1.0f / float(stop - at)));
      }
      opt.step();
      ++step;
    }

    const EpochEval e = eval_router(net, val, cfg);
    const double comp = composite_score(e.top1, e.set_match, e.val_bce, cfg);
    best.epoch_composites.push_back(comp);
    if (comp > best_composite) {
      best_composite = comp;
      best.top1 = e.top1;
      best.set_match = e.set_match;
      best.val_bce = e.val_bce;
      best.composite = comp;
      best.best_epoch = epoch;
      best_snap = snapshot_net(params);
    }
  }
  restore_net(params, best_snap);
  return best;
}

// ==== inference ====

std::map<std::string, float> apply_gate_policy(const std::vector<float>& probs,
                                               const RouterConfig& cfg) {
  if (probs.size() != cfg.domains.size()) {
    throw ArgumentError("gate policy: got " + std::to_string(probs.size()) +
                        " probabilities for " +
                        std::to_string(cfg.domains.size()) + " domains");
  }
  std::map<std::string, float> w;
  for (size_t i = 0; i < cfg.domains.size(); ++i) w[cfg.domains[i]] = probs[i];
  if (!cfg.chat_domain.empty()) {
    float& c = w[cfg.chat_domain];
    c = std::max(c, cfg.chat_floor);
  }
  for (auto& [d, v] : w) {
    if (v < cfg.gate_threshold) v = 0.0f;  // stack never gets loaded
  }
  return w;
}

std::map<std::string, float> route(const RouterNet& net, BaseModel& model,
                                   const std::string& prompt,
                                   const RouterConfig& cfg) {
  Tensor f = encode_prompt(model, encode_bytes(prompt), cfg);
  NoGradGuard ng;
  Tensor p = net.forward(f, false, nullptr);
  return apply_gate_policy({p.ptr(), p.ptr() + p.numel()}, cfg);
}

nlohmann::json RoutingStats::to_json() const {
  return {{"kind", "routing_stats"},
          {"single_top1", single_top1},
          {"mixed_set_match", mixed_set_match},
          {"activation_rate", activation_rate},
          {"cross_domain_rate", cross_domain_rate},
          {"n_single", n_single},
          {"n_mixed", n_mixed}};
}

RoutingStats routing_stats(const RouterNet& net,
                           const std::vector<RouterSample>& eval_set,
                           const RouterConfig& cfg) {
  if (eval_set.empty()) throw ArgumentError("routing_stats: empty eval set");
  RoutingStats st;
  std::map<std::string, int64_t> active;
  int64_t multi = 0, singles_right = 0, mixed_right = 0;
  for (const auto& s : eval_set) {
    const auto probs = eval_probs(net, s);
    const auto on = thresholded_set(probs, cfg);
    for (const auto& d : on) ++active[d];
    if (on.size() >= 2) ++multi;
    if (s.mixed()) {
      ++st.n_mixed;
      if (on == std::set<std::string>(s.discovered.begin(),
                                      s.discovered.end())) {
        ++mixed_right;
      }
    } else {
      ++st.n_single;
      const size_t arg =
          size_t(std::max_element(probs.begin(), probs.end()) - probs.begin());
      if (cfg.domains[arg] == s.label) ++singles_right;
    }
  }
  if (st.n_single > 0) st.single_top1 = double(singles_right) / double(st.n_single);
  st.mixed_set_match =
      st.n_mixed > 0 ? double(mixed_right) / double(st.n_mixed) : 1.0;
  for (const auto& d : cfg.domains) {
    st.activation_rate[d] = double(active[d]) / double(eval_set.size());
  }
  st.cross_domain_rate = double(multi) / double(eval_set.size());
  return st;
}

}  // namespace moestack
