#include "moestack/model.hpp"

#include <numeric>

#include "moestack/io.hpp"
#include "moestack/optim.hpp"

namespace moestack {

void ModelConfig::validate() const {
  if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 ||
      vocab_size < 2 || max_seq_len < 2) {
    throw ConfigError("model config has non-positive dimension");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  }
}

BaseModel BaseModel::init(const ModelConfig& cfg) {
  cfg.validate();
  BaseModel m;
  m.cfg_ = cfg;
  Rng rng(cfg.seed);
  const float std0 = 0.02f;
  m.tok_embed_ = Tensor::randn({cfg.vocab_size, cfg.d_model}, std0, rng, true);
  m.pos_embed_ = Tensor::randn({cfg.max_seq_len, cfg.d_model}, std0, rng, true);
  m.ln1_.resize(static_cast<size_t>(cfg.n_layers));
  m.ln2_.resize(static_cast<size_t>(cfg.n_layers));
  m.sites_.reserve(static_cast<size_t>(cfg.n_layers) * kSiteNames.size());
  for (int l = 0; l < cfg.n_layers; ++l) {
    m.ln1_[static_cast<size_t>(l)] = {Tensor::ones({cfg.d_model}, true),
                                      Tensor::zeros({cfg.d_model}, true)};
    m.ln2_[static_cast<size_t>(l)] = {Tensor::ones({cfg.d_model}, true),
                                      Tensor::zeros({cfg.d_model}, true)};
    for (const char* name : kSiteNames) {
      const std::string sname = name;
      int64_t d_in = cfg.d_model, d_out = cfg.d_model;
      if (sname == "gate_proj" || sname == "up_proj") d_out = cfg.d_ff;
      if (sname == "down_proj") d_in = cfg.d_ff;
      Tensor w = Tensor::randn({d_in, d_out}, std0, rng, true);
      m.sites_.emplace_back("L" + std::to_string(l) + "." + sname, w);
    }
  }
  m.final_ln_ = {Tensor::ones({cfg.d_model}, true),
                 Tensor::zeros({cfg.d_model}, true)};
  m.head_ = Tensor::randn({cfg.d_model, cfg.vocab_size}, std0, rng, true);
  return m;
}

size_t BaseModel::site_index(int layer, const std::string& name) const {
  if (layer < 0 || layer >= cfg_.n_layers) {
    throw ArgumentError("layer " + std::to_string(layer) + " out of range");
  }
  for (size_t i = 0; i < kSiteNames.size(); ++i) {
    if (name == kSiteNames[i]) {
      return static_cast<size_t>(layer) * kSiteNames.size() + i;
    }
  }
  throw ArgumentError("unknown injection site '" + name + "'");
}

StackedLayer& BaseModel::site(int layer, const std::string& name) {
  return sites_[site_index(layer, name)];
}

const StackedLayer& BaseModel::site(int layer, const std::string& name) const {
  return sites_[site_index(layer, name)];
}

std::vector<SiteInfo> BaseModel::injection_sites() const {
  std::vector<SiteInfo> out;
  out.reserve(sites_.size());
  for (int l = 0; l < cfg_.n_layers; ++l) {
    for (size_t i = 0; i < kSiteNames.size(); ++i) {
      const auto& sl = sites_[static_cast<size_t>(l) * kSiteNames.size() + i];
      out.push_back({l, kSiteNames[i], sl.d_in(), sl.d_out(), sl.name()});
    }
  }
  return out;
}

ForwardResult BaseModel::forward(const std::vector<int>& tokens,
                                 bool train_mode, Rng* rng,
                                 bool capture_hidden,
                                 ForwardRecords* records) const {
  if (tokens.empty()) throw ArgumentError("forward: empty token sequence");
  for (int id : tokens) {
    if (id < 0 || id >= cfg_.vocab_size) {
      throw ArgumentError("forward: token id " + std::to_string(id) +
                          " out of range for vocab " +
                          std::to_string(cfg_.vocab_size));
    }
  }
  ForwardResult res;
  std::vector<int> ids = tokens;
  if (static_cast<int>(ids.size()) > cfg_.max_seq_len) {
    ids.resize(static_cast<size_t>(cfg_.max_seq_len));
    res.truncated = true;
  }
  const int64_t t = static_cast<int64_t>(ids.size());

  if (records) records->sites.resize(sites_.size());
  auto run_site = [&](int layer, int which, const Tensor& in) {
    const size_t idx = static_cast<size_t>(layer) * kSiteNames.size() +
                       static_cast<size_t>(which);
    LayerRecords* lr = records ? &records->sites[idx] : nullptr;
    return sites_[idx].forward(in, train_mode, rng, lr);
  };

  std::vector<int> pos(static_cast<size_t>(t));
  std::iota(pos.begin(), pos.end(), 0);
  Tensor x = ops::add(ops::embedding(tok_embed_, ids),
                      ops::embedding(pos_embed_, pos));
  if (capture_hidden) res.hidden.push_back(x);

  for (int l = 0; l < cfg_.n_layers; ++l) {
    const auto& n1 = ln1_[static_cast<size_t>(l)];
    Tensor h = ops::layer_norm(x, n1.gamma, n1.beta);
    Tensor q = run_site(l, 0, h);
    Tensor k = run_site(l, 1, h);
    Tensor v = run_site(l, 2, h);
    Tensor att = ops::multihead_causal_attention(q, k, v, cfg_.n_heads);
    x = ops::add(x, run_site(l, 3, att));

    const auto& n2 = ln2_[static_cast<size_t>(l)];
    Tensor h2 = ops::layer_norm(x, n2.gamma, n2.beta);
    Tensor gate = run_site(l, 4, h2);
    Tensor up = run_site(l, 5, h2);
    Tensor mlp = ops::mul(ops::gelu(gate), up);
    x = ops::add(x, run_site(l, 6, mlp));
    if (capture_hidden) res.hidden.push_back(x);
  }

  Tensor fin = ops::layer_norm(x, final_ln_.gamma, final_ln_.beta);
  res.logits = ops::matmul(fin, head_);
  return res;
}

// ---- stack management ----

void BaseModel::add_active_stacks(const MoEConfig& cfg, Rng& rng) {
  for (auto& s : sites_) {
    if (s.has_active()) {
      throw StateError("add_active_stacks: site " + s.name() +
                       " already has an active stack");
    }
  }
  uint64_t stream = 0;
  for (auto& s : sites_) {
    Rng site_rng = rng.fork(stream++);
    s.add_active_stack(cfg, site_rng);
  }
}

void BaseModel::freeze_active_stacks(const std::string& domain, int round) {
  for (auto& s : sites_) s.freeze_active(domain, round);
}

void BaseModel::drop_active_stacks() {
  for (auto& s : sites_) s.drop_active();
}

bool BaseModel::has_active() const {
  for (const auto& s : sites_) {
    if (s.has_active()) return true;
  }
  return false;
}

int64_t BaseModel::active_param_count() const {
  int64_t n = 0;
  for (const auto& s : sites_) {
    if (s.has_active()) n += s.active().param_count();
  }
  return n;
}

std::vector<std::pair<std::string, Tensor>> BaseModel::active_params() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& s : sites_) {
    if (!s.has_active()) continue;
    auto ps = s.active().named_params(s.name());
    out.insert(out.end(), ps.begin(), ps.end());
  }
  return out;
}

std::vector<std::string> BaseModel::set_domain_weights(
    const std::map<std::string, float>& weights) {
  const auto known = frozen_domains();
  std::vector<std::string> unknown;
  for (const auto& [d, w] : weights) {
    (void)w;
    if (!known.count(d)) unknown.push_back(d);
  }
  for (auto& s : sites_) s.set_domain_weights(weights);
  return unknown;
}

std::set<std::string> BaseModel::frozen_domains() const {
  std::set<std::string> out;
  for (const auto& s : sites_) {
    for (const auto& fs : s.frozen()) out.insert(fs.domain);
  }
  return out;
}

// ---- base parameters ----

std::vector<std::pair<std::string, Tensor>> BaseModel::canonical_base() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("tok_embed", tok_embed_);
  out.emplace_back("pos_embed", pos_embed_);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string pre = "L" + std::to_string(l) + ".";
    out.emplace_back(pre + "ln1.gamma", ln1_[static_cast<size_t>(l)].gamma);
    out.emplace_back(pre + "ln1.beta", ln1_[static_cast<size_t>(l)].beta);
    for (size_t i = 0; i < kSiteNames.size(); ++i) {
      out.emplace_back(
          pre + kSiteNames[i] + ".weight",
          sites_[static_cast<size_t>(l) * kSiteNames.size() + i].base_weight());
    }
    out.emplace_back(pre + "ln2.gamma", ln2_[static_cast<size_t>(l)].gamma);
    out.emplace_back(pre + "ln2.beta", ln2_[static_cast<size_t>(l)].beta);
  }
  out.emplace_back("final_ln.gamma", final_ln_.gamma);
  out.emplace_back("final_ln.beta", final_ln_.beta);
  out.emplace_back("head", head_);
  return out;
}

std::vector<std::pair<std::string, Tensor>> BaseModel::base_params() const {
  return canonical_base();
}

void BaseModel::freeze_base() {
  for (auto& [name, t] : canonical_base()) {
    (void)name;
    t.set_requires_grad(false);
  }
  frozen_ = true;
}

uint64_t BaseModel::base_hash() const {
  uint64_t h = kFnvOffset;
  for (const auto& [name, t] : canonical_base()) {
    h = fnv1a(name.data(), name.size(), h);
    h = fnv1a(t.ptr(), static_cast<size_t>(t.numel()) * sizeof(float), h);
  }
  return h;
}

// ---- persistence ----

void BaseModel::save_base(const std::string& path) const {
  nlohmann::json header;
  header["kind"] = "base_model";
  header["format_version"] = 1;
  header["config"] = {{"n_layers", cfg_.n_layers},   {"d_model", cfg_.d_model},
                      {"n_heads", cfg_.n_heads},     {"d_ff", cfg_.d_ff},
                      {"vocab_size", cfg_.vocab_size},
                      {"max_seq_len", cfg_.max_seq_len},
                      {"seed", cfg_.seed}};
  header["endianness"] = "little";
  header["dtype"] = "f32";
  std::vector<float> payload;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, t] : canonical_base()) {
    tensors.push_back({{"name", name}, {"shape", t.shape()}});
    payload.insert(payload.end(), t.data().begin(), t.data().end());
  }
  header["tensors"] = tensors;
  header["content_hash"] = hash_hex(io::payload_hash(payload));
  io::write_headered_atomic(path, header, payload);
}

BaseModel BaseModel::load_base(const std::string& path) {
  auto f = io::read_headered(path);
  if (f.header.value("kind", "") != "base_model") {
    throw FormatError("not a base model file: " + path);
  }
  const auto& jc = f.header.at("config");
  ModelConfig cfg;
  cfg.n_layers = jc.at("n_layers").get<int>();
  cfg.d_model = jc.at("d_model").get<int>();
  cfg.n_heads = jc.at("n_heads").get<int>();
  cfg.d_ff = jc.at("d_ff").get<int>();
  cfg.vocab_size = jc.at("vocab_size").get<int>();
  cfg.max_seq_len = jc.at("max_seq_len").get<int>();
  cfg.seed = jc.at("seed").get<uint64_t>();

  BaseModel m = BaseModel::init(cfg);

  // structural checks first: a wrong payload length is a malformed file,
  // not a content mismatch
  size_t expect = 0;
  for (auto& [name, t] : m.canonical_base()) {
    (void)name;
    expect += static_cast<size_t>(t.numel());
  }
  if (f.payload.size() < expect) {
    throw FormatError("payload shorter than declared tensors in " + path);
  }
  if (f.payload.size() > expect) {
    throw FormatError("payload longer than declared tensors in " + path);
  }

  const std::string want_hash = f.header.value("content_hash", "");
  if (!want_hash.empty() && want_hash != hash_hex(io::payload_hash(f.payload))) {
    throw CorruptionError("base model payload hash mismatch in " + path);
  }

  size_t off = 0;
  for (auto& [name, t] : m.canonical_base()) {
    (void)name;
    const size_t n = static_cast<size_t>(t.numel());
    std::copy_n(f.payload.begin() + static_cast<int64_t>(off), n,
                t.data().begin());
    off += n;
  }
  m.freeze_base();
  return m;
}

// ---- pretraining ----

BaseModel pretrain_base(const std::vector<int>& stream, int steps,
                        const ModelConfig& cfg, int batch_size, float lr_max,
                        float lr_min, std::vector<float>* loss_trace) {
  const int64_t window = cfg.max_seq_len;
  if (static_cast<int64_t>(stream.size()) < window + 1) {
    throw DataError("pretraining stream has " + std::to_string(stream.size()) +
                    " tokens, need at least " + std::to_string(window + 1));
  }
  BaseModel model = BaseModel::init(cfg);
  if (steps <= 0) {
    model.freeze_base();
    return model;
  }

  AdamWConfig ocfg;
  ocfg.lr = lr_max;
  AdamW opt(model.base_params(), ocfg);
  Rng data_rng(cfg.seed ^ 0x9E3779B97F4A7C15ULL);

  const int64_t span = static_cast<int64_t>(stream.size()) - window - 1;
  for (int step = 0; step < steps; ++step) {
    opt.set_lr(cosine_lr(step, steps, lr_max, lr_min));
    opt.zero_grad();
    double step_loss = 0.0;
    for (int b = 0; b < batch_size; ++b) {
      const int64_t start = span > 0 ? static_cast<int64_t>(data_rng.below(
                                           static_cast<uint64_t>(span + 1)))
                                     : 0;
      std::vector<int> input(stream.begin() + start,
                             stream.begin() + start + window);
      std::vector<int> targets(stream.begin() + start + 1,
                               stream.begin() + start + window + 1);
      ForwardResult out = model.forward(input, /*train_mode=*/false, nullptr);
      Tensor loss = ops::scale(ops::cross_entropy(out.logits, targets),
                               1.0f / static_cast<float>(batch_size));
      step_loss += double(loss.item()) * batch_size;
      backward(loss);
    }
    opt.step();
    if (loss_trace) loss_trace->push_back(static_cast<float>(step_loss / batch_size));
  }
  model.freeze_base();
  return model;
}

}  // namespace moestack
