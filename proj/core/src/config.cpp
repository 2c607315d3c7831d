#include "moestack/config.hpp"

#include <set>

#include "moestack/io.hpp"

namespace moestack {

void RunConfig::validate() const {
  model.validate();
  inner.validate();
  best.validate();
  if (domains.empty()) throw ConfigError("run config lists no domains");
  std::set<std::string> seen;
  for (const auto& d : domains) {
    if (d.name.empty()) throw ConfigError("domain with an empty name");
    if (!seen.insert(d.name).second) {
      throw ConfigError("domain '" + d.name + "' listed twice");
    }
    if (d.n_samples < 8) {
      throw ConfigError("domain '" + d.name + "' needs at least 8 samples");
    }
    if (d.max_rounds < 0) {
      throw ConfigError("domain '" + d.name + "' has negative max_rounds");
    }
  }
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw ConfigError("val_fraction must lie in (0, 1)");
  }
  if (pretrain.steps < 1 || pretrain.batch_size < 1 ||
      pretrain.samples_per_domain < 1) {
    throw ConfigError("pretraining needs positive steps, batch, and samples");
  }
  if (k_dirs_per_domain < 1 || ns_samples < 1) {
    throw ConfigError("null-space settings must be positive");
  }
  if (router_samples_per_domain < 2) {
    throw ConfigError("router needs at least 2 samples per domain");
  }
  if (cache_capacity < 1) throw ConfigError("cache capacity must be positive");
  if (out_dir.empty()) throw ConfigError("out_dir is empty");
  router_full().validate();
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json jd = nlohmann::json::array();
  for (const auto& d : domains) {
    jd.push_back({{"name", d.name},
                  {"n_samples", d.n_samples},
                  {"max_rounds", d.max_rounds}});
  }
  return {
      {"model",
       {{"n_layers", model.n_layers},
        {"d_model", model.d_model},
        {"n_heads", model.n_heads},
        {"d_ff", model.d_ff},
        {"vocab_size", model.vocab_size},
        {"max_seq_len", model.max_seq_len},
        {"seed", model.seed}}},
      {"domains", jd},
      {"val_fraction", val_fraction},
      {"pretrain",
       {{"steps", pretrain.steps},
        {"batch_size", pretrain.batch_size},
        {"lr", pretrain.lr},
        {"lr_min", pretrain.lr_min},
        {"samples_per_domain", pretrain.samples_per_domain}}},
      {"inner",
       {{"max_rounds", inner.max_rounds},
        {"steps_per_round", inner.steps_per_round},
        {"eval_interval", inner.eval_interval},
        {"min_loss_delta", inner.min_loss_delta},
        {"lr", inner.lr},
        {"batch_size", inner.batch_size},
        {"seed", inner.seed},
        {"moe",
         {{"n_experts", inner.moe.n_experts},
          {"top_k", inner.moe.top_k},
          {"rank", inner.moe.rank},
          {"alpha", inner.moe.alpha},
          {"aux_coeff", inner.moe.aux_coeff}}}}},
      {"best",
       {{"spike_threshold", best.spike_threshold},
        {"patience", best.patience}}},
      {"use_nullspace", use_nullspace},
      {"k_dirs_per_domain", k_dirs_per_domain},
      {"ns_samples", ns_samples},
      {"ns_seed", ns_seed},
      {"router", router.to_json()},
      {"router_samples_per_domain", router_samples_per_domain},
      {"cache_capacity", cache_capacity},
      {"seed", seed},
      {"out_dir", out_dir},
  };
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  if (j.contains("model")) {
    const auto& m = j.at("model");
    c.model.n_layers = m.value("n_layers", c.model.n_layers);
    c.model.d_model = m.value("d_model", c.model.d_model);
    c.model.n_heads = m.value("n_heads", c.model.n_heads);
    c.model.d_ff = m.value("d_ff", c.model.d_ff);
    c.model.vocab_size = m.value("vocab_size", c.model.vocab_size);
    c.model.max_seq_len = m.value("max_seq_len", c.model.max_seq_len);
    c.model.seed = m.value("seed", c.model.seed);
  }
  if (j.contains("domains")) {
    for (const auto& jd : j.at("domains")) {
      DomainDataConfig d;
      d.name = jd.at("name").get<std::string>();
      d.n_samples = jd.value("n_samples", d.n_samples);
      d.max_rounds = jd.value("max_rounds", d.max_rounds);
      c.domains.push_back(std::move(d));
    }
  }
  c.val_fraction = j.value("val_fraction", c.val_fraction);
  if (j.contains("pretrain")) {
    const auto& p = j.at("pretrain");
    c.pretrain.steps = p.value("steps", c.pretrain.steps);
    c.pretrain.batch_size = p.value("batch_size", c.pretrain.batch_size);
    c.pretrain.lr = p.value("lr", c.pretrain.lr);
    c.pretrain.lr_min = p.value("lr_min", c.pretrain.lr_min);
    c.pretrain.samples_per_domain =
        p.value("samples_per_domain", c.pretrain.samples_per_domain);
  }
  if (j.contains("inner")) {
    const auto& i = j.at("inner");
    c.inner.max_rounds = i.value("max_rounds", c.inner.max_rounds);
    c.inner.steps_per_round =
        i.value("steps_per_round", c.inner.steps_per_round);
    c.inner.eval_interval = i.value("eval_interval", c.inner.eval_interval);
    c.inner.min_loss_delta = i.value("min_loss_delta", c.inner.min_loss_delta);
    c.inner.lr = i.value("lr", c.inner.lr);
    c.inner.batch_size = i.value("batch_size", c.inner.batch_size);
    c.inner.seed = i.value("seed", c.inner.seed);
    if (i.contains("moe")) {
      const auto& m = i.at("moe");
      c.inner.moe.n_experts = m.value("n_experts", c.inner.moe.n_experts);
      c.inner.moe.top_k = m.value("top_k", c.inner.moe.top_k);
      c.inner.moe.rank = m.value("rank", c.inner.moe.rank);
      c.inner.moe.alpha = m.value("alpha", c.inner.moe.alpha);
      c.inner.moe.aux_coeff = m.value("aux_coeff", c.inner.moe.aux_coeff);
    }
  }
  if (j.contains("best")) {
    const auto& b = j.at("best");
    c.best.spike_threshold = b.value("spike_threshold", c.best.spike_threshold);
    c.best.patience = b.value("patience", c.best.patience);
  }
  c.use_nullspace = j.value("use_nullspace", c.use_nullspace);
  c.k_dirs_per_domain = j.value("k_dirs_per_domain", c.k_dirs_per_domain);
  c.ns_samples = j.value("ns_samples", c.ns_samples);
  c.ns_seed = j.value("ns_seed", c.ns_seed);
  if (j.contains("router")) c.router = RouterConfig::from_json(j.at("router"));
  c.router_samples_per_domain =
      j.value("router_samples_per_domain", c.router_samples_per_domain);
  c.cache_capacity = j.value("cache_capacity", c.cache_capacity);
  c.seed = j.value("seed", c.seed);
  c.out_dir = j.value("out_dir", c.out_dir);
  return c;
}

void RunConfig::save(const std::string& path) const {
  io::write_text_atomic(path, to_json().dump(2) + "\n");
}

RunConfig RunConfig::load(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse run config " + path + ": " + e.what());
  }
  RunConfig c = from_json(j);
  c.validate();
  return c;
}

uint64_t RunConfig::derived_seed(const std::string& tag) const {
  return seed ^ fnv1a(tag);
}

std::vector<Sample> RunConfig::pretrain_corpus() const {
  std::vector<Sample> mix;
  for (const auto& d : domains) {
    auto s = generate(d.name, pretrain.samples_per_domain,
                      derived_seed(d.name + "/pretrain"));
    mix.insert(mix.end(), s.begin(), s.end());
  }
  return mix;
}

std::vector<DomainSpec> RunConfig::domain_specs() const {
  std::vector<DomainSpec> specs;
  int pos = 0;
  for (const auto& d : domains) {
    auto split =
        split_dataset(generate(d.name, d.n_samples,
                               derived_seed(d.name + "/corpus")),
                      val_fraction, derived_seed(d.name + "/split"));
    DomainSpec spec;
    spec.name = d.name;
    spec.train = std::move(split.train);
    spec.val = std::move(split.val);
    spec.max_rounds = d.max_rounds;
    spec.curriculum_position = pos++;
    specs.push_back(std::move(spec));
  }
  return specs;
}

std::vector<Sample> RunConfig::router_corpus() const {
  std::vector<Sample> out;
  for (const auto& d : domains) {
    auto s = generate(d.name, router_samples_per_domain,
                      derived_seed(d.name + "/router"));
    out.insert(out.end(), s.begin(), s.end());
  }
  return out;
}

std::vector<std::string> RunConfig::domain_names() const {
  std::vector<std::string> names;
  for (const auto& d : domains) names.push_back(d.name);
  return names;
}

OuterConfig RunConfig::outer(bool nullspace) const {
  OuterConfig o;
  o.inner = inner;
  o.best = best;
  o.k_dirs_per_domain = k_dirs_per_domain;
  o.ns_samples = ns_samples;
  o.ns_seed = ns_seed;
  o.out_dir = train_dir(nullspace);
  return o;
}

RouterConfig RunConfig::router_full() const {
  RouterConfig r = router;
  if (r.domains.empty()) r.domains = domain_names();
  if (r.chat_domain.empty() && !domains.empty()) {
    r.chat_domain = domains.front().name;  // curriculum opens with chat
  }
  return r;
}

}  // namespace moestack
