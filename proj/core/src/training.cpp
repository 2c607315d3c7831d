#include "moestack/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>

#include "moestack/graph.hpp"
#include "moestack/io.hpp"
#include "moestack/nullspace.hpp"
#include "moestack/ops.hpp"
#include "moestack/optim.hpp"

namespace moestack {

namespace fs = std::filesystem;

// ==== configuration ====

void InnerConfig::validate() const {
  if (max_rounds < 1) throw ConfigError("max_rounds must be >= 1");
  if (steps_per_round < 1) throw ConfigError("steps_per_round must be >= 1");
  if (eval_interval < 1) throw ConfigError("eval_interval must be >= 1");
  if (!(min_loss_delta > 0.0)) throw ConfigError("min_loss_delta must be > 0");
  if (!(lr > 0.0f)) throw ConfigError("lr must be > 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  moe.validate();
}

void BestStackConfig::validate() const {
  if (!(spike_threshold > 0.0)) {
    throw ConfigError("spike_threshold must be > 0");
  }
  if (patience < 1) throw ConfigError("patience must be >= 1");
}

// ==== best-stack tracking ====

BestStackCallback::BestStackCallback(const BestStackConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
}

StackAction BestStackCallback::on_eval(double val_loss) {
  if (!std::isfinite(val_loss)) return StackAction::restore_and_stop;
  if (!seen_any_ || val_loss < best_) {
    best_ = val_loss;
    seen_any_ = true;
    stale_evals_ = 0;
    return StackAction::snapshot;
  }
  if (val_loss > best_ + cfg_.spike_threshold) {
    return StackAction::restore_and_stop;
  }
  if (++stale_evals_ >= cfg_.patience) return StackAction::plateau_stop;
  return StackAction::keep_going;
}

// ==== evaluation gating ====

Gating Gating::ungated() { return Gating{}; }

Gating Gating::isolated(const std::string& domain) {
  Gating g;
  g.mode = Mode::isolated;
  g.domain = domain;
  return g;
}

Gating Gating::routed(std::map<std::string, float> weights) {
  Gating g;
  g.mode = Mode::routed;
  g.weights = std::move(weights);
  return g;
}

namespace {

// Replaces the model's domain weight map according to the gating. Every
// frozen domain gets an explicit entry so stale weights cannot survive.
void apply_gating(BaseModel& model, const Gating& g) {
  const auto known = model.frozen_domains();
  std::map<std::string, float> w;
  switch (g.mode) {
    case Gating::Mode::ungated:
      for (const auto& d : known) w[d] = 1.0f;
      break;
    case Gating::Mode::isolated:
      if (!known.count(g.domain)) {
        throw ArgumentError("isolated gating: unknown domain '" + g.domain +
                            "'");
      }
      for (const auto& d : known) w[d] = d == g.domain ? 1.0f : 0.0f;
      break;
    case Gating::Mode::routed:
      for (const auto& d : known) w[d] = 0.0f;
      for (const auto& [d, v] : g.weights) {
        if (!known.count(d)) {
          throw ArgumentError("routed gating: unknown domain '" + d + "'");
        }
        w[d] = v;
      }
      break;
  }
  model.set_domain_weights(w);
}

}  // namespace

double evaluate(BaseModel& model, const std::vector<Sample>& val,
                const Gating& gating) {
  if (val.empty()) throw ArgumentError("evaluate: empty val set");
  apply_gating(model, gating);
  const int window = static_cast<int>(model.config().max_seq_len);

  NoGradGuard ng;
  double ce_sum = 0.0;
  int64_t tokens = 0;
  for (const auto& s : val) {
    EncodedSample enc = encode_sample(s, window);
    ForwardResult out = model.forward(enc.input_ids, /*train_mode=*/false,
                                      nullptr);
    const double ce = double(ops::cross_entropy(out.logits,
                                                enc.target_ids).item());
    ce_sum += ce * double(enc.scored);
    tokens += enc.scored;
  }
  return ce_sum / double(tokens);
}

// ==== loss traces ====

void write_loss_csv(const std::string& path,
                    const std::vector<LossRecord>& trace) {
  const bool fresh = !fs::exists(path);
  std::ofstream out(path, std::ios::app);
  if (!out) throw StorageError("cannot open " + path);
  if (fresh) out << "step,split,domain,round,task_loss,aux_loss,total\n";
  char buf[160];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof(buf), "%lld,%s,%s,%d,%.9g,%.9g,%.9g\n",
                  static_cast<long long>(r.step), r.split.c_str(),
                  r.domain.c_str(), r.round, r.task_loss, r.aux_loss, r.total);
    out << buf;
  }
  if (!out) throw StorageError("short write to " + path);
}

// ==== stack training ====

namespace {

std::vector<std::vector<float>> copy_params(
    const std::vector<std::pair<std::string, Tensor>>& params) {
  std::vector<std::vector<float>> out;
  out.reserve(params.size());
  for (const auto& [name, t] : params) {
    (void)name;
    out.emplace_back(t.ptr(), t.ptr() + t.numel());
  }
  return out;
}

void restore_params(std::vector<std::pair<std::string, Tensor>>& params,
                    const std::vector<std::vector<float>>& snap) {
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& t = params[i].second;
    std::memcpy(t.ptr(), snap[i].data(),
                sizeof(float) * static_cast<size_t>(t.numel()));
  }
}

uint64_t mix_seed(uint64_t seed, const std::string& tag, int round) {
  return seed ^ fnv1a(tag) ^
         (static_cast<uint64_t>(round) + 1) * 0x9E3779B97F4A7C15ULL;
}

}  // namespace

TrainResult train_stack(BaseModel& model, const DomainSpec& domain,
                        const InnerConfig& cfg,
                        const BestStackConfig& best_cfg, int round) {
  cfg.validate();
  best_cfg.validate();
  if (!model.has_active()) {
    throw StateError("train_stack: no active stack installed");
  }
  if (domain.train.empty() || domain.val.empty()) {
    throw ArgumentError("train_stack: domain '" + domain.name +
                        "' needs train and val data");
  }

  // residual framing: everything already frozen stays on at full weight
  apply_gating(model, Gating::ungated());

  auto params = model.active_params();
  AdamWConfig ocfg;
  ocfg.lr = cfg.lr;
  AdamW opt(params, ocfg);  // fresh optimizer, no state carried across rounds

  const float lambda = model.site(size_t(0)).active().config().aux_coeff;
  const int window = static_cast<int>(model.config().max_seq_len);

  Rng data_rng(mix_seed(cfg.seed, domain.name + "/data", round));
  Rng noise_rng(mix_seed(cfg.seed, domain.name + "/noise", round));

  // best snapshot starts at the untrained stack so an early instability
  // still leaves the model in a defined state
  std::vector<std::vector<float>> best_snap = copy_params(params);
  BestStackCallback cb(best_cfg);

  TrainResult res;
  std::vector<size_t> order(domain.train.size());
  std::iota(order.begin(), order.end(), size_t(0));
  size_t cursor = order.size();  // trigger an initial shuffle

  auto fail_unstable = [&](const std::string& what) {
    restore_params(params, best_snap);
    throw InstabilityError("train_stack: " + what + " for '" + domain.name +
                           "' round " + std::to_string(round));
  };

  for (int step = 1; step <= cfg.steps_per_round; ++step) {
    opt.zero_grad();
    double task_acc = 0.0;
    double aux_acc = 0.0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor >= order.size()) {
        for (size_t i = order.size(); i > 1; --i) {
          std::swap(order[i - 1], order[data_rng.below(i)]);
        }
        cursor = 0;
      }
      const Sample& s = domain.train[order[cursor++]];
      EncodedSample enc = encode_sample(s, window);

      try {
        ForwardRecords recs;
        ForwardResult out = model.forward(enc.input_ids, /*train_mode=*/true,
                                          &noise_rng, false, &recs);
        Tensor ce = ops::cross_entropy(out.logits, enc.target_ids);

        Tensor aux_sum;
        int aux_sites = 0;
        for (const auto& site : recs.sites) {
          if (!site.active || !site.active->aux.defined()) continue;
          aux_sum = aux_sites == 0 ? site.active->aux
                                   : ops::add(aux_sum, site.active->aux);
          ++aux_sites;
        }

        Tensor total = ce;
        double aux_mean = 0.0;
        if (aux_sites > 0) {
          Tensor aux = ops::scale(aux_sum, 1.0f / float(aux_sites));
          aux_mean = double(aux.item());
          total = ops::add(ce, ops::scale(aux, lambda));
        }
        task_acc += double(ce.item());
        aux_acc += aux_mean;
        backward(ops::scale(total, 1.0f / float(cfg.batch_size)));
      } catch (const RoutingError& e) {
        // a NaN inside the network is the same failure as a NaN loss
        fail_unstable(std::string("diverged (") + e.what() + ")");
      }
    }
    const double task = task_acc / cfg.batch_size;
    const double aux = aux_acc / cfg.batch_size;
    if (!std::isfinite(task) || !std::isfinite(aux)) {
      fail_unstable("non-finite train loss");
    }
    opt.step();
    res.steps_run = step;
    res.trace.push_back({step, "train", domain.name, round, task, aux,
                         task + double(lambda) * aux});

    if (step % cfg.eval_interval != 0 && step != cfg.steps_per_round) continue;
    double val = 0.0;
    try {
      val = evaluate(model, domain.val, Gating::ungated());
    } catch (const RoutingError& e) {
      fail_unstable(std::string("diverged (") + e.what() + ")");
    }
    if (!std::isfinite(val)) fail_unstable("non-finite val loss");
    res.trace.push_back({step, "val", domain.name, round, val, 0.0, val});
    switch (cb.on_eval(val)) {
      case StackAction::snapshot:
        best_snap = copy_params(params);
        break;
      case StackAction::keep_going:
        break;
      case StackAction::restore_and_stop:
        res.stop_reason = "spike";
        break;
      case StackAction::plateau_stop:
        res.stop_reason = "plateau";
        break;
    }
    if (!res.stop_reason.empty()) break;
  }
  if (res.stop_reason.empty()) res.stop_reason = "completed";

  // the round's product is the best snapshot, not the last iterate
  restore_params(params, best_snap);
  res.best_val_loss = cb.best();
  return res;
}

// ==== inner loop ====

InnerResult inner_loop(BaseModel& model, const DomainSpec& domain,
                       const InnerConfig& cfg,
                       const BestStackConfig& best_cfg,
                       const std::string& stack_dir) {
  cfg.validate();
  best_cfg.validate();
  if (model.has_active()) {
    throw StateError("inner_loop: an active stack is already installed");
  }
  const int rounds = domain.max_rounds > 0 ? domain.max_rounds : cfg.max_rounds;

  InnerResult res;
  res.domain = domain.name;
  res.baseline_loss = evaluate(model, domain.val, Gating::ungated());

  double prev = res.baseline_loss;
  for (int m = 0; m < rounds; ++m) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng init_rng(mix_seed(cfg.seed, domain.name + "/init", m));
    model.add_active_stacks(cfg.moe, init_rng);

    TrainResult tr;
    try {
      tr = train_stack(model, domain, cfg, best_cfg, m);
    } catch (const InstabilityError&) {
      model.drop_active_stacks();  // a bad stack must not poison the model
      throw;
    }
    model.freeze_active_stacks(domain.name, m);

    RoundSummary rs;
    rs.round = m;
    rs.stop_reason = tr.stop_reason;
    if (!stack_dir.empty()) {
      fs::create_directories(stack_dir);
      rs.stack_file = domain.name + "_" + std::to_string(m) + ".stack";
      const std::string path = stack_dir + "/" + rs.stack_file;
      rs.content_hash = save_stack(path, model, domain.name, m);
      rs.byte_size = static_cast<int64_t>(fs::file_size(path));
    }
    rs.val_loss = evaluate(model, domain.val, Gating::ungated());
    rs.val_loss_isolated =
        evaluate(model, domain.val, Gating::isolated(domain.name));
    rs.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    res.rounds.push_back(rs);
    res.trace.insert(res.trace.end(), tr.trace.begin(), tr.trace.end());

    // diminishing returns: freeze first, then decide whether to continue
    if (prev - rs.val_loss < cfg.min_loss_delta) {
      res.plateau_break = true;
      break;
    }
    prev = rs.val_loss;
  }
  apply_gating(model, Gating::ungated());
  return res;
}

// ==== forgetting matrices ====

void ForgettingMatrix::append_row(const std::string& row,
                                  std::vector<double> vals) {
  if (vals.size() > cols.size()) {
    throw ArgumentError("forgetting row wider than the column set");
  }
  vals.resize(cols.size(), std::numeric_limits<double>::quiet_NaN());
  rows.push_back(row);
  cells.push_back(std::move(vals));
}

double ForgettingMatrix::cell(const std::string& row,
                              const std::string& col) const {
  const auto r = std::find(rows.begin(), rows.end(), row);
  const auto c = std::find(cols.begin(), cols.end(), col);
  if (r == rows.end() || c == cols.end()) {
    throw ArgumentError("no forgetting cell (" + row + ", " + col + ")");
  }
  return cells[size_t(r - rows.begin())][size_t(c - cols.begin())];
}

nlohmann::json ForgettingMatrix::to_json() const {
  nlohmann::json grid = nlohmann::json::array();
  for (const auto& row : cells) {
    nlohmann::json r = nlohmann::json::array();
    for (double v : row) {
      if (std::isnan(v)) {
        r.push_back(nullptr);  // not yet trained
      } else {
        r.push_back(v);
      }
    }
    grid.push_back(std::move(r));
  }
  return {{"kind", "forgetting_matrix"},
          {"mode", mode},
          {"rows", rows},
          {"cols", cols},
          {"cells", grid}};
}

ForgettingMatrix ForgettingMatrix::from_json(const nlohmann::json& j) {
  if (j.value("kind", "") != "forgetting_matrix") {
    throw FormatError("not a forgetting matrix");
  }
  ForgettingMatrix m;
  m.mode = j.value("mode", "");
  m.rows = j.at("rows").get<std::vector<std::string>>();
  m.cols = j.at("cols").get<std::vector<std::string>>();
  for (const auto& row : j.at("cells")) {
    std::vector<double> r;
    for (const auto& v : row) {
      r.push_back(v.is_null() ? std::numeric_limits<double>::quiet_NaN()
                              : v.get<double>());
    }
    m.cells.push_back(std::move(r));
  }
  return m;
}

void ForgettingMatrix::save(const std::string& path) const {
  io::write_text_atomic(path, to_json().dump(2) + "\n");
}

ForgettingMatrix ForgettingMatrix::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw StorageError("cannot open " + path);
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
}

// ==== outer loop ====

namespace {

nlohmann::json config_summary(const OuterConfig& cfg, const ModelConfig& mc,
                              bool use_nullspace) {
  return {{"seed", cfg.inner.seed},
          {"lr", cfg.inner.lr},
          {"steps_per_round", cfg.inner.steps_per_round},
          {"batch_size", cfg.inner.batch_size},
          {"min_loss_delta", cfg.inner.min_loss_delta},
          {"moe",
           {{"n_experts", cfg.inner.moe.n_experts},
            {"top_k", cfg.inner.moe.top_k},
            {"rank", cfg.inner.moe.rank},
            {"alpha", cfg.inner.moe.alpha},
            {"aux_coeff", cfg.inner.moe.aux_coeff}}},
          {"model",
           {{"n_layers", mc.n_layers},
            {"d_model", mc.d_model},
            {"n_heads", mc.n_heads},
            {"d_ff", mc.d_ff},
            {"vocab", mc.vocab_size},
            {"max_seq_len", mc.max_seq_len},
            {"seed", mc.seed}}},
          {"use_nullspace", use_nullspace},
          {"k_dirs_per_domain", cfg.k_dirs_per_domain},
          {"ns_samples", cfg.ns_samples},
          {"ns_seed", cfg.ns_seed}};
}

}  // namespace

OuterResult outer_loop(BaseModel& model, const std::vector<DomainSpec>& domains,
                       const OuterConfig& cfg, bool use_nullspace) {
  if (domains.empty()) throw ArgumentError("outer_loop: no domains");
  for (size_t i = 1; i < domains.size(); ++i) {
    if (domains[i].curriculum_position <= domains[i - 1].curriculum_position) {
      throw ConfigError("curriculum positions must be strictly increasing");
    }
  }
  if (!model.base_frozen()) {
    throw StateError("outer_loop: base model must be frozen");
  }
  if (cfg.out_dir.empty()) throw ArgumentError("outer_loop: out_dir required");
  fs::create_directories(cfg.out_dir + "/stacks");

  std::vector<std::string> planned;
  for (const auto& d : domains) planned.push_back(d.name);

  const std::string manifest_path = cfg.out_dir + "/manifest.json";
  OuterResult res;
  std::string pending;
  if (fs::exists(manifest_path)) {
    res.manifest = Manifest::load(manifest_path);
    pending = resume(res.manifest, model, cfg.out_dir, planned);
  } else {
    res.manifest.base_file = "base.bin";
    res.manifest.base_hash = hash_hex(model.base_hash());
    res.manifest.metadata = config_summary(cfg, model.config(), use_nullspace);
    if (!fs::exists(cfg.out_dir + "/base.bin")) {
      model.save_base(cfg.out_dir + "/base.bin");
    }
    res.manifest.save(manifest_path);
    pending = planned.front();
  }

  size_t start = domains.size();
  for (size_t i = 0; i < domains.size(); ++i) {
    if (domains[i].name == pending) {
      start = i;
      break;
    }
  }
  for (size_t i = 0; i < start; ++i) res.skipped.push_back(domains[i].name);

  const std::string ug_path = cfg.out_dir + "/forgetting_ungated.json";
  const std::string iso_path = cfg.out_dir + "/forgetting_isolated.json";
  // a matrix written under an earlier, shorter plan keeps its rows; cells
  // for newly planned domains become "not yet trained"
  const auto align_cols = [&](ForgettingMatrix m) {
    if (m.cols == planned) return m;
    ForgettingMatrix out;
    out.mode = m.mode;
    out.cols = planned;
    for (size_t r = 0; r < m.rows.size(); ++r) {
      std::vector<double> row(planned.size(),
                              std::numeric_limits<double>::quiet_NaN());
      for (size_t c = 0; c < m.cols.size(); ++c) {
        const auto it = std::find(planned.begin(), planned.end(), m.cols[c]);
        if (it != planned.end()) {
          row[size_t(it - planned.begin())] = m.cells[r][c];
        }
      }
      out.rows.push_back(m.rows[r]);
      out.cells.push_back(std::move(row));
    }
    return out;
  };
  if (fs::exists(ug_path)) {
    res.ungated = align_cols(ForgettingMatrix::load(ug_path));
    res.isolated = align_cols(ForgettingMatrix::load(iso_path));
  } else {
    res.ungated.mode = "ungated";
    res.ungated.cols = planned;
    res.isolated.mode = "isolated";
    res.isolated.cols = planned;
  }

  const int window = static_cast<int>(model.config().max_seq_len);
  for (size_t i = start; i < domains.size(); ++i) {
    const DomainSpec& dom = domains[i];

    std::string projector_file;
    if (i > 0 && use_nullspace) {
      std::vector<EncodedSample> prev;
      for (size_t j = 0; j < i; ++j) {
        for (const auto& s : domains[j].val) {
          prev.push_back(encode_sample(s, window));
        }
      }
      const int k = cfg.k_dirs_per_domain * static_cast<int>(i);
      ProjectorSet ps = build_all_projectors(
          model, prev, k, cfg.ns_samples, cfg.ns_seed ^ fnv1a(dom.name));
      projector_file = "projectors_" + dom.name + ".bin";
      save_projectors(cfg.out_dir + "/" + projector_file, ps);
      install_projectors(model, ps);
    }

    InnerResult ir;
    try {
      ir = inner_loop(model, dom, cfg.inner, cfg.best, cfg.out_dir + "/stacks");
    } catch (...) {
      clear_projectors(model);
      throw;
    }
    clear_projectors(model);

    DomainBlock block;
    block.domain = dom.name;
    block.projector_file = projector_file;
    for (const auto& rs : ir.rounds) {
      StackRecord rec;
      rec.round = rs.round;
      rec.file = "stacks/" + rs.stack_file;
      rec.byte_size = rs.byte_size;
      rec.content_hash = rs.content_hash;
      rec.val_loss = rs.val_loss_isolated;  // the at-freeze reference value
      rec.wall_seconds = rs.wall_seconds;
      block.stacks.push_back(rec);
    }
    res.manifest.domains.push_back(block);
    res.manifest.save(manifest_path);

    if (cfg.post_domain_hook) cfg.post_domain_hook(model, dom);

    std::vector<double> ug_row, iso_row;
    for (size_t j = 0; j < domains.size(); ++j) {
      if (j > i) break;
      ug_row.push_back(evaluate(model, domains[j].val, Gating::ungated()));
      iso_row.push_back(
          evaluate(model, domains[j].val, Gating::isolated(domains[j].name)));
    }
    res.ungated.append_row(dom.name, ug_row);
    res.isolated.append_row(dom.name, iso_row);
    res.ungated.save(ug_path);
    res.isolated.save(iso_path);

    write_loss_csv(cfg.out_dir + "/loss_trace.csv", ir.trace);
    res.trace.insert(res.trace.end(), ir.trace.begin(), ir.trace.end());
    res.domains_run.push_back(std::move(ir));
  }
  apply_gating(model, Gating::ungated());
  return res;
}

}  // namespace moestack
