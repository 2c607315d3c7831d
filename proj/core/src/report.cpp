#include "moestack/report.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "moestack/graph.hpp"
#include "moestack/io.hpp"
#include "moestack/nullspace.hpp"
#include "moestack/ops.hpp"

namespace moestack {

// ==== report plumbing ====

const std::vector<std::string>& report_kinds() {
  static const std::vector<std::string> kinds = {
      "loss_curve",   "forgetting_matrix", "expert_heatmap", "orthogonality",
      "routing_stats", "cache_stats",      "comparison"};
  return kinds;
}

void Report::validate() const {
  const auto& kinds = report_kinds();
  if (std::find(kinds.begin(), kinds.end(), kind) == kinds.end()) {
    throw ArgumentError("unknown report kind '" + kind + "'");
  }
  if (!metadata.contains("run") ||
      metadata.at("run").get<std::string>().empty()) {
    throw ArgumentError("report '" + kind + "' does not name its run");
  }
  if (columns.empty()) throw ArgumentError("report has no columns");
  for (const auto& row : rows) {
    if (row.size() != columns.size()) {
      throw ArgumentError("report row width does not match the columns");
    }
  }
}

std::string format_cell(double v) {
  if (std::isnan(v)) return "";
  return nlohmann::json(v).dump();  // shortest round-trip decimal
}

std::string format_cell(int64_t v) { return std::to_string(v); }

namespace {

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += "\"";
  return out;
}

}  // namespace

std::string Report::to_csv() const {
  std::string out;
  for (size_t i = 0; i < columns.size(); ++i) {
    if (i) out += ",";
    out += csv_escape(columns[i]);
  }
  out += "\n";
  for (const auto& row : rows) {
    for (size_t i = 0; i < row.size(); ++i) {
      if (i) out += ",";
      out += csv_escape(row[i]);
    }
    out += "\n";
  }
  return out;
}

nlohmann::json Report::to_json() const {
  return {{"kind", kind},
          {"columns", columns},
          {"rows", rows},
          {"metadata", metadata}};
}

void write_report(const Report& r, const std::string& dir) {
  r.validate();
  std::filesystem::create_directories(dir);
  io::write_text_atomic(dir + "/" + r.kind + ".csv", r.to_csv());
  io::write_text_atomic(dir + "/" + r.kind + ".json",
                        r.to_json().dump(2) + "\n");
}

// ==== artifact readers ====

namespace {

Manifest need_manifest(const RunConfig& cfg, bool nullspace) {
  const std::string path = cfg.train_dir(nullspace) + "/manifest.json";
  try {
    return Manifest::load(path);
  } catch (const StorageError&) {
    throw PrerequisiteError(
        "no manifest at " + path + "; run the `train` command" +
        (nullspace ? "" : " with --ablate-nullspace") + " first");
  }
}

nlohmann::json need_json(const std::string& path, const std::string& cmd) {
  std::string text;
  try {
    text = io::read_text(path);
  } catch (const StorageError&) {
    throw PrerequisiteError("missing " + path + "; run the `" + cmd +
                            "` command first");
  }
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("cannot parse " + path + ": " + e.what());
  }
}

std::string primary_digest(const RunConfig& cfg) {
  return hash_hex(need_manifest(cfg, cfg.use_nullspace).digest());
}

Report report_loss_curve(const RunConfig& cfg) {
  const std::string path = cfg.train_dir(cfg.use_nullspace) + "/loss_trace.csv";
  std::string text;
  try {
    text = io::read_text(path);
  } catch (const StorageError&) {
    throw PrerequisiteError("missing " + path +
                            "; run the `train` command first");
  }
  Report r;
  r.kind = "loss_curve";
  std::istringstream in(text);
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (header) {
      r.columns = cells;
      header = false;
    } else {
      r.rows.push_back(cells);
    }
  }
  r.metadata = {{"run", primary_digest(cfg)}, {"source", path}};
  return r;
}

Report report_forgetting(const RunConfig& cfg) {
  const std::string dir = cfg.train_dir(cfg.use_nullspace);
  Report r;
  r.kind = "forgetting_matrix";
  r.columns = {"mode", "after_domain", "eval_domain", "val_loss"};
  for (const std::string mode : {"ungated", "isolated"}) {
    ForgettingMatrix m;
    try {
      m = ForgettingMatrix::load(dir + "/forgetting_" + mode + ".json");
    } catch (const StorageError&) {
      throw PrerequisiteError("missing forgetting matrix in " + dir +
                              "; run the `train` command first");
    }
    for (size_t i = 0; i < m.rows.size(); ++i) {
      for (size_t j = 0; j < m.cols.size(); ++j) {
        r.rows.push_back(
            {mode, m.rows[i], m.cols[j], format_cell(m.cells[i][j])});
      }
    }
  }
  r.metadata = {{"run", primary_digest(cfg)}, {"source", dir}};
  return r;
}

Report report_expert_heatmap(const RunConfig& cfg) {
  auto j = need_json(cfg.eval_dir() + "/expert_heatmap.json", "eval");
  Report r;
  r.kind = "expert_heatmap";
  r.columns = {"domain", "site", "expert", "mean_activation"};
  for (const auto& row : j.at("rows")) {
    r.rows.push_back({row.at("domain").get<std::string>(),
                      row.at("site").get<std::string>(),
                      format_cell(row.at("expert").get<int64_t>()),
                      format_cell(row.at("mean_activation").get<double>())});
  }
  r.metadata = {{"run", j.value("run", std::string())}};
  if (r.metadata.at("run").get<std::string>().empty()) {
    r.metadata["run"] = primary_digest(cfg);
  }
  return r;
}

Report report_orthogonality(const RunConfig& cfg) {
  auto j = need_json(cfg.eval_dir() + "/orthogonality.json", "eval");
  Report r;
  r.kind = "orthogonality";
  r.columns = {"site", "domain_a", "domain_b", "cos_principal"};
  for (const auto& row : j.at("rows")) {
    r.rows.push_back({row.at("site").get<std::string>(),
                      row.at("domain_a").get<std::string>(),
                      row.at("domain_b").get<std::string>(),
                      format_cell(row.at("cos_principal").get<double>())});
  }
  r.metadata = {{"run", j.value("run", primary_digest(cfg))}};
  return r;
}

Report report_routing_stats(const RunConfig& cfg) {
  auto j = need_json(cfg.out_dir + "/routing_stats.json", "train-router");
  Report r;
  r.kind = "routing_stats";
  r.columns = {"metric", "value"};
  r.rows.push_back({"single_top1", format_cell(j.at("single_top1").get<double>())});
  r.rows.push_back(
      {"mixed_set_match", format_cell(j.at("mixed_set_match").get<double>())});
  r.rows.push_back({"cross_domain_rate",
                    format_cell(j.at("cross_domain_rate").get<double>())});
  r.rows.push_back({"n_single", format_cell(j.at("n_single").get<int64_t>())});
  r.rows.push_back({"n_mixed", format_cell(j.at("n_mixed").get<int64_t>())});
  for (const auto& [domain, rate] : j.at("activation_rate").items()) {
    r.rows.push_back(
        {"activation_rate/" + domain, format_cell(rate.get<double>())});
  }
  r.metadata = {{"run", j.value("run", primary_digest(cfg))}};
  return r;
}

Report report_cache_stats(const RunConfig& cfg) {
  auto j = need_json(cfg.generate_dir() + "/cache_stats.json", "generate");
  Report r;
  r.kind = "cache_stats";
  r.columns = {"metric", "value"};
  // timing fields are deliberately excluded: the report must come out
  // byte-identical across repeated runs of one config
  r.rows.push_back({"requests", format_cell(j.at("requests").get<int64_t>())});
  r.rows.push_back({"hits", format_cell(j.at("hits").get<int64_t>())});
  r.rows.push_back({"misses", format_cell(j.at("misses").get<int64_t>())});
  r.rows.push_back({"hit_rate", format_cell(j.at("hit_rate").get<double>())});
  std::string timeline, evictions;
  for (const auto& t : j.at("timeline")) {
    if (!timeline.empty()) timeline += ";";
    timeline += t.get<std::string>();
  }
  for (const auto& e : j.at("evictions")) {
    if (!evictions.empty()) evictions += ";";
    evictions += e.get<std::string>();
  }
  r.rows.push_back({"timeline", timeline});
  r.rows.push_back({"evictions", evictions});
  r.metadata = {{"run", j.value("run", primary_digest(cfg))}};
  return r;
}

Report report_comparison(const RunConfig& cfg) {
  Manifest with_ns = need_manifest(cfg, true);
  Manifest without_ns = need_manifest(cfg, false);
  ForgettingMatrix ns, nons;
  try {
    ns = ForgettingMatrix::load(cfg.train_dir(true) + "/forgetting_ungated.json");
    nons = ForgettingMatrix::load(cfg.train_dir(false) +
                                  "/forgetting_ungated.json");
  } catch (const StorageError&) {
    throw PrerequisiteError(
        "comparison needs both train runs; run `train` and "
        "`train --ablate-nullspace` first");
  }
  if (ns.rows.empty() || nons.rows.empty()) {
    throw PrerequisiteError("comparison needs completed train runs");
  }
  Report r;
  r.kind = "comparison";
  r.columns = {"domain", "with_nullspace", "without_nullspace", "delta"};
  const std::string last_ns = ns.rows.back();
  const std::string last_nons = nons.rows.back();
  double sum_ns = 0.0, sum_nons = 0.0;
  for (const auto& d : ns.cols) {
    const double a = ns.cell(last_ns, d);
    const double b = nons.cell(last_nons, d);
    if (std::isnan(a) || std::isnan(b)) continue;
    sum_ns += a;
    sum_nons += b;
    r.rows.push_back(
        {d, format_cell(a), format_cell(b), format_cell(b - a)});
  }
  r.rows.push_back({"(total)", format_cell(sum_ns), format_cell(sum_nons),
                    format_cell(sum_nons - sum_ns)});
  r.metadata = {{"run", hash_hex(with_ns.digest())},
                {"run_without_nullspace", hash_hex(without_ns.digest())}};
  return r;
}

}  // namespace

Report build_report(const std::string& kind, const RunConfig& cfg) {
  if (kind == "loss_curve") return report_loss_curve(cfg);
  if (kind == "forgetting_matrix") return report_forgetting(cfg);
  if (kind == "expert_heatmap") return report_expert_heatmap(cfg);
  if (kind == "orthogonality") return report_orthogonality(cfg);
  if (kind == "routing_stats") return report_routing_stats(cfg);
  if (kind == "cache_stats") return report_cache_stats(cfg);
  if (kind == "comparison") return report_comparison(cfg);
  throw ArgumentError("unknown report kind '" + kind + "'");
}

// ==== measurements ====

std::vector<HeatmapRow> expert_utilization(
    BaseModel& model, const std::vector<DomainSpec>& domains) {
  std::map<std::string, float> ones;
  for (const auto& d : model.frozen_domains()) ones[d] = 1.0f;
  if (!ones.empty()) model.set_domain_weights(ones);

  const auto sites = model.injection_sites();
  std::vector<HeatmapRow> out;
  NoGradGuard ng;
  for (const auto& spec : domains) {
    // site index -> per-expert (sum, count)
    std::map<size_t, std::vector<std::pair<double, int64_t>>> acc;
    for (const auto& s : spec.val) {
      EncodedSample enc = encode_sample(s, model.config().max_seq_len);
      ForwardRecords rec;
      model.forward(enc.input_ids, false, nullptr, false, &rec);
      for (size_t i = 0; i < rec.sites.size(); ++i) {
        for (const auto& [dom, rr] : rec.sites[i].frozen) {
          if (dom != spec.name) continue;
          auto& v = acc[i];
          if (v.size() < rr.dispatch_fraction.size()) {
            v.resize(rr.dispatch_fraction.size(), {0.0, 0});
          }
          for (size_t e = 0; e < rr.dispatch_fraction.size(); ++e) {
            v[e].first += rr.dispatch_fraction[e];
            v[e].second += 1;
          }
        }
      }
    }
    for (const auto& [i, v] : acc) {
      for (size_t e = 0; e < v.size(); ++e) {
        out.push_back({spec.name, sites[i].full_name, int(e),
                       v[e].first / double(v[e].second)});
      }
    }
  }
  return out;
}

std::vector<OverlapRow> subspace_overlap(BaseModel& model,
                                         const std::vector<DomainSpec>& domains,
                                         int k_dirs, int n_rows,
                                         uint64_t seed) {
  if (k_dirs < 1 || n_rows < 1) {
    throw ArgumentError("subspace overlap needs positive k_dirs and n_rows");
  }
  const auto sites = model.injection_sites();
  const auto frozen = model.frozen_domains();

  // site index -> domain -> top-k right singular directions of its delta
  std::map<size_t, std::map<std::string, Tensor>> dirs;
  std::vector<std::string> measured;
  NoGradGuard ng;
  for (const auto& spec : domains) {
    if (!frozen.count(spec.name)) continue;
    measured.push_back(spec.name);
    std::map<std::string, float> w;
    for (const auto& d : frozen) w[d] = d == spec.name ? 1.0f : 0.0f;
    model.set_domain_weights(w);

    std::map<size_t, std::vector<std::vector<float>>> rows;
    for (const auto& s : spec.val) {
      EncodedSample enc = encode_sample(s, model.config().max_seq_len);
      ForwardRecords rec;
      model.forward(enc.input_ids, false, nullptr, false, &rec);
      for (size_t i = 0; i < rec.sites.size(); ++i) {
        Tensor d = rec.sites[i].frozen_delta_sum;
        if (!d.defined()) continue;
        const int64_t h = d.shape()[1];
        for (int64_t t = 0; t < d.shape()[0]; ++t) {
          rows[i].emplace_back(d.ptr() + t * h, d.ptr() + (t + 1) * h);
        }
      }
    }
    Rng rng(seed ^ fnv1a(spec.name));
    for (auto& [i, rws] : rows) {
      // seeded subsample without replacement down to n_rows positions
      if (int(rws.size()) > n_rows) {
        for (size_t a = rws.size(); a > 1; --a) {
          std::swap(rws[a - 1], rws[rng.below(a)]);
        }
        rws.resize(size_t(n_rows));
      }
      const int64_t h = int64_t(rws.front().size());
      std::vector<float> flat;
      flat.reserve(rws.size() * size_t(h));
      double fro = 0.0;
      for (const auto& row : rws) {
        for (float v : row) fro += double(v) * double(v);
        flat.insert(flat.end(), row.begin(), row.end());
      }
      if (std::sqrt(fro) < 1e-8) continue;  // silent site, nothing to span
      Tensor d = Tensor::from_data({int64_t(rws.size()), h}, std::move(flat));
      const int k = int(std::min<int64_t>({k_dirs, h, int64_t(rws.size())}));
      dirs[i][spec.name] =
          randomized_svd(d, k, 8, 2, seed ^ fnv1a(spec.name + "/svd")).v;
    }
  }

  // back to the deployment state
  std::map<std::string, float> ones;
  for (const auto& d : frozen) ones[d] = 1.0f;
  if (!ones.empty()) model.set_domain_weights(ones);

  std::vector<OverlapRow> out;
  for (const auto& [i, by_domain] : dirs) {
    for (size_t a = 0; a < measured.size(); ++a) {
      for (size_t b = a + 1; b < measured.size(); ++b) {
        auto ita = by_domain.find(measured[a]);
        auto itb = by_domain.find(measured[b]);
        if (ita == by_domain.end() || itb == by_domain.end()) continue;
        Tensor m = ops::matmul(ops::transpose(ita->second), itb->second);
        const double cosv =
            double(exact_svd_truncated(m, 1).singular_values.at(0));
        out.push_back({sites[i].full_name, measured[a], measured[b],
                       std::min(1.0, cosv)});
      }
    }
  }
  return out;
}

double routed_mean_loss(BaseModel& model, const RouterNet& net,
                        const std::vector<Sample>& val,
                        const RouterConfig& rcfg) {
  if (val.empty()) throw ArgumentError("routed_mean_loss: empty val set");
  double weighted = 0.0;
  int64_t tokens = 0;
  for (const auto& s : val) {
    const auto w = route(net, model, s.prompt, rcfg);
    const double loss = evaluate(model, {s}, Gating::routed(w));
    const EncodedSample enc = encode_sample(s, model.config().max_seq_len);
    weighted += loss * double(enc.scored);
    tokens += enc.scored;
  }
  if (tokens == 0) throw DataError("routed_mean_loss: no scored tokens");
  return weighted / double(tokens);
}

std::string greedy_decode(BaseModel& model, const std::string& prompt,
                          int max_new_tokens) {
  if (max_new_tokens < 1) {
    throw ArgumentError("greedy_decode: max_new_tokens must be positive");
  }
  std::vector<int> toks = encode_bytes(prompt + "\t");
  const int window = model.config().max_seq_len;
  std::string out;
  NoGradGuard ng;
  for (int i = 0; i < max_new_tokens; ++i) {
    std::vector<int> ctx = toks;
    if (int(ctx.size()) > window) {
      ctx.erase(ctx.begin(), ctx.end() - window);
    }
    Tensor logits = model.forward(ctx, false, nullptr).logits;
    const int64_t vocab = logits.shape()[1];
    const float* row = logits.ptr() + (logits.shape()[0] - 1) * vocab;
    int best = 0;
    float best_v = row[0];
    for (int v = 1; v < int(vocab); ++v) {
      if (row[v] > best_v) {
        best_v = row[v];
        best = v;
      }
    }
    if (best == '\n') break;
    toks.push_back(best);
    out.push_back(char(best));
  }
  return out;
}

// ==== mixture vs single-delta baseline ====

int64_t stack_param_count(const BaseModel& model, const MoEConfig& cfg) {
  cfg.validate();
  int64_t total = 0;
  for (const auto& s : model.injection_sites()) {
    total += int64_t(cfg.n_experts) * cfg.rank * (s.d_in + s.d_out);
    if (cfg.n_experts > 1) total += 2 * s.d_in * cfg.n_experts;
  }
  return total;
}

int matched_single_rank(const BaseModel& model, const MoEConfig& moe) {
  const int64_t target = stack_param_count(model, moe);
  int64_t per_rank = 0;
  for (const auto& s : model.injection_sites()) per_rank += s.d_in + s.d_out;
  const int rank = int((target + per_rank - 1) / per_rank);  // never fewer
  const double rel =
      std::fabs(double(int64_t(rank) * per_rank - target)) / double(target);
  if (rel > 0.10) {
    throw ConfigError("no single-delta rank matches the mixture within 10%");
  }
  return rank;
}

LoraComparison compare_lora(BaseModel& moe_model, BaseModel& single_model,
                            const DomainSpec& domain, const InnerConfig& cfg) {
  cfg.validate();
  if (moe_model.base_hash() != single_model.base_hash()) {
    throw ArgumentError("compare_lora: the two models do not share a base");
  }

  LoraComparison out;
  out.single_rank = matched_single_rank(moe_model, cfg.moe);
  out.moe_params = stack_param_count(moe_model, cfg.moe);

  InnerConfig single_cfg = cfg;
  single_cfg.moe.n_experts = 1;
  single_cfg.moe.top_k = 1;
  single_cfg.moe.rank = out.single_rank;
  single_cfg.moe.alpha = float(out.single_rank);  // alpha = rank convention
  out.single_params = stack_param_count(single_model, single_cfg.moe);

  {
    Rng rng(cfg.seed ^ fnv1a("compare/moe"));
    moe_model.add_active_stacks(cfg.moe, rng);
  }
  if (moe_model.active_param_count() != out.moe_params) {
    throw StateError("mixture parameter count disagrees with the analytic one");
  }
  out.moe = train_stack(moe_model, domain, cfg, BestStackConfig{}, 0);

  {
    Rng rng(cfg.seed ^ fnv1a("compare/single"));
    single_model.add_active_stacks(single_cfg.moe, rng);
  }
  if (single_model.active_param_count() != out.single_params) {
    throw StateError("baseline parameter count disagrees with the analytic one");
  }
  out.single = train_stack(single_model, domain, single_cfg, BestStackConfig{}, 0);
  return out;
}

}  // namespace moestack
