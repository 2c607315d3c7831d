#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "moestack/config.hpp"
#include "moestack/graph.hpp"
#include "moestack/io.hpp"
#include "moestack/report.hpp"

using namespace moestack;
namespace fs = std::filesystem;

namespace {

// exit codes: 0 ok, 2 config, 3 missing prerequisite, 4 instability
constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kPrerequisite = 3;
constexpr int kInstability = 4;

struct CommonArgs {
  std::string config_path;
  std::optional<uint64_t> seed;
  std::optional<std::string> out;
};

RunConfig load_run_config(const CommonArgs& args) {
  RunConfig cfg = RunConfig::load(args.config_path);
  if (args.seed) cfg.seed = *args.seed;
  if (args.out) cfg.out_dir = *args.out;
  cfg.validate();
  fs::create_directories(cfg.out_dir);
  cfg.save(cfg.out_dir + "/run_config.json");  // provenance snapshot
  return cfg;
}

BaseModel need_base(const RunConfig& cfg) {
  try {
    return BaseModel::load_base(cfg.base_path());
  } catch (const StorageError&) {
    throw PrerequisiteError("no base model at " + cfg.base_path() +
                            "; run the `pretrain` command first");
  }
}

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

// base + every frozen stack from the primary (null-space) training run
BaseModel need_trained_model(const RunConfig& cfg, Manifest* manifest_out) {
  BaseModel model = need_base(cfg);
  Manifest m = need_manifest(cfg, cfg.use_nullspace);
  resume(m, model, cfg.train_dir(cfg.use_nullspace), cfg.domain_names());
  if (manifest_out) *manifest_out = std::move(m);
  return model;
}

RouterNet need_router(const RunConfig& cfg) {
  try {
    return load_router(cfg.router_path());
  } catch (const StorageError&) {
    throw PrerequisiteError("no router checkpoint at " + cfg.router_path() +
                            "; run the `train-router` command first");
  }
}

void write_json(const std::string& path, const nlohmann::json& j) {
  fs::create_directories(fs::path(path).parent_path());
  io::write_text_atomic(path, j.dump(2) + "\n");
}

// ---- subcommand bodies ----

int cmd_pretrain(const CommonArgs& args) {
  RunConfig cfg = load_run_config(args);
  auto corpus = cfg.pretrain_corpus();
  std::cout << "pretraining on " << corpus.size() << " samples across "
            << cfg.domains.size() << " domains, " << cfg.pretrain.steps
            << " steps\n";
  std::vector<float> trace;
  BaseModel model =
      pretrain_base(corpus_stream(corpus), cfg.pretrain.steps, cfg.model,
                    cfg.pretrain.batch_size, cfg.pretrain.lr,
                    cfg.pretrain.lr_min, &trace);
  model.save_base(cfg.base_path());

  std::string csv = "step,loss\n";
  for (size_t i = 0; i < trace.size(); ++i) {
    csv += format_cell(int64_t(i)) + "," + format_cell(double(trace[i])) + "\n";
  }
  io::write_text_atomic(cfg.pretrain_trace_path(), csv);
  std::cout << "base written to " << cfg.base_path() << " (final loss "
            << (trace.empty() ? 0.0f : trace.back()) << ")\n";
  return kOk;
}

int cmd_train(const CommonArgs& args, bool ablate_nullspace, bool resume_run) {
  RunConfig cfg = load_run_config(args);
  const bool use_ns = ablate_nullspace ? false : cfg.use_nullspace;
  const std::string dir = cfg.train_dir(use_ns);

  if (!resume_run && fs::exists(dir + "/manifest.json")) {
    std::cerr << "error: " << dir
              << " already holds a training run; pass --resume to continue "
                 "it or choose another --out\n";
    return kConfigError;
  }

  BaseModel model = need_base(cfg);
  auto specs = cfg.domain_specs();
  OuterConfig outer_cfg = cfg.outer(use_ns);

  std::cout << "training " << specs.size() << " domains sequentially ("
            << (use_ns ? "null-space protection on" : "no null-space") << ")\n";
  OuterResult res = outer_loop(model, specs, outer_cfg, use_ns);
  for (const auto& d : res.domains_run) {
    std::cout << "  " << d.domain << ": baseline " << d.baseline_loss;
    for (const auto& r : d.rounds) {
      std::cout << " -> round " << r.round << " " << r.val_loss;
    }
    std::cout << (d.plateau_break ? " (plateau)" : "") << "\n";
  }
  for (const auto& s : res.skipped) {
    std::cout << "  " << s << ": already covered, skipped\n";
  }
  std::cout << "manifest digest " << hash_hex(res.manifest.digest()) << "\n";
  return kOk;
}

int cmd_compare_lora(const CommonArgs& args, const std::string& domain_flag) {
  RunConfig cfg = load_run_config(args);
  auto specs = cfg.domain_specs();
  const std::string want = domain_flag.empty() ? specs.front().name
                                               : domain_flag;
  const DomainSpec* spec = nullptr;
  for (const auto& s : specs) {
    if (s.name == want) spec = &s;
  }
  if (!spec) throw ConfigError("unknown domain '" + want + "'");

  BaseModel moe_model = need_base(cfg);
  BaseModel single_model = need_base(cfg);
  std::cout << "comparing mixture vs single delta on '" << want << "'\n";
  LoraComparison res = compare_lora(moe_model, single_model, *spec, cfg.inner);

  const std::string dir = cfg.out_dir + "/compare";
  fs::create_directories(dir);
  std::string csv = "arm,step,split,task_loss,total\n";
  auto emit = [&csv](const std::string& arm, const TrainResult& t) {
    for (const auto& r : t.trace) {
      csv += arm + "," + format_cell(r.step) + "," + r.split + "," +
             format_cell(r.task_loss) + "," + format_cell(r.total) + "\n";
    }
  };
  emit("moe", res.moe);
  emit("single", res.single);
  io::write_text_atomic(dir + "/compare_lora.csv", csv);
  write_json(dir + "/compare_lora.json",
             {{"moe_params", res.moe_params},
              {"single_params", res.single_params},
              {"single_rank", res.single_rank},
              {"param_ratio",
               double(res.single_params) / double(res.moe_params)},
              {"moe_best_val", res.moe.best_val_loss},
              {"single_best_val", res.single.best_val_loss}});
  std::cout << "mixture " << res.moe_params << " params, best val "
            << res.moe.best_val_loss << "\nsingle rank " << res.single_rank
            << " " << res.single_params << " params, best val "
            << res.single.best_val_loss << "\nwrote " << dir << "\n";
  return kOk;
}

int cmd_oracle(const CommonArgs& args) {
  RunConfig cfg = load_run_config(args);
  BaseModel model = need_trained_model(cfg, nullptr);
  RouterConfig rcfg = cfg.router_full();
  OracleCache cache(cfg.oracle_dir(), rcfg.domains);

  auto corpus = cfg.router_corpus();
  int fresh = 0;
  double mean_best = 0.0;
  for (const auto& s : corpus) {
    const bool had = cache.lookup(s.domain, s.id).has_value();
    OracleTarget t = oracle_discover(model, s, rcfg, &cache);
    if (!had) ++fresh;
    mean_best += t.best_loss;
  }
  std::cout << "oracle targets for " << corpus.size() << " prompts (" << fresh
            << " computed, " << (corpus.size() - size_t(fresh))
            << " cached, mean best loss "
            << mean_best / double(corpus.size()) << ")\n";
  if (cache.dropped_lines() > 0) {
    std::cout << "recovered from " << cache.dropped_lines()
              << " unreadable cache lines\n";
  }
  return kOk;
}

int cmd_train_router(const CommonArgs& args) {
  RunConfig cfg = load_run_config(args);
  Manifest manifest;
  BaseModel model = need_trained_model(cfg, &manifest);
  RouterConfig rcfg = cfg.router_full();
  if (!fs::exists(cfg.oracle_dir())) {
    throw PrerequisiteError("no oracle cache at " + cfg.oracle_dir() +
                            "; run the `oracle` command first");
  }
  OracleCache cache(cfg.oracle_dir(), rcfg.domains);

  auto corpus = cfg.router_corpus();
  std::vector<OracleTarget> targets;
  for (const auto& s : corpus) {
    targets.push_back(oracle_discover(model, s, rcfg, &cache));
  }
  auto samples = build_router_samples(model, corpus, targets, rcfg);

  Rng rng(cfg.derived_seed("router/init"));
  RouterNet net = RouterNet::init(rcfg, model.config().d_model, rng);
  RouterMetrics metrics = train_router(net, samples, rcfg);
  save_router(cfg.router_path(), net);

  auto [train_half, val_half] =
      split_router_samples(samples, rcfg.val_fraction, rcfg.seed);
  RoutingStats stats = routing_stats(net, val_half, rcfg);

  const std::string run = hash_hex(manifest.digest());
  nlohmann::json jm = {{"run", run},
                       {"top1", metrics.top1},
                       {"set_match", metrics.set_match},
                       {"val_bce", metrics.val_bce},
                       {"composite", metrics.composite},
                       {"best_epoch", metrics.best_epoch},
                       {"epoch_composites", metrics.epoch_composites},
                       {"train_samples", metrics.train_samples},
                       {"val_samples", metrics.val_samples}};
  write_json(cfg.out_dir + "/router_metrics.json", jm);
  nlohmann::json js = stats.to_json();
  js["run"] = run;
  write_json(cfg.out_dir + "/routing_stats.json", js);

  // the manifest records its router so a deployment is one file tree
  manifest.router_file = fs::path(cfg.router_path()).filename().string();
  manifest.save(cfg.train_dir(cfg.use_nullspace) + "/manifest.json");

  std::cout << "router: top1 " << metrics.top1 << ", set match "
            << metrics.set_match << ", val bce " << metrics.val_bce
            << ", composite " << metrics.composite << " (epoch "
            << metrics.best_epoch << ")\nwrote " << cfg.router_path() << "\n";
  return kOk;
}

int cmd_eval(const CommonArgs& args, const std::string& mode_flag,
             const std::string& domain_flag) {
  RunConfig cfg = load_run_config(args);
  Manifest manifest;
  BaseModel model = need_trained_model(cfg, &manifest);
  auto specs = cfg.domain_specs();
  if (!domain_flag.empty()) {
    std::vector<DomainSpec> keep;
    for (auto& s : specs) {
      if (s.name == domain_flag) keep.push_back(std::move(s));
    }
    if (keep.empty()) throw ConfigError("unknown domain '" + domain_flag + "'");
    specs = std::move(keep);
  }
  const std::string run = hash_hex(manifest.digest());

  std::vector<std::string> modes;
  if (mode_flag.empty()) {
    modes = {"ungated", "isolated"};
    if (fs::exists(cfg.router_path())) modes.push_back("routed");
  } else {
    modes = {mode_flag};
  }

  for (const auto& mode : modes) {
    nlohmann::json losses;
    if (mode == "routed") {
      RouterNet net = need_router(cfg);
      RouterConfig rcfg = cfg.router_full();
      for (const auto& s : specs) {
        losses[s.name] = routed_mean_loss(model, net, s.val, rcfg);
      }
    } else {
      for (const auto& s : specs) {
        const Gating g = mode == "ungated" ? Gating::ungated()
                                           : Gating::isolated(s.name);
        losses[s.name] = evaluate(model, s.val, g);
      }
    }
    write_json(cfg.eval_dir() + "/eval_" + mode + ".json",
               {{"kind", "eval"}, {"mode", mode}, {"run", run},
                {"losses", losses}});
    std::cout << "eval " << mode << ":";
    for (const auto& [d, l] : losses.items()) {
      std::cout << " " << d << "=" << l.get<double>();
    }
    std::cout << "\n";
  }

  // raw figure data captured here so `report` never has to run the model
  if (mode_flag.empty() && domain_flag.empty()) {
    nlohmann::json hm = nlohmann::json::array();
    for (const auto& row : expert_utilization(model, specs)) {
      hm.push_back({{"domain", row.domain},
                    {"site", row.site},
                    {"expert", row.expert},
                    {"mean_activation", row.mean_activation}});
    }
    write_json(cfg.eval_dir() + "/expert_heatmap.json",
               {{"run", run}, {"rows", hm}});

    nlohmann::json ortho = nlohmann::json::array();
    for (const auto& row : subspace_overlap(model, specs, cfg.k_dirs_per_domain,
                                            cfg.ns_samples,
                                            cfg.derived_seed("eval/overlap"))) {
      ortho.push_back({{"site", row.site},
                       {"domain_a", row.domain_a},
                       {"domain_b", row.domain_b},
                       {"cos_principal", row.cos_principal}});
    }
    write_json(cfg.eval_dir() + "/orthogonality.json",
               {{"run", run}, {"rows", ortho}});
    std::cout << "expert heatmap and orthogonality data written to "
              << cfg.eval_dir() << "\n";
  }
  return kOk;
}

int cmd_generate(const CommonArgs& args, const std::vector<std::string>& prompts,
                 int max_new) {
  RunConfig cfg = load_run_config(args);
  Manifest manifest;
  BaseModel model = need_trained_model(cfg, &manifest);
  RouterNet net = need_router(cfg);
  RouterConfig rcfg = cfg.router_full();
  if (prompts.empty()) throw ConfigError("generate needs at least one prompt");

  StackCache cache(cfg.train_dir(cfg.use_nullspace), manifest,
                   cfg.cache_capacity);
  for (const auto& prompt : prompts) {
    auto weights = route(net, model, prompt, rcfg);
    auto load = cache.lazy_load(weights);
    cache.sync_model(model);
    model.set_domain_weights(weights);

    std::cout << "prompt: " << prompt << "\nroute:";
    for (const auto& [d, w] : weights) std::cout << " " << d << "=" << w;
    std::cout << "  (cache " << load.hits << " hit, " << load.misses
              << " miss)\n";
    std::cout << "output: " << greedy_decode(model, prompt, max_new) << "\n";
  }

  CacheReport rep = cache_report(cache);
  write_json(cfg.generate_dir() + "/cache_stats.json",
             {{"run", hash_hex(manifest.digest())},
              {"requests", rep.requests},
              {"hits", rep.hits},
              {"misses", rep.misses},
              {"hit_rate", rep.hit_rate},
              {"mean_load_seconds", rep.mean_load_seconds},
              {"timeline", rep.timeline},
              {"evictions", rep.evictions}});
  return kOk;
}

int cmd_report(const CommonArgs& args, const std::string& kind) {
  RunConfig cfg = load_run_config(args);
  std::vector<std::string> kinds;
  if (kind == "all") {
    kinds = report_kinds();
  } else {
    kinds = {kind};
  }
  int written = 0;
  for (const auto& k : kinds) {
    try {
      Report r = build_report(k, cfg);
      write_report(r, cfg.reports_dir());
      std::cout << "wrote " << cfg.reports_dir() << "/" << k << ".csv ("
                << r.rows.size() << " rows)\n";
      ++written;
    } catch (const PrerequisiteError& e) {
      if (kind != "all") throw;  // explicit kind: fail loudly
      std::cout << "skipped " << k << ": " << e.what() << "\n";
    }
  }
  if (kind == "all" && written == 0) {
    throw PrerequisiteError("no report inputs found; run the pipeline first");
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"continual multi-domain stack training over a frozen base"};
  app.require_subcommand(1);

  CommonArgs common;
  auto add_common = [&common](CLI::App* cmd) {
    cmd->add_option("--config", common.config_path, "run config JSON")
        ->required();
    cmd->add_option("--seed", common.seed, "override the run seed");
    cmd->add_option("--out", common.out, "override the output directory");
  };

  auto* pretrain = app.add_subcommand("pretrain", "train and freeze the base");
  add_common(pretrain);

  auto* train = app.add_subcommand("train", "sequential domain training");
  add_common(train);
  bool ablate = false, resume_run = false;
  train->add_flag("--ablate-nullspace", ablate,
                  "train without null-space protection (paired run)");
  train->add_flag("--resume", resume_run, "continue an interrupted run");

  auto* cmp = app.add_subcommand("compare-lora",
                                 "mixture vs parameter-matched single delta");
  add_common(cmp);
  std::string cmp_domain;
  cmp->add_option("--domain", cmp_domain, "domain to compare on");

  auto* oracle = app.add_subcommand("oracle", "discover routing targets");
  add_common(oracle);

  auto* trouter = app.add_subcommand("train-router", "fit the prompt router");
  add_common(trouter);

  auto* eval = app.add_subcommand("eval", "per-domain losses and figure data");
  add_common(eval);
  std::string mode, eval_domain;
  eval->add_option("--mode", mode, "gating mode")
      ->check(CLI::IsMember({"ungated", "isolated", "routed"}));
  eval->add_option("--domain", eval_domain, "restrict to one domain");

  auto* gen = app.add_subcommand("generate", "routed greedy decoding");
  add_common(gen);
  std::vector<std::string> prompts;
  int max_new = 48;
  gen->add_option("prompt", prompts, "prompts to complete")->required();
  gen->add_option("--max-new", max_new, "max generated bytes");

  auto* rep = app.add_subcommand("report", "emit plot-ready CSV/JSON");
  add_common(rep);
  std::string kind = "all";
  std::vector<std::string> kind_choices = report_kinds();
  kind_choices.push_back("all");
  rep->add_option("kind", kind, "report kind")
      ->check(CLI::IsMember(kind_choices));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (pretrain->parsed()) return cmd_pretrain(common);
    if (train->parsed()) return cmd_train(common, ablate, resume_run);
    if (cmp->parsed()) return cmd_compare_lora(common, cmp_domain);
    if (oracle->parsed()) return cmd_oracle(common);
    if (trouter->parsed()) return cmd_train_router(common);
    if (eval->parsed()) return cmd_eval(common, mode, eval_domain);
    if (gen->parsed()) return cmd_generate(common, prompts, max_new);
    if (rep->parsed()) return cmd_report(common, kind);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const PrerequisiteError& e) {
    std::cerr << "missing prerequisite: " << e.what() << "\n";
    return kPrerequisite;
  } catch (const InstabilityError& e) {
    std::cerr << "numeric instability: " << e.what() << "\n";
    return kInstability;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kInstability;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kOk;
}
