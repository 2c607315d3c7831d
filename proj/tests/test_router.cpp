#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "moestack/graph.hpp"
#include "moestack/io.hpp"
#include "moestack/ops.hpp"
#include "moestack/router.hpp"
#include "moestack/training.hpp"

using namespace moestack;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 32;
  cfg.n_heads = 2;
  cfg.d_ff = 64;
  cfg.max_seq_len = 48;
  cfg.seed = 7;
  return cfg;
}

MoEConfig small_moe() {
  MoEConfig c;
  c.n_experts = 2;
  c.top_k = 1;
  c.rank = 2;
  c.alpha = 2.0f;
  return c;
}

const BaseModel& pretrained_base() {
  static BaseModel model = [] {
    std::vector<Sample> mix;
    for (const auto& d : curriculum_domains()) {
      auto s = generate(d, 50, 33);
      mix.insert(mix.end(), s.begin(), s.end());
    }
    return pretrain_base(corpus_stream(mix), 150, tiny_config(), 8, 3e-3f,
                         5e-4f);
  }();
  return model;
}

BaseModel fresh_base() {
  BaseModel m = BaseModel::init(tiny_config());
  auto src = pretrained_base().base_params();
  auto dst = m.base_params();
  for (size_t i = 0; i < src.size(); ++i) {
    std::copy(src[i].second.ptr(), src[i].second.ptr() + src[i].second.numel(),
              dst[i].second.ptr());
  }
  m.freeze_base();
  return m;
}

void add_random_stack(BaseModel& m, const std::string& domain, int round,
                      uint64_t seed) {
  Rng rng(seed);
  m.add_active_stacks(small_moe(), rng);
  Rng br(seed ^ 0xBEEF);
  for (size_t i = 0; i < m.n_sites(); ++i) {
    Tensor b = m.site(i).active().b();
    for (int64_t j = 0; j < b.numel(); ++j)
      b.ptr()[j] = float(br.normal() * 0.1);
  }
  m.freeze_active_stacks(domain, round);
}

DomainSpec make_domain(const std::string& name, int n, int pos,
                       uint64_t seed = 11) {
  auto split = split_dataset(generate(name, n, seed), 0.25, seed + 1);
  DomainSpec d;
  d.name = name;
  d.train = std::move(split.train);
  d.val = std::move(split.val);
  d.curriculum_position = pos;
  return d;
}

RouterConfig base_rcfg() {
  RouterConfig c;
  c.domains = {"format", "procedural"};
  c.chat_domain = "format";
  c.seq_len = 32;
  return c;
}

// One model with a real trained stack per domain, shared by the oracle
// tests; the router only ever sees loss differences, so the stacks have to
// genuinely help their own domains.
struct OracleFix {
  BaseModel model;
  DomainSpec fmt;
  DomainSpec proc;
};

OracleFix& oracle_fix() {
  static OracleFix f = [] {
    OracleFix x;
    x.model = fresh_base();
    x.fmt = make_domain("format", 60, 0);
    x.proc = make_domain("procedural", 60, 1);
    InnerConfig ic;
    ic.max_rounds = 1;
    ic.steps_per_round = 60;
    ic.eval_interval = 20;
    ic.lr = 5e-3f;
    ic.batch_size = 4;
    ic.seed = 21;
    ic.moe = small_moe();
    inner_loop(x.model, x.fmt, ic, BestStackConfig{}, "");
    inner_loop(x.model, x.proc, ic, BestStackConfig{}, "");
    return x;
  }();
  return f;
}

double routed_loss(BaseModel& m, const Sample& s,
                   const std::vector<std::string>& combo) {
  std::map<std::string, float> w;
  for (const auto& d : combo) w[d] = 1.0f;
  return evaluate(m, {s}, Gating::routed(w));
}

// ---- synthetic feature factory for the learning tests ----

constexpr int kSynDim = 12;

RouterSample syn_sample(const std::vector<int>& active, int label_idx, int id,
                        Rng& rng, const RouterConfig& cfg) {
  std::vector<float> data(6 * kSynDim);
  for (auto& v : data) v = 0.1f * float(rng.normal());
  for (int block : active) {
    for (int t = 0; t < 6; ++t) {
      for (int c = block * 4; c < block * 4 + 4; ++c) {
        data[size_t(t * kSynDim + c)] += 2.0f;
      }
    }
  }
  RouterSample s;
  s.prompt_id = uint64_t(id);
  s.prompt = "prompt-" + std::to_string(id);
  s.label = cfg.domains[size_t(label_idx)];
  s.features = Tensor::from_data({6, kSynDim}, data);
  for (int block : active) s.discovered.push_back(cfg.domains[size_t(block)]);
  std::sort(s.discovered.begin(), s.discovered.end());
  s.target.assign(cfg.domains.size(), 0.0f);
  for (int block : active) {
    s.target[size_t(block)] = cfg.target_blend_discovered;
  }
  s.target[size_t(label_idx)] += cfg.target_blend_label;
  return s;
}

RouterConfig syn_cfg() {
  RouterConfig c;
  c.domains = {"alpha", "beta", "gamma"};
  c.chat_domain = "alpha";
  c.hidden_dim = 16;
  c.seq_len = 8;
  c.epochs = 20;
  c.lr = 1e-2f;
  c.lr_min = 1e-3f;
  c.batch_size = 8;
  c.dropout = 0.0f;
  c.val_fraction = 0.25;
  c.seed = 9;
  return c;
}

std::vector<RouterSample> syn_corpus(const RouterConfig& cfg, uint64_t seed,
                                     bool with_mixed = true) {
  Rng rng(seed);
  std::vector<RouterSample> out;
  int id = 0;
  for (int rep = 0; rep < 20; ++rep) {
    for (int d = 0; d < 3; ++d) {
      out.push_back(syn_sample({d}, d, id++, rng, cfg));
    }
  }
  if (with_mixed) {
    for (int rep = 0; rep < 12; ++rep) {
      out.push_back(syn_sample({0, 1}, 0, id++, rng, cfg));
    }
  }
  return out;
}

}  // namespace

// ==== configuration ====

TEST_CASE("config validation rejects bad blends, floors, and domains") {
  RouterConfig c = base_rcfg();
  CHECK_NOTHROW(c.validate());

  RouterConfig bad = c;
  bad.mid_blend = 0.5f;  // 0.5 + 0.55 != 1
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = c;
  bad.chat_floor = 0.10f;  // below the gate threshold
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = c;
  bad.domains.clear();
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = c;
  bad.chat_domain = "nope";
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = c;
  bad.soft_boost_domain = "nope";
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = c;
  bad.val_fraction = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("config json roundtrip preserves every field") {
  RouterConfig c = base_rcfg();
  c.soft_boost_domain = "procedural";
  c.epochs = 5;
  c.margin = 0.25f;
  c.seed = 1234;
  RouterConfig back = RouterConfig::from_json(c.to_json());
  CHECK(back.domains == c.domains);
  CHECK(back.chat_domain == c.chat_domain);
  CHECK(back.soft_boost_domain == c.soft_boost_domain);
  CHECK(back.mid_blend == c.mid_blend);
  CHECK(back.last_blend == c.last_blend);
  CHECK(back.chat_floor == c.chat_floor);
  CHECK(back.gate_threshold == c.gate_threshold);
  CHECK(back.epochs == c.epochs);
  CHECK(back.margin == c.margin);
  CHECK(back.seed == c.seed);
  CHECK(back.to_json() == c.to_json());
}

TEST_CASE("composite score is the documented weighted sum") {
  RouterConfig c = base_rcfg();
  // 0.50 * 0.9 + 0.35 * 1.0 - 0.15 * 0.1 = 0.785
  CHECK(composite_score(0.9, 1.0, 0.1, c) == doctest::Approx(0.785));
  CHECK(composite_score(1.0, 1.0, 0.0, c) == doctest::Approx(0.85));
  // heavier bce hurts
  CHECK(composite_score(0.9, 1.0, 0.5, c) < composite_score(0.9, 1.0, 0.1, c));
}

// ==== prompt encoding ====

TEST_CASE("encoded features have the blended shape and truncate long prompts") {
  BaseModel m = fresh_base();
  RouterConfig c = base_rcfg();
  c.seq_len = 6;

  Tensor f = encode_prompt(m, encode_bytes("rev(abcdef)"), c);  // 11 tokens
  REQUIRE(f.shape() == Shape{6, 32});

  Tensor g = encode_prompt(m, encode_bytes("hi"), c);
  CHECK(g.shape() == Shape{2, 32});

  // the model's own window caps the truncation too
  c.seq_len = 64;
  std::string longp(100, 'a');
  Tensor h = encode_prompt(m, encode_bytes(longp), c);
  CHECK(h.shape() == Shape{48, 32});

  CHECK_THROWS_AS(encode_prompt(m, {}, c), ArgumentError);
}

TEST_CASE("degenerate blend reproduces the middle hidden state exactly") {
  BaseModel m = fresh_base();
  RouterConfig c = base_rcfg();
  c.mid_blend = 1.0f;
  c.last_blend = 0.0f;

  auto tokens = encode_bytes("say hello");
  Tensor f = encode_prompt(m, tokens, c);

  NoGradGuard ng;
  ForwardResult out = m.forward(tokens, false, nullptr, true);
  Tensor mid = out.hidden[1];  // floor(2 / 2)
  REQUIRE(f.shape() == mid.shape());
  for (int64_t i = 0; i < f.numel(); ++i) CHECK(f.ptr()[i] == mid.ptr()[i]);
}

TEST_CASE("encoding ignores installed stacks and restores their weights") {
  BaseModel m = fresh_base();
  RouterConfig c = base_rcfg();
  auto tokens = encode_bytes("dup(xyz)");

  Tensor before = encode_prompt(m, tokens, c);
  add_random_stack(m, "format", 0, 77);

  // sanity: the stack really changes ungated outputs
  NoGradGuard ng;
  Tensor base_logits = fresh_base().forward(tokens, false, nullptr).logits;
  Tensor stacked_logits = m.forward(tokens, false, nullptr).logits;
  double diff = 0.0;
  for (int64_t i = 0; i < base_logits.numel(); ++i) {
    diff += std::fabs(double(base_logits.ptr()[i]) -
                      double(stacked_logits.ptr()[i]));
  }
  REQUIRE(diff > 1e-3);

  Tensor after = encode_prompt(m, tokens, c);
  REQUIRE(after.shape() == before.shape());
  for (int64_t i = 0; i < after.numel(); ++i) {
    CHECK(after.ptr()[i] == before.ptr()[i]);
  }

  // weights went back to the pre-call default (absent entries mean 1.0)
  Tensor again = m.forward(tokens, false, nullptr).logits;
  for (int64_t i = 0; i < again.numel(); ++i) {
    CHECK(again.ptr()[i] == stacked_logits.ptr()[i]);
  }
}

// ==== network forward ====

TEST_CASE("a fresh router answers one half for every domain") {
  RouterConfig c = syn_cfg();
  Rng rng(3);
  RouterNet net = RouterNet::init(c, kSynDim, rng);
  Rng frng(4);
  Tensor feats = Tensor::randn({5, kSynDim}, 1.0f, frng);
  NoGradGuard ng;
  Tensor p = net.forward(feats);
  REQUIRE(p.numel() == 3);
  for (int64_t i = 0; i < 3; ++i) CHECK(p.ptr()[i] == 0.5f);
}

TEST_CASE("a tiny inverse temperature washes the probabilities back to half") {
  RouterConfig c = syn_cfg();
  Rng rng(3);
  RouterNet net = RouterNet::init(c, kSynDim, rng);
  for (int64_t i = 0; i < 3; ++i) net.head_b().ptr()[i] = float(2 + i);

  Rng frng(4);
  Tensor feats = Tensor::randn({5, kSynDim}, 1.0f, frng);
  NoGradGuard ng;
  Tensor warm = net.forward(feats);
  CHECK(warm.ptr()[0] > 0.8f);  // biased heads move the output

  for (int64_t i = 0; i < 3; ++i) net.log_inv_temp().ptr()[i] = -40.0f;
  Tensor cold = net.forward(feats);
  for (int64_t i = 0; i < 3; ++i) {
    CHECK(cold.ptr()[i] == doctest::Approx(0.5).epsilon(1e-6));
  }
}

TEST_CASE("domain probabilities are independent, not competing") {
  RouterConfig c = syn_cfg();
  Rng rng(3);
  RouterNet net = RouterNet::init(c, kSynDim, rng);
  net.head_b().ptr()[0] = 4.0f;
  net.head_b().ptr()[1] = 4.0f;
  net.head_b().ptr()[2] = -4.0f;

  Rng frng(4);
  Tensor feats = Tensor::randn({5, kSynDim}, 1.0f, frng);
  NoGradGuard ng;
  Tensor p = net.forward(feats);
  CHECK(p.ptr()[0] > 0.9f);  // two domains high at once
  CHECK(p.ptr()[1] > 0.9f);
  CHECK(p.ptr()[2] < 0.1f);
  // and nothing forces them to sum to one
  CHECK(p.ptr()[0] + p.ptr()[1] + p.ptr()[2] > 1.5f);
}

TEST_CASE("parameter count matches the layer shapes") {
  RouterConfig c = syn_cfg();  // hidden 16, 3 domains
  Rng rng(3);
  RouterNet net = RouterNet::init(c, kSynDim, rng);
  const int64_t h = 16, n = 3, d = kSynDim;
  const int64_t want = (d * h + h)     // projection
                       + h             // global query
                       + n * h         // domain queries
                       + 2 * h * h + h // fusion
                       + n * h + n     // heads
                       + n;            // temperatures
  CHECK(net.param_count() == want);
  CHECK(net.params().size() == 10);
}

TEST_CASE("clone detaches storage") {
  RouterConfig c = syn_cfg();
  Rng rng(3);
  RouterNet net = RouterNet::init(c, kSynDim, rng);
  RouterNet copy = net.clone();
  CHECK(copy.content_hash() == net.content_hash());

  copy.head_b().ptr()[0] = 9.0f;
  CHECK(copy.content_hash() != net.content_hash());
  CHECK(net.head_b().ptr()[0] == 0.0f);
}

TEST_CASE("malformed features are rejected") {
  RouterConfig c = syn_cfg();
  Rng rng(3);
  RouterNet net = RouterNet::init(c, kSynDim, rng);
  CHECK_THROWS_AS(net.forward(Tensor::zeros({5, kSynDim + 1})), ShapeError);
  CHECK_THROWS_AS(net.forward(Tensor::zeros({kSynDim})), ShapeError);
  CHECK_THROWS_AS(net.forward(Tensor::zeros({5, kSynDim}), true, nullptr),
                  ArgumentError);
}

// ==== outcome discovery ====

TEST_CASE("greedy discovery helps in-domain prompts and tracks exhaustive") {
  auto& fix = oracle_fix();
  RouterConfig c = base_rcfg();

  int discovered_own = 0;
  int n_checked = 0;
  for (const auto* spec : {&fix.fmt, &fix.proc}) {
    for (size_t i = 0; i < 5 && i < spec->val.size(); ++i) {
      const Sample& s = spec->val[i];
      OracleTarget t = oracle_discover(fix.model, s, c);
      ++n_checked;

      CHECK(t.best_loss <= t.base_loss + 1e-9);
      CHECK(t.label == s.domain);
      CHECK(t.single_losses.size() == 2);
      CHECK(std::is_sorted(t.discovered.begin(), t.discovered.end()));

      // greedy must come close to the full 2^n search
      auto [ex_set, ex_loss] = exhaustive_best_combo(fix.model, s, c.domains);
      CHECK(t.best_loss <= ex_loss + 0.02);

      if (std::find(t.discovered.begin(), t.discovered.end(), s.domain) !=
          t.discovered.end()) {
        ++discovered_own;
      }
    }
  }
  // the stacks were genuinely trained, so discovery has to pick the owning
  // domain for a clear majority of its own prompts
  CHECK(n_checked == 10);
  CHECK(discovered_own >= 7);
}

TEST_CASE("targets blend the discovered set with the nominal label") {
  auto& fix = oracle_fix();
  RouterConfig c = base_rcfg();

  bool saw_full_agreement = false;
  for (size_t i = 0; i < 6 && i < fix.fmt.val.size(); ++i) {
    const Sample& s = fix.fmt.val[i];
    OracleTarget t = oracle_discover(fix.model, s, c);
    REQUIRE(t.target.size() == 2);
    for (size_t d = 0; d < c.domains.size(); ++d) {
      const bool in_disc =
          std::find(t.discovered.begin(), t.discovered.end(), c.domains[d]) !=
          t.discovered.end();
      const float expect = (in_disc ? c.target_blend_discovered : 0.0f) +
                           (c.domains[d] == s.domain ? c.target_blend_label
                                                     : 0.0f);
      CHECK(t.target[d] == doctest::Approx(expect).epsilon(1e-6));
    }
    if (t.discovered == std::vector<std::string>{"format"}) {
      saw_full_agreement = true;
      CHECK(t.target[0] == doctest::Approx(1.0f));
      CHECK(t.target[1] == doctest::Approx(0.0f));
    }
  }
  CHECK(saw_full_agreement);
}

TEST_CASE("the soft boost mirrors a measured improvement") {
  auto& fix = oracle_fix();
  RouterConfig c = base_rcfg();
  c.soft_boost_domain = "procedural";

  for (size_t i = 0; i < 6 && i < fix.fmt.val.size(); ++i) {
    const Sample& s = fix.fmt.val[i];
    OracleTarget t = oracle_discover(fix.model, s, c);
    const bool already =
        std::find(t.discovered.begin(), t.discovered.end(), "procedural") !=
        t.discovered.end();
    if (already) continue;

    // recompute the condition with plain gated evaluation
    std::vector<std::string> trial = t.discovered;
    trial.push_back("procedural");
    const bool helps = routed_loss(fix.model, s, trial) < t.best_loss;
    const float disc_part = helps ? c.soft_boost_target : 0.0f;
    const float expect = c.target_blend_discovered * disc_part +
                         (s.domain == "procedural" ? c.target_blend_label
                                                   : 0.0f);
    CHECK(t.target[1] == doctest::Approx(expect).epsilon(1e-6));
  }
}

TEST_CASE("discovery insists on frozen stacks for every routed domain") {
  auto& fix = oracle_fix();
  RouterConfig c = base_rcfg();
  c.domains.push_back("arithmetic");  // never trained in this fixture
  CHECK_THROWS_AS(oracle_discover(fix.model, fix.fmt.val[0], c), StateError);

  std::vector<std::string> huge(17, "d");
  CHECK_THROWS_AS(exhaustive_best_combo(fix.model, fix.fmt.val[0], huge),
                  ArgumentError);
}

TEST_CASE("oracle cache roundtrips, survives corruption, and keys on the set") {
  auto& fix = oracle_fix();
  RouterConfig c = base_rcfg();
  const std::string dir = "/tmp/moestack_test_oracle_cache";
  fs::remove_all(dir);

  const Sample& s = fix.fmt.val[0];
  OracleTarget t1;
  {
    OracleCache cache(dir, c.domains);
    t1 = oracle_discover(fix.model, s, c, &cache);
    CHECK(cache.dropped_lines() == 0);
  }

  // a brand-new instance reads the file back
  {
    OracleCache cache(dir, c.domains);
    auto hit = cache.lookup(s.domain, s.id);
    REQUIRE(hit.has_value());
    CHECK(hit->prompt_id == t1.prompt_id);
    CHECK(hit->discovered == t1.discovered);
    CHECK(hit->base_loss == doctest::Approx(t1.base_loss).epsilon(1e-12));
    CHECK(hit->best_loss == doctest::Approx(t1.best_loss).epsilon(1e-12));
    REQUIRE(hit->target.size() == t1.target.size());
    for (size_t i = 0; i < t1.target.size(); ++i) {
      CHECK(hit->target[i] == t1.target[i]);
    }
    // and discover() short-circuits to the cached record
    OracleTarget t2 = oracle_discover(fix.model, s, c, &cache);
    CHECK(t2.cached_at == t1.cached_at);
    CHECK(t2.best_loss == hit->best_loss);
  }

  // one mangled line is dropped with a warning; the good line survives
  {
    std::string file;
    for (const auto& e : fs::directory_iterator(dir)) {
      file = e.path().string();
    }
    REQUIRE(!file.empty());
    std::ofstream app(file, std::ios::app);
    app << "{this is not json\n";
    app.close();

    OracleCache cache(dir, c.domains);
    auto hit = cache.lookup(s.domain, s.id);
    REQUIRE(hit.has_value());
    CHECK(cache.dropped_lines() == 1);
  }

  // a different installed-domain set maps to a different file
  {
    OracleCache cache(dir, {"format"});
    CHECK(!cache.lookup(s.domain, s.id).has_value());
  }
}

// ==== samples and splits ====

TEST_CASE("building samples joins oracles by prompt id") {
  auto& fix = oracle_fix();
  RouterConfig c = base_rcfg();

  std::vector<Sample> data(fix.fmt.val.begin(), fix.fmt.val.begin() + 3);
  std::vector<OracleTarget> oracles;
  for (const auto& s : data) {
    OracleTarget t;
    t.prompt_id = s.id;
    t.label = s.domain;
    t.discovered = {"format"};
    t.target = {1.0f, 0.0f};
    oracles.push_back(t);
  }

  auto rs = build_router_samples(fix.model, data, oracles, c);
  REQUIRE(rs.size() == 3);
  for (size_t i = 0; i < rs.size(); ++i) {
    CHECK(rs[i].prompt_id == data[i].id);
    CHECK(rs[i].label == "format");
    CHECK(rs[i].target == std::vector<float>{1.0f, 0.0f});
    CHECK(!rs[i].mixed());
    Tensor want = encode_prompt(fix.model, encode_bytes(data[i].prompt), c);
    REQUIRE(rs[i].features.shape() == want.shape());
    for (int64_t j = 0; j < want.numel(); ++j) {
      CHECK(rs[i].features.ptr()[j] == want.ptr()[j]);
    }
  }

  oracles.pop_back();
  CHECK_THROWS_AS(build_router_samples(fix.model, data, oracles, c),
                  ArgumentError);
}

TEST_CASE("the split keeps duplicated prompts on one side") {
  RouterConfig c = syn_cfg();
  Rng rng(5);
  std::vector<RouterSample> samples;
  for (int i = 0; i < 30; ++i) {
    samples.push_back(syn_sample({i % 3}, i % 3, i, rng, c));
  }
  // duplicate ten prompts under fresh ids
  for (int i = 0; i < 10; ++i) {
    RouterSample dup = samples[size_t(i)];
    dup.prompt_id = uint64_t(100 + i);
    samples.push_back(dup);
  }

  auto [train, val] = split_router_samples(samples, 0.25, 17);
  CHECK(train.size() + val.size() == samples.size());
  CHECK(!train.empty());
  CHECK(!val.empty());
  CHECK_NOTHROW(verify_no_leakage(train, val));

  // same seed, same split; membership is decided by prompt text
  auto [train2, val2] = split_router_samples(samples, 0.25, 17);
  REQUIRE(train2.size() == train.size());
  for (size_t i = 0; i < train.size(); ++i) {
    CHECK(train2[i].prompt_id == train[i].prompt_id);
  }

  std::set<std::string> val_prompts;
  for (const auto& s : val) val_prompts.insert(s.prompt);
  for (const auto& s : train) CHECK(!val_prompts.count(s.prompt));
}

TEST_CASE("leakage between router splits is a hard error") {
  RouterConfig c = syn_cfg();
  Rng rng(5);
  std::vector<RouterSample> a{syn_sample({0}, 0, 1, rng, c)};
  std::vector<RouterSample> b{syn_sample({1}, 1, 2, rng, c)};
  CHECK_NOTHROW(verify_no_leakage(a, b));
  b.push_back(a[0]);
  CHECK_THROWS_AS(verify_no_leakage(a, b), LeakageError);
  CHECK_THROWS_AS(split_router_samples(a, 0.0, 1), ArgumentError);
}

// ==== training ====

TEST_CASE("the router learns cleanly separable features") {
  RouterConfig c = syn_cfg();
  auto samples = syn_corpus(c, 101);
  Rng rng(77);
  RouterNet net = RouterNet::init(c, kSynDim, rng);

  RouterMetrics m = train_router(net, samples, c);
  CHECK(m.train_samples + m.val_samples == int64_t(samples.size()));
  CHECK(m.best_epoch >= 0);
  CHECK(int(m.epoch_composites.size()) == c.epochs);
  CHECK(m.top1 >= 0.9);
  CHECK(m.set_match >= 0.75);
  CHECK(m.val_bce < 0.45);
  CHECK(m.composite ==
        doctest::Approx(composite_score(m.top1, m.set_match, m.val_bce, c)));
  CHECK(*std::max_element(m.epoch_composites.begin(),
                          m.epoch_composites.end()) ==
        doctest::Approx(m.composite));

  // the net holds the checkpointed weights, so re-scoring the same val
  // split reproduces the reported metrics exactly
  auto [tr, va] = split_router_samples(samples, c.val_fraction, c.seed);
  RoutingStats st = routing_stats(net, va, c);
  CHECK(st.single_top1 == doctest::Approx(m.top1));
  CHECK(st.mixed_set_match == doctest::Approx(m.set_match));
}

TEST_CASE("shuffled labels leave the router near chance") {
  RouterConfig c = syn_cfg();
  auto samples = syn_corpus(c, 202, /*with_mixed=*/false);
  Rng shuffle(55);
  for (auto& s : samples) {
    const size_t d = shuffle.below(3);
    s.label = c.domains[d];
    s.discovered = {s.label};
    s.target.assign(3, 0.0f);
    s.target[d] = 1.0f;
  }
  Rng rng(78);
  RouterNet net = RouterNet::init(c, kSynDim, rng);
  RouterMetrics m = train_router(net, samples, c);
  CHECK(m.top1 < 0.7);  // 3 domains, so chance sits near one third
}

TEST_CASE("training refuses domains with fewer than two prompts") {
  RouterConfig c = syn_cfg();
  Rng rng(5);
  std::vector<RouterSample> samples;
  for (int i = 0; i < 8; ++i) samples.push_back(syn_sample({0}, 0, i, rng, c));
  RouterNet net = RouterNet::init(c, kSynDim, rng);
  // beta and gamma have no prompts at all
  CHECK_THROWS_AS(train_router(net, samples, c), ArgumentError);
}

// ==== inference ====

TEST_CASE("the gate policy floors the chat domain before thresholding") {
  RouterConfig c = syn_cfg();  // chat = alpha, floor 0.20, threshold 0.12

  auto w = apply_gate_policy({0.05f, 0.50f, 0.119f}, c);
  CHECK(w.at("alpha") == 0.20f);  // floored first, so it survives the gate
  CHECK(w.at("beta") == 0.50f);
  CHECK(w.at("gamma") == 0.0f);

  // exactly at the threshold stays on; nothing is renormalized
  auto v = apply_gate_policy({0.15f, 0.13f, 0.12f}, c);
  CHECK(v.at("alpha") == 0.20f);
  CHECK(v.at("beta") == 0.13f);
  CHECK(v.at("gamma") == 0.12f);
  CHECK(v.at("alpha") + v.at("beta") + v.at("gamma") ==
        doctest::Approx(0.45f));

  CHECK_THROWS_AS(apply_gate_policy({0.5f, 0.5f}, c), ArgumentError);

  RouterConfig nochat = c;
  nochat.chat_domain.clear();
  auto u = apply_gate_policy({0.05f, 0.50f, 0.119f}, nochat);
  CHECK(u.at("alpha") == 0.0f);  // no floor to save it
}

TEST_CASE("routing a prompt returns a weight for every domain") {
  BaseModel m = fresh_base();
  RouterConfig c = base_rcfg();
  Rng rng(11);
  RouterNet net = RouterNet::init(c, m.config().d_model, rng);

  auto w = route(net, m, "say hello", c);
  REQUIRE(w.size() == 2);
  // a fresh net emits one half everywhere; both clear the threshold
  CHECK(w.at("format") == 0.5f);
  CHECK(w.at("procedural") == 0.5f);
}

TEST_CASE("routing stats threshold without the chat floor") {
  RouterConfig c = syn_cfg();
  Rng rng(3);
  RouterNet net = RouterNet::init(c, kSynDim, rng);  // all probs 0.5

  Rng srng(6);
  std::vector<RouterSample> eval_set;
  eval_set.push_back(syn_sample({0}, 0, 0, srng, c));
  eval_set.push_back(syn_sample({0}, 0, 1, srng, c));
  eval_set.push_back(syn_sample({1}, 1, 2, srng, c));
  eval_set.push_back(syn_sample({1}, 1, 3, srng, c));
  eval_set.push_back(syn_sample({0, 1}, 0, 4, srng, c));

  RoutingStats st = routing_stats(net, eval_set, c);
  CHECK(st.n_single == 4);
  CHECK(st.n_mixed == 1);
  // every probability is 0.5, so every domain activates on every prompt
  for (const auto& d : c.domains) {
    CHECK(st.activation_rate.at(d) == doctest::Approx(1.0));
  }
  CHECK(st.cross_domain_rate == doctest::Approx(1.0));
  // argmax ties resolve to the first domain
  CHECK(st.single_top1 == doctest::Approx(0.5));
  // the mixed prompt wants {alpha, beta} but gets all three
  CHECK(st.mixed_set_match == doctest::Approx(0.0));

  CHECK_THROWS_AS(routing_stats(net, {}, c), ArgumentError);

  nlohmann::json j = st.to_json();
  CHECK(j.at("n_single") == 4);
  CHECK(j.at("kind") == "routing_stats");
}

// ==== persistence ====

TEST_CASE("checkpoints roundtrip bitwise and reject damage") {
  RouterConfig c = syn_cfg();
  Rng rng(31);
  RouterNet net = RouterNet::init(c, kSynDim, rng);
  for (int64_t i = 0; i < 3; ++i) net.head_b().ptr()[i] = float(i) * 0.3f;

  const std::string dir = "/tmp/moestack_test_router_ckpt";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string path = dir + "/router.bin";
  save_router(path, net);

  RouterNet back = load_router(path);
  CHECK(back.content_hash() == net.content_hash());
  CHECK(back.d_model() == kSynDim);
  CHECK(back.config().domains == c.domains);
  CHECK(back.config().chat_floor == c.chat_floor);

  Rng frng(4);
  Tensor feats = Tensor::randn({5, kSynDim}, 1.0f, frng);
  NoGradGuard ng;
  Tensor p0 = net.forward(feats);
  Tensor p1 = back.forward(feats);
  for (int64_t i = 0; i < p0.numel(); ++i) CHECK(p0.ptr()[i] == p1.ptr()[i]);

  SUBCASE("a flipped payload byte is caught by the content hash") {
    auto size = fs::file_size(path);
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(std::streamoff(size - 6));
    char b = 0;
    f.read(&b, 1);
    b = char(b ^ 0x40);
    f.seekp(std::streamoff(size - 6));
    f.write(&b, 1);
    f.close();
    CHECK_THROWS_AS(load_router(path), CorruptionError);
  }

  SUBCASE("a truncated payload fails the structural check first") {
    auto bytes = fs::file_size(path);
    fs::resize_file(path, bytes - 8);
    CHECK_THROWS_AS(load_router(path), FormatError);
  }

  SUBCASE("a wrong kind is rejected before anything else") {
    std::vector<float> payload{1.0f, 2.0f};
    io::write_headered_atomic(path, {{"kind", "stack"}}, payload);
    CHECK_THROWS_AS(load_router(path), FormatError);
  }

  SUBCASE("a missing file is a storage error") {
    CHECK_THROWS_AS(load_router(dir + "/absent.bin"), StorageError);
  }
}
