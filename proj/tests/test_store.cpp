#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "moestack/data.hpp"
#include "moestack/graph.hpp"
#include "moestack/io.hpp"
#include "moestack/store.hpp"

using namespace moestack;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 32;
  cfg.n_heads = 2;
  cfg.d_ff = 64;
  cfg.max_seq_len = 32;
  cfg.seed = 5;
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

void add_trained_stack(BaseModel& m, const std::string& domain, int round,
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

struct Fixture {
  std::string dir = "/tmp/moestack_test_store";
  BaseModel model;
  Manifest manifest;

  Fixture() {
    fs::remove_all(dir);
    fs::create_directories(dir);
    model = BaseModel::init(tiny_config());
    model.freeze_base();
    manifest.base_file = "base.bin";
    manifest.base_hash = hash_hex(model.base_hash());
    manifest.metadata = {{"seed", 42}};

    add_trained_stack(model, "alpha", 0, 100);
    add_trained_stack(model, "alpha", 1, 101);
    add_trained_stack(model, "beta", 0, 200);

    DomainBlock a, b;
    a.domain = "alpha";
    b.domain = "beta";
    for (auto [domain, round, block] :
         {std::tuple<const char*, int, DomainBlock*>{"alpha", 0, &a},
          {"alpha", 1, &a},
          {"beta", 0, &b}}) {
      const std::string file =
          std::string(domain) + "_" + std::to_string(round) + ".stack";
      save_stack(dir + "/" + file, model, domain, round);
      StackRecord rec;
      rec.round = round;
      rec.file = file;
      rec.byte_size = int64_t(fs::file_size(dir + "/" + file));
      rec.content_hash = load_stack(dir + "/" + file).content_hash;
      rec.val_loss = 1.0 + round * 0.1;
      rec.wall_seconds = 12.5;
      block->stacks.push_back(rec);
    }
    manifest.domains = {a, b};
  }
};

std::vector<float> logits_of(const BaseModel& m, const std::string& text) {
  NoGradGuard ng;
  auto r = m.forward(encode_bytes(text), false, nullptr);
  return {r.logits.data().begin(), r.logits.data().end()};
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("stack files round-trip byte-identically") {
  Fixture fx;
  const std::string p1 = fx.dir + "/alpha_0.stack";
  LoadedStack s = load_stack(p1);
  CHECK(s.domain == "alpha");
  CHECK(s.round == 0);
  CHECK(s.config.n_experts == 2);
  CHECK(s.by_site.size() == fx.model.n_sites());

  // install into a fresh model and write it again: bytes must match
  BaseModel fresh = BaseModel::init(tiny_config());
  install_stack(fresh, s);
  const std::string p2 = fx.dir + "/rewrite.stack";
  save_stack(p2, fresh, "alpha", 0);
  CHECK(read_file(p1) == read_file(p2));
}

TEST_CASE("loaded stacks reproduce the original logits bitwise") {
  Fixture fx;
  BaseModel fresh = BaseModel::init(tiny_config());
  fresh.freeze_base();
  install_stack(fresh, load_stack(fx.dir + "/alpha_0.stack"));
  install_stack(fresh, load_stack(fx.dir + "/alpha_1.stack"));
  install_stack(fresh, load_stack(fx.dir + "/beta_0.stack"));

  const auto a = logits_of(fx.model, "say hi\th");
  const auto b = logits_of(fresh, "say hi\th");
  CHECK(std::memcmp(a.data(), b.data(), sizeof(float) * a.size()) == 0);
}

TEST_CASE("stack file damage is detected before anything is built") {
  Fixture fx;
  const std::string path = fx.dir + "/alpha_0.stack";

  SUBCASE("single byte flip") {
    auto bytes = read_file(path);
    bytes[bytes.size() - 33] = char(bytes[bytes.size() - 33] ^ 0x08);
    std::ofstream(path, std::ios::binary) << bytes;
    CHECK_THROWS_AS(load_stack(path), CorruptionError);
  }
  SUBCASE("truncated payload") {
    fs::resize_file(path, fs::file_size(path) - 8);
    CHECK_THROWS_AS(load_stack(path), CorruptionError);
  }
  SUBCASE("wrong kind") {
    io::write_headered_atomic(path, {{"kind", "noodle"}}, {});
    CHECK_THROWS_AS(load_stack(path), FormatError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_stack(fx.dir + "/absent.stack"), StorageError);
  }
}

TEST_CASE("install refuses mismatched dimensions and installs nothing") {
  Fixture fx;
  ModelConfig other = tiny_config();
  other.d_model = 16;
  other.d_ff = 32;
  other.n_heads = 2;
  BaseModel small = BaseModel::init(other);
  LoadedStack s = load_stack(fx.dir + "/alpha_0.stack");
  CHECK_THROWS_AS(install_stack(small, s), ShapeError);
  for (size_t i = 0; i < small.n_sites(); ++i)
    CHECK(small.site(i).frozen().empty());

  // a stack missing one site is structurally invalid
  s.by_site.erase("L1.up_proj");
  BaseModel ok = BaseModel::init(tiny_config());
  CHECK_THROWS_AS(install_stack(ok, s), FormatError);
  for (size_t i = 0; i < ok.n_sites(); ++i) CHECK(ok.site(i).frozen().empty());
}

TEST_CASE("save_stack misuse raises state errors") {
  Fixture fx;
  CHECK_THROWS_AS(save_stack(fx.dir + "/x.stack", fx.model, "gamma", 0),
                  StateError);
  CHECK_THROWS_AS(save_stack(fx.dir + "/x.stack", fx.model, "alpha", 7),
                  StateError);
  fx.model.site(size_t(0)).frozen_mut()[0].delta.set_trainable(true);
  CHECK_THROWS_AS(save_stack(fx.dir + "/x.stack", fx.model, "alpha", 0),
                  StateError);
}

TEST_CASE("manifest round-trips and digests ignore timing") {
  Fixture fx;
  const std::string path = fx.dir + "/manifest.json";
  fx.manifest.save(path);
  Manifest m = Manifest::load(path);
  CHECK(m.base_hash == fx.manifest.base_hash);
  REQUIRE(m.domains.size() == 2);
  CHECK(m.domains[0].domain == "alpha");
  CHECK(m.domains[0].stacks.size() == 2);
  CHECK(m.domains[1].stacks[0].file == "beta_0.stack");
  CHECK(m.domains[0].stacks[1].val_loss == doctest::Approx(1.1));
  CHECK(m.has_domain("beta"));
  CHECK_FALSE(m.has_domain("gamma"));
  CHECK(m.digest() == fx.manifest.digest());

  Manifest timing = m;
  timing.domains[0].stacks[0].wall_seconds = 99.0;
  CHECK(timing.digest() == m.digest());  // timing excluded

  Manifest content = m;
  content.domains[0].stacks[0].val_loss += 0.5;
  CHECK(content.digest() != m.digest());

  CHECK_THROWS_AS(Manifest::from_json({{"kind", "other"}}), FormatError);
  CHECK_THROWS_AS(Manifest::load(fx.dir + "/nope.json"), StorageError);
}

TEST_CASE("resume reinstalls recorded stacks and names the next domain") {
  Fixture fx;
  const std::vector<std::string> planned = {"alpha", "beta", "gamma", "delta"};

  BaseModel fresh = BaseModel::init(tiny_config());
  fresh.freeze_base();
  const std::string pending = resume(fx.manifest, fresh, fx.dir, planned);
  CHECK(pending == "gamma");
  CHECK(fresh.frozen_domains() == std::set<std::string>{"alpha", "beta"});

  const auto a = logits_of(fx.model, "dup(ab)\ta");
  const auto b = logits_of(fresh, "dup(ab)\ta");
  CHECK(std::memcmp(a.data(), b.data(), sizeof(float) * a.size()) == 0);

  // empty manifest: nothing installed, first planned domain pending
  Manifest empty;
  empty.base_hash = hash_hex(fresh.base_hash());
  BaseModel bare = BaseModel::init(tiny_config());
  CHECK(resume(empty, bare, fx.dir, planned) == "alpha");
  CHECK(bare.frozen_domains().empty());

  // a fully covered plan pends nothing
  BaseModel done = BaseModel::init(tiny_config());
  CHECK(resume(fx.manifest, done, fx.dir, {"alpha", "beta"}) == "");
}

TEST_CASE("resume refuses the wrong base or a tampered record") {
  Fixture fx;
  ModelConfig cfg = tiny_config();
  cfg.seed = 99;  // different base weights
  BaseModel other = BaseModel::init(cfg);
  CHECK_THROWS_AS(resume(fx.manifest, other, fx.dir, {"alpha"}),
                  IncompatibilityError);

  Manifest bad = fx.manifest;
  bad.domains[0].stacks[0].content_hash = "00000000deadbeef";
  BaseModel fresh = BaseModel::init(tiny_config());
  CHECK_THROWS_AS(resume(bad, fresh, fx.dir, {"alpha"}), CorruptionError);

  Manifest missing = fx.manifest;
  missing.domains[0].stacks[0].file = "gone.stack";
  BaseModel fresh2 = BaseModel::init(tiny_config());
  try {
    (void)resume(missing, fresh2, fx.dir, {"alpha"});
    FAIL("expected StorageError");
  } catch (const StorageError& e) {
    CHECK(std::string(e.what()).find("alpha:0") != std::string::npos);
  }
}

TEST_CASE("lazy loading counts hits and misses per the gating weights") {
  Fixture fx;
  StackCache cache(fx.dir, fx.manifest, /*capacity=*/8);

  auto r1 = cache.lazy_load({{"alpha", 1.0f}});
  CHECK(r1.misses == 2);
  CHECK(r1.hits == 0);
  REQUIRE(r1.events.size() == 2);
  CHECK_FALSE(r1.events[0].hit);

  // consecutive same-domain prompt: all hits, zero seconds
  auto r2 = cache.lazy_load({{"alpha", 0.4f}});
  CHECK(r2.misses == 0);
  CHECK(r2.hits == 2);
  for (const auto& e : r2.events) {
    CHECK(e.hit);
    CHECK(e.seconds == 0.0);
  }

  // zero and absent weights never load
  auto r3 = cache.lazy_load({{"alpha", 1.0f}, {"beta", 0.0f}});
  CHECK(r3.misses == 0);
  CHECK(r3.hits == 2);
  CHECK(cache.resident_keys() ==
        std::vector<std::string>{"alpha:0", "alpha:1"});

  auto r4 = cache.lazy_load({{"beta", 0.2f}});
  CHECK(r4.misses == 1);
  CHECK(cache.resident_keys().back() == "beta:0");
}

TEST_CASE("capacity pressure evicts the least recently used stack") {
  Fixture fx;
  StackCache cache(fx.dir, fx.manifest, /*capacity=*/2);
  (void)cache.lazy_load({{"alpha", 1.0f}});  // alpha:0, alpha:1 resident
  auto r = cache.lazy_load({{"beta", 1.0f}});
  CHECK(r.misses == 1);
  REQUIRE(r.evicted.size() == 1);
  CHECK(r.evicted[0] == "alpha:0");  // loaded before alpha:1, so LRU
  auto keys = cache.resident_keys();
  REQUIRE(keys.size() == 2);
  CHECK(keys == std::vector<std::string>{"alpha:1", "beta:0"});
  CHECK(cache.eviction_log() == std::vector<std::string>{"alpha:0"});

  CHECK_THROWS_AS(StackCache(fx.dir, fx.manifest, 0), ArgumentError);
}

TEST_CASE("cache report matches the contract arithmetic") {
  Fixture fx;
  StackCache cache(fx.dir, fx.manifest, 8);
  CHECK_THROWS_AS(cache_report(cache), StateError);

  // ten prompts of the same two-stack domain: 2 misses then 18 hits
  for (int i = 0; i < 10; ++i) (void)cache.lazy_load({{"alpha", 1.0f}});
  CacheReport rep = cache_report(cache);
  CHECK(rep.hits == 18);
  CHECK(rep.misses == 2);
  CHECK(rep.hit_rate == doctest::Approx(0.9));
  CHECK(rep.requests == 10);
  CHECK(rep.timeline.size() == 10);
  CHECK(rep.mean_load_seconds >= 0.0);
  CHECK(rep.evictions.empty());
}

TEST_CASE("alternating domains with room for both reach a perfect hit rate") {
  Fixture fx;
  StackCache cache(fx.dir, fx.manifest, 4);
  (void)cache.lazy_load({{"alpha", 1.0f}});
  (void)cache.lazy_load({{"beta", 1.0f}});
  const int64_t warm_misses = cache.misses();
  for (int i = 0; i < 6; ++i) {
    (void)cache.lazy_load({{i % 2 == 0 ? "alpha" : "beta", 1.0f}});
  }
  CHECK(cache.misses() == warm_misses);  // everything after warmup hits
}

TEST_CASE("sync_model mirrors the resident set into the model") {
  Fixture fx;
  StackCache cache(fx.dir, fx.manifest, 8);
  BaseModel fresh = BaseModel::init(tiny_config());
  fresh.freeze_base();

  (void)cache.lazy_load({{"alpha", 1.0f}});
  cache.sync_model(fresh);
  CHECK(fresh.frozen_domains() == std::set<std::string>{"alpha"});

  (void)cache.lazy_load({{"beta", 1.0f}});
  cache.sync_model(fresh);
  CHECK(fresh.frozen_domains() == std::set<std::string>{"alpha", "beta"});
  // with everything resident the synced model matches the original
  const auto a = logits_of(fx.model, "1+2=?\t=");
  const auto b = logits_of(fresh, "1+2=?\t=");
  CHECK(std::memcmp(a.data(), b.data(), sizeof(float) * a.size()) == 0);

  StackCache tight(fx.dir, fx.manifest, 1);
  (void)tight.lazy_load({{"beta", 1.0f}});
  tight.sync_model(fresh);
  CHECK(fresh.frozen_domains() == std::set<std::string>{"beta"});
}
