#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "moestack/graph.hpp"
#include "moestack/moe.hpp"
#include "oracle_ref.hpp"

using namespace moestack;
using namespace moestack::ops;

namespace {

MoELoRADelta make_delta(const MoEConfig& cfg, int64_t d_in, int64_t d_out,
                        uint64_t seed, bool randomize_b = false) {
  Rng rng(seed);
  MoELoRADelta d = MoELoRADelta::init(cfg, d_in, d_out, rng);
  if (randomize_b) {
    Rng r2(seed ^ 0x5555);
    float* b = d.b().ptr();
    for (int64_t i = 0; i < d.b().numel(); ++i)
      b[i] = float(r2.normal() * 0.2);
  }
  return d;
}

// f64 reference of the full eval-mode forward: noisefree routing, top-k
// masked softmax, scaled expert contraction, gated combine, summed
double ref_forward_sum(const refmath::dvec& a, const refmath::dvec& b,
                       const refmath::dvec& wr, const refmath::dvec& x,
                       const MoEConfig& cfg, int64_t t, int64_t d_in,
                       int64_t d_out) {
  const int64_t n = cfg.n_experts;
  const auto logits = refmath::matmul(x, t, d_in, wr, n);
  refmath::dvec gates(size_t(t * n), 0.0);
  for (int64_t ti = 0; ti < t; ++ti) {
    refmath::dvec row(logits.begin() + ti * n, logits.begin() + (ti + 1) * n);
    const auto idx = refmath::topk_indices(row, cfg.top_k);
    double m = -std::numeric_limits<double>::infinity();
    for (int64_t i : idx) m = std::max(m, row[size_t(i)]);
    double z = 0.0;
    for (int64_t i : idx) z += std::exp(row[size_t(i)] - m);
    for (int64_t i : idx)
      gates[size_t(ti * n + i)] = std::exp(row[size_t(i)] - m) / z;
  }
  const auto expert = refmath::batched_contract(
      x, t, d_in, a, n, cfg.rank, b, d_out, double(cfg.scale()));
  const auto out = refmath::gate_combine(gates, t, n, expert, d_out);
  double s = 0.0;
  for (double v : out) s += v;
  return s;
}

}  // namespace

TEST_CASE("a freshly initialized delta is an exact no-op") {
  MoEConfig cfg;
  for (auto [d_in, d_out] : {std::pair<int64_t, int64_t>{64, 64}, {64, 256},
                             {256, 64}}) {
    MoELoRADelta d = make_delta(cfg, d_in, d_out, 7);
    Rng data_rng(11);
    Tensor x = Tensor::randn({12, d_in}, 1.0f, data_rng);
    auto [out, rec] = d.forward(x, false, nullptr);
    float max_abs = 0.0f;
    for (float v : out.data()) max_abs = std::max(max_abs, std::abs(v));
    CHECK(max_abs < 1e-6f);
    // the A matrices themselves are not zero; only B gates the output
    float a_abs = 0.0f;
    for (float v : d.a().data()) a_abs = std::max(a_abs, std::abs(v));
    CHECK(a_abs > 1e-3f);
  }
}

TEST_CASE("gates have exactly top_k positive entries summing to 1") {
  MoEConfig cfg;
  cfg.n_experts = 6;
  cfg.top_k = 3;
  MoELoRADelta d = make_delta(cfg, 32, 32, 3);
  Rng data_rng(5), noise_rng(17);
  for (bool train : {false, true}) {
    Tensor x = Tensor::randn({64, 32}, 1.0f, data_rng);
    auto [gates, rec] = d.route(x, train, train ? &noise_rng : nullptr);
    REQUIRE(gates.dim(0) == 64);
    REQUIRE(gates.dim(1) == 6);
    auto g = gates.data();
    for (int64_t t = 0; t < 64; ++t) {
      int positive = 0;
      double row = 0.0;
      for (int64_t e = 0; e < 6; ++e) {
        const float v = g[t * 6 + e];
        CHECK(v >= 0.0f);
        if (v > 0.0f) ++positive;
        row += v;
      }
      CHECK(positive == 3);
      CHECK(row == doctest::Approx(1.0).epsilon(1e-5));
    }
    CHECK(rec.tokens == 64);
  }
}

TEST_CASE("eval routing is deterministic, train routing is noise-driven") {
  MoEConfig cfg;
  MoELoRADelta d = make_delta(cfg, 16, 16, 21);
  Rng data_rng(2);
  Tensor x = Tensor::randn({8, 16}, 1.0f, data_rng);

  auto [g1, r1] = d.route(x, false, nullptr);
  auto [g2, r2] = d.route(x, false, nullptr);
  CHECK(std::memcmp(g1.data().data(), g2.data().data(),
                    sizeof(float) * size_t(g1.numel())) == 0);

  // same noise stream -> same gates; the draw is consumed from the rng
  Rng n1(77), n2(77);
  auto [t1, tr1] = d.route(x, true, &n1);
  auto [t2, tr2] = d.route(x, true, &n2);
  CHECK(std::memcmp(t1.data().data(), t2.data().data(),
                    sizeof(float) * size_t(t1.numel())) == 0);

  CHECK_THROWS_AS((void)d.route(x, true, nullptr), ArgumentError);
  Tensor empty = Tensor::zeros({0, 16});
  CHECK_THROWS_AS((void)d.route(empty, false, nullptr), ArgumentError);
}

TEST_CASE("balance loss anchors: uniform routing gives 1, collapse gives N") {
  // craft router weights so logits equal the input rows exactly
  MoEConfig cfg;
  cfg.n_experts = 4;
  cfg.top_k = 2;
  MoELoRADelta d = make_delta(cfg, 4, 4, 1);
  float* wr = d.router_weight().ptr();
  std::fill(wr, wr + 16, 0.0f);
  for (int i = 0; i < 4; ++i) wr[i * 4 + i] = 1.0f;  // identity

  SUBCASE("rotating two-hot logits are perfectly balanced") {
    std::vector<float> rows;
    for (int t = 0; t < 8; ++t) {
      for (int e = 0; e < 4; ++e) {
        const bool hot = (e == t % 4) || (e == (t + 1) % 4);
        rows.push_back(hot ? 12.0f : 0.0f);
      }
    }
    Tensor x = Tensor::from_data({8, 4}, rows);
    auto [gates, rec] = d.route(x, false, nullptr);
    CHECK(rec.aux_value == doctest::Approx(1.0).epsilon(1e-3));
    for (int e = 0; e < 4; ++e) {
      CHECK(rec.dispatch_fraction[e] == doctest::Approx(0.25));
      CHECK(rec.mean_gate[e] == doctest::Approx(0.25).epsilon(1e-3));
    }
  }

  SUBCASE("all tokens on one expert with top_k=1 gives N") {
    MoEConfig c1 = cfg;
    c1.top_k = 1;
    MoELoRADelta d1 = make_delta(c1, 4, 4, 1);
    float* w = d1.router_weight().ptr();
    std::fill(w, w + 16, 0.0f);
    for (int i = 0; i < 4; ++i) w[i * 4 + 2] = 5.0f;  // every row -> expert 2
    Rng data_rng(3);
    Tensor x = Tensor::uniform({10, 4}, 0.5f, 1.5f, data_rng);
    auto [gates, rec] = d1.route(x, false, nullptr);
    CHECK(rec.aux_value == doctest::Approx(4.0).epsilon(1e-3));
    CHECK(rec.dispatch_fraction[2] == doctest::Approx(1.0));
  }
}

TEST_CASE("balance loss gradient pushes the router toward balance") {
  MoEConfig cfg;
  MoELoRADelta d = make_delta(cfg, 8, 8, 13);
  Rng data_rng(4);
  Tensor x = Tensor::randn({16, 8}, 1.0f, data_rng);
  auto [gates, rec] = d.route(x, false, nullptr);
  backward(rec.aux);
  auto g = d.router_weight().grad();
  double norm = 0.0;
  for (float v : g) norm += double(v) * v;
  CHECK(norm > 0.0);  // differentiable through mean_prob
}

TEST_CASE("forward matches the dense reference composition") {
  MoEConfig cfg;
  cfg.n_experts = 3;
  cfg.top_k = 2;
  cfg.rank = 4;
  cfg.alpha = 4.0f;
  const int64_t t = 6, d_in = 10, d_out = 7;
  MoELoRADelta d = make_delta(cfg, d_in, d_out, 31, /*randomize_b=*/true);
  Rng data_rng(8);
  Tensor x = Tensor::randn({t, d_in}, 1.0f, data_rng);
  auto [out, rec] = d.forward(x, false, nullptr);
  auto [gates, rec2] = d.route(x, false, nullptr);

  const auto xr = refmath::to_dvec(x);
  const auto ar = refmath::to_dvec(d.a());
  const auto br = refmath::to_dvec(d.b());
  const auto gr = refmath::to_dvec(gates);
  const auto expert =
      refmath::batched_contract(xr, t, d_in, ar, cfg.n_experts, cfg.rank, br,
                                d_out, double(cfg.scale()));
  const auto want =
      refmath::gate_combine(gr, t, cfg.n_experts, expert, d_out);
  const auto got = refmath::to_dvec(out);
  CHECK(refmath::max_rel_err(got, want) < 1e-4);
}

TEST_CASE("gradients through routing and expert mixing pass finite differences") {
  MoEConfig cfg;
  cfg.n_experts = 4;
  cfg.top_k = 2;
  cfg.rank = 3;
  cfg.alpha = 3.0f;
  const int64_t t = 5, d_in = 6, d_out = 4;
  int checked = 0;
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    MoELoRADelta d = make_delta(cfg, d_in, d_out, seed, true);
    Rng data_rng(seed + 100);
    Tensor x = Tensor::randn({t, d_in}, 1.0f, data_rng, /*requires_grad=*/true);

    auto [out, rec] = d.forward(x, false, nullptr);
    Tensor loss = sum(out);
    backward(loss);

    // central differences through an f64 reference forward; the f32
    // implementation's gradients must agree to 1e-4 relative
    refmath::dvec av = refmath::to_dvec(d.a());
    refmath::dvec bv = refmath::to_dvec(d.b());
    refmath::dvec wv = refmath::to_dvec(d.router_weight());
    refmath::dvec xv = refmath::to_dvec(x);
    const double h = 1e-5;
    auto fd_check = [&](Tensor p, refmath::dvec& vals) {
      REQUIRE(p.has_grad());
      auto grad = p.grad();
      for (int64_t i = 0; i < p.numel();
           i += std::max<int64_t>(1, p.numel() / 7)) {
        const double keep = vals[size_t(i)];
        vals[size_t(i)] = keep + h;
        const double up =
            ref_forward_sum(av, bv, wv, xv, cfg, t, d_in, d_out);
        vals[size_t(i)] = keep - h;
        const double dn =
            ref_forward_sum(av, bv, wv, xv, cfg, t, d_in, d_out);
        vals[size_t(i)] = keep;
        const double fd = (up - dn) / (2.0 * h);
        const double an = double(grad[i]);
        const double denom = std::max({std::abs(fd), std::abs(an), 1.0});
        CHECK(std::abs(fd - an) / denom < 1e-4);
        ++checked;
      }
    };
    fd_check(d.a(), av);
    fd_check(d.b(), bv);
    fd_check(d.router_weight(), wv);
    fd_check(x, xv);
  }
  CHECK(checked > 200);
}

TEST_CASE("single-expert configuration has no router and a unit gate") {
  MoEConfig cfg;
  cfg.n_experts = 1;
  cfg.top_k = 1;
  cfg.rank = 8;
  cfg.alpha = 8.0f;
  MoELoRADelta d = make_delta(cfg, 12, 12, 9);
  CHECK_FALSE(d.router_weight().defined());
  CHECK_FALSE(d.noise_weight().defined());
  Rng data_rng(6);
  Tensor x = Tensor::randn({5, 12}, 1.0f, data_rng);
  auto [gates, rec] = d.route(x, true, nullptr);  // no rng needed: no noise
  for (float g : gates.data()) CHECK(g == 1.0f);
  CHECK(rec.aux_value == doctest::Approx(1.0));
  CHECK(d.param_count() == 1 * 8 * (12 + 12));
}

TEST_CASE("parameter count covers experts plus routing") {
  MoEConfig cfg;  // N=4 K=2 r=8
  MoELoRADelta d = make_delta(cfg, 64, 256, 2);
  const int64_t expected = 4 * 8 * (64 + 256) + 2 * 64 * 4;
  CHECK(d.param_count() == expected);
  auto named = d.named_params("L0.up_proj");
  REQUIRE(named.size() == 4);
  CHECK(named[0].first == "L0.up_proj.A");
  int64_t total = 0;
  for (auto& [n, p] : named) total += p.numel();
  CHECK(total == expected);
}

TEST_CASE("clone is deep and copy_values_from enforces shape") {
  MoEConfig cfg;
  MoELoRADelta d = make_delta(cfg, 8, 8, 44, true);
  MoELoRADelta c = d.clone();
  CHECK(c.content_hash() == d.content_hash());
  c.a().ptr()[0] += 1.0f;
  CHECK(c.content_hash() != d.content_hash());
  CHECK(d.a().data()[0] != c.a().data()[0]);

  d.copy_values_from(c);
  CHECK(d.content_hash() == c.content_hash());

  MoELoRADelta other = make_delta(cfg, 8, 16, 44);
  CHECK_THROWS_AS(d.copy_values_from(other), ShapeError);
}

TEST_CASE("set_trainable gates gradient flow") {
  MoEConfig cfg;
  MoELoRADelta d = make_delta(cfg, 8, 8, 4, true);
  d.set_trainable(false);
  Rng data_rng(1);
  Tensor x = Tensor::randn({4, 8}, 1.0f, data_rng);
  auto [out, rec] = d.forward(x, false, nullptr);
  backward(sum(out));
  CHECK_FALSE(d.a().has_grad());
  CHECK_FALSE(d.b().has_grad());
  d.set_trainable(true);
  auto [out2, rec2] = d.forward(x, false, nullptr);
  backward(sum(out2));
  CHECK(d.b().has_grad());
}

TEST_CASE("config validation rejects nonsense") {
  MoEConfig bad;
  bad.top_k = 9;  // > n_experts
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = MoEConfig{};
  bad.rank = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = MoEConfig{};
  bad.n_experts = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}
