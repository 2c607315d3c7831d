#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "moestack/graph.hpp"
#include "moestack/ops.hpp"
#include "moestack/optim.hpp"

using namespace moestack;
using namespace moestack::ops;

namespace {

// scalar f64 reference for one decoupled-weight-decay Adam trajectory
struct RefAdam {
  double m = 0.0, v = 0.0;
  int t = 0;
  double step(double p, double g, const AdamWConfig& c) {
    ++t;
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g * g;
    const double mhat = m / (1.0 - std::pow(double(c.beta1), t));
    const double vhat = v / (1.0 - std::pow(double(c.beta2), t));
    return p - c.lr * (mhat / (std::sqrt(vhat) + c.eps) + c.weight_decay * p);
  }
};

void set_grad(Tensor& t, const std::vector<float>& g) {
  t.zero_grad();
  t.accumulate_grad(std::span<const float>(g.data(), g.size()));
}

}  // namespace

TEST_CASE("adamw matches a scalar f64 reference over 50 steps") {
  AdamWConfig cfg;
  cfg.lr = 0.05f;
  cfg.weight_decay = 0.1f;
  Tensor p = Tensor::from_data({2}, {0.7f, -1.3f}, /*requires_grad=*/true);
  AdamW opt({{"p", p}}, cfg);

  RefAdam ref0, ref1;
  double r0 = 0.7, r1 = -1.3;
  Rng rng(9);
  for (int s = 0; s < 50; ++s) {
    const float g0 = float(rng.normal());
    const float g1 = float(rng.normal());
    set_grad(p, {g0, g1});
    opt.step();
    r0 = ref0.step(r0, g0, cfg);
    r1 = ref1.step(r1, g1, cfg);
    CHECK(double(p.data()[0]) == doctest::Approx(r0).epsilon(1e-5));
    CHECK(double(p.data()[1]) == doctest::Approx(r1).epsilon(1e-5));
  }
  CHECK(opt.steps_done() == 50);
}

TEST_CASE("weight decay is decoupled from the adaptive update") {
  // with zero gradient the adaptive term is exactly zero, so a step is a
  // pure multiplicative shrink by (1 - lr*wd)
  AdamWConfig cfg;
  cfg.lr = 0.1f;
  cfg.weight_decay = 0.5f;
  Tensor p = Tensor::from_data({1}, {2.0f}, true);
  AdamW opt({{"p", p}}, cfg);
  set_grad(p, {0.0f});
  opt.step();
  CHECK(p.data()[0] == doctest::Approx(2.0f * (1.0f - 0.1f * 0.5f)));
}

TEST_CASE("parameters without a gradient are skipped") {
  Tensor a = Tensor::from_data({1}, {1.0f}, true);
  Tensor b = Tensor::from_data({1}, {1.0f}, true);
  AdamW opt({{"a", a}, {"b", b}});
  set_grad(a, {1.0f});
  opt.step();
  CHECK(a.data()[0] != doctest::Approx(1.0f));
  CHECK(b.data()[0] == doctest::Approx(1.0f));  // untouched
}

TEST_CASE("non-finite gradient raises InstabilityError naming the parameter") {
  Tensor p = Tensor::from_data({1}, {1.0f}, true);
  AdamW opt({{"bad_param", p}});
  set_grad(p, {std::numeric_limits<float>::quiet_NaN()});
  try {
    opt.step();
    FAIL("expected InstabilityError");
  } catch (const InstabilityError& e) {
    CHECK(std::string(e.what()).find("bad_param") != std::string::npos);
  }
}

TEST_CASE("zero_grad clears accumulated gradients") {
  Tensor p = Tensor::from_data({2}, {1.0f, 2.0f}, true);
  AdamW opt({{"p", p}});
  set_grad(p, {3.0f, 4.0f});
  opt.zero_grad();
  // a second step sees no gradient, so the parameter stays put
  opt.step();
  CHECK(p.data()[0] == doctest::Approx(1.0f));
  CHECK(p.data()[1] == doctest::Approx(2.0f));
}

TEST_CASE("optimizer actually minimizes a quadratic through the tape") {
  Tensor p = Tensor::from_data({2}, {3.0f, -2.0f}, true);
  AdamW opt({{"p", p}}, {.lr = 0.1f, .weight_decay = 0.0f});
  for (int s = 0; s < 200; ++s) {
    opt.zero_grad();
    Tensor loss = sum(mul(p, p));
    backward(loss);
    opt.step();
  }
  CHECK(std::abs(p.data()[0]) < 1e-2f);
  CHECK(std::abs(p.data()[1]) < 1e-2f);
}

TEST_CASE("cosine schedule endpoints and midpoint") {
  CHECK(cosine_lr(0, 100, 1.0f, 0.1f) == doctest::Approx(1.0f));
  CHECK(cosine_lr(100, 100, 1.0f, 0.1f) == doctest::Approx(0.1f));
  CHECK(cosine_lr(250, 100, 1.0f, 0.1f) == doctest::Approx(0.1f));  // past end
  CHECK(cosine_lr(50, 100, 1.0f, 0.1f) == doctest::Approx(0.55f));
  CHECK(cosine_lr(7, 0, 1.0f, 0.1f) == doctest::Approx(1.0f));  // degenerate
  // monotone nonincreasing
  float prev = 2.0f;
  for (int s = 0; s <= 100; ++s) {
    const float lr = cosine_lr(s, 100, 1.0f, 0.1f);
    CHECK(lr <= prev + 1e-7f);
    prev = lr;
  }
}
