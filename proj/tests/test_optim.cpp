#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "celldino/optim.hpp"
#include "celldino/params.hpp"
#include "celldino/rng.hpp"

using namespace celldino;
using Catch::Approx;

namespace {

ParamStore<double> single_param(double value, Shape shape = {4}) {
  ParamStore<double> ps;
  ps.add("w", shape);
  ps[0].value.fill(value);
  return ps;
}

}  // namespace

TEST_CASE("adamw decoupled weight decay with zero gradient") {
  auto ps = single_param(1.0);
  AdamW<double> opt({1e-4, 0.04, 0.9, 0.999, 1e-8});
  opt.attach(ps);
  opt.step(ps);  // grads are zero
  for (std::int64_t i = 0; i < ps[0].value.numel(); ++i)
    REQUIRE(ps[0].value[i] == Approx(0.999996).margin(1e-12));
  REQUIRE(opt.step_count() == 1);
}

TEST_CASE("adamw with zero gradient and zero decay is the identity") {
  auto ps = single_param(0.731);
  AdamW<double> opt({1e-3, 0.0, 0.9, 0.999, 1e-8});
  opt.attach(ps);
  for (int i = 0; i < 5; ++i) opt.step(ps);
  for (std::int64_t i = 0; i < ps[0].value.numel(); ++i)
    REQUIRE(ps[0].value[i] == 0.731);
  REQUIRE(opt.step_count() == 5);
}

TEST_CASE("adamw first step moves by about lr in the gradient direction") {
  auto ps = single_param(1.0, {1});
  ps[0].grad[0] = 0.37;
  AdamW<double> opt({1e-4, 0.0, 0.9, 0.999, 1e-8});
  opt.attach(ps);
  opt.step(ps);
  // bias-corrected first step: w -= lr * g / (|g| + eps)
  REQUIRE(ps[0].value[0] == Approx(1.0 - 1e-4).margin(1e-9));

  auto ps2 = single_param(1.0, {1});
  ps2[0].grad[0] = -0.004;
  AdamW<double> opt2({1e-4, 0.0, 0.9, 0.999, 1e-8});
  opt2.attach(ps2);
  opt2.step(ps2);
  REQUIRE(ps2[0].value[0] == Approx(1.0 + 1e-4).margin(1e-8));
}

TEST_CASE("schedule boundaries and midpoint") {
  Schedule s{ScheduleKind::CosineAnnealing, 5e-4, 1e-6, 1000};
  REQUIRE(s.value(0) == 5e-4);
  REQUIRE(s.value(1000) == 1e-6);
  REQUIRE(s.value(500) == Approx((5e-4 + 1e-6) / 2.0).margin(1e-15));
  REQUIRE_THROWS_AS(s.value(-1), ConfigError);
  REQUIRE_THROWS_AS(s.value(1001), ConfigError);

  // monotone decrease for annealing
  double prev = s.value(0);
  for (int t = 1; t <= 1000; ++t) {
    const double v = s.value(t);
    REQUIRE(v <= prev + 1e-18);
    prev = v;
  }

  Schedule ramp{ScheduleKind::CosineRamp, 0.996, 1.0, 100};
  REQUIRE(ramp.value(0) == 0.996);
  REQUIRE(ramp.value(100) == 1.0);
  prev = ramp.value(0);
  for (int t = 1; t <= 100; ++t) {
    const double v = ramp.value(t);
    REQUIRE(v >= prev - 1e-18);
    prev = v;
  }
}

TEST_CASE("warmup cosine ramps linearly then anneals") {
  WarmupCosine wc{5e-4, 1e-6, 100, 1000};
  REQUIRE(wc.value(0) == Approx(5e-6));
  REQUIRE(wc.value(99) == Approx(5e-4));
  REQUIRE(wc.value(100) == Approx(5e-4));
  REQUIRE(wc.value(1000) == Approx(1e-6));
  REQUIRE(wc.value(550) == Approx((5e-4 + 1e-6) / 2.0).margin(1e-12));
}

TEST_CASE("ema_update is a convex combination") {
  ParamStore<double> t, s;
  t.add("a", {3});
  s.add("a", {3});
  t[0].value.fill(1.0);
  s[0].value.fill(0.0);

  ema_update(t, s, 0.9);
  REQUIRE(t[0].value[0] == Approx(0.9).margin(1e-15));

  ema_update(t, s, 1.0);
  REQUIRE(t[0].value[0] == Approx(0.9).margin(1e-15));  // unchanged

  ema_update(t, s, 0.0);
  REQUIRE(t[0].value[0] == 0.0);  // exact copy of student

  ParamStore<double> bad;
  bad.add("b", {3});
  REQUIRE_THROWS_AS(ema_update(t, bad, 0.5), ShapeError);
  REQUIRE_THROWS_AS(ema_update(t, s, 1.5), ConfigError);
}

TEST_CASE("ema convexity property on random states") {
  Rng rng(3);
  ParamStore<double> t, s;
  t.add("w", {16});
  s.add("w", {16});
  for (std::int64_t i = 0; i < 16; ++i) {
    t[0].value[i] = rng.normal();
    s[0].value[i] = rng.normal();
  }
  const auto before = t[0].value;
  ema_update(t, s, 0.73);
  for (std::int64_t i = 0; i < 16; ++i) {
    const double lo = std::min(before[i], s[0].value[i]);
    const double hi = std::max(before[i], s[0].value[i]);
    REQUIRE(t[0].value[i] >= lo - 1e-15);
    REQUIRE(t[0].value[i] <= hi + 1e-15);
  }
}
