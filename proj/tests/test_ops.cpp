#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "celldino/gradcheck.hpp"
#include "celldino/ops.hpp"
#include "celldino/rng.hpp"

using namespace celldino;
using Catch::Approx;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.normal();
  return t;
}

Tensor<double> random_simplex(std::int64_t k, Rng& rng) {
  Tensor<double> p({k});
  double sum = 0.0;
  for (std::int64_t i = 0; i < k; ++i) {
    p[i] = 0.05 + rng.uniform();
    sum += p[i];
  }
  for (std::int64_t i = 0; i < k; ++i) p[i] /= sum;
  return p;
}

}  // namespace

TEST_CASE("softmax_temp matches closed forms") {
  auto p = ops::softmax_temp(Tensor<double>::from({0.0, 0.0}), 0.1);
  REQUIRE(p[0] == Approx(0.5).margin(1e-12));

  p = ops::softmax_temp(Tensor<double>::from({1.0, 0.0}), 1.0);
  REQUIRE(p[0] == Approx(0.73106).margin(1e-5));
  REQUIRE(p[1] == Approx(0.26894).margin(1e-5));

  p = ops::softmax_temp(Tensor<double>::from({1.0, 0.0}), 0.5);
  REQUIRE(p[0] == Approx(0.88080).margin(1e-5));
  REQUIRE(p[1] == Approx(0.11920).margin(1e-5));

  REQUIRE_THROWS_AS(ops::softmax_temp(Tensor<double>::from({1.0, 0.0}), 0.0),
                    ConfigError);
  REQUIRE_THROWS_AS(
      ops::softmax_temp(Tensor<double>::from({1.0, HUGE_VAL}), 1.0),
      NumericError);
}

TEST_CASE("softmax_temp properties") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto z = random_tensor({8}, rng, 3.0);
    const auto p = ops::softmax_temp(z, 0.7);
    double sum = 0.0, maxp = 0.0;
    for (std::int64_t i = 0; i < 8; ++i) {
      REQUIRE(p[i] > 0.0);
      sum += p[i];
      maxp = std::max(maxp, p[i]);
    }
    REQUIRE(sum == Approx(1.0).margin(1e-6));

    // permutation equivariance: rotate logits, outputs rotate identically
    Tensor<double> zr({8});
    for (std::int64_t i = 0; i < 8; ++i) zr[i] = z[(i + 3) % 8];
    const auto pr = ops::softmax_temp(zr, 0.7);
    for (std::int64_t i = 0; i < 8; ++i)
      REQUIRE(pr[i] == Approx(p[(i + 3) % 8]).margin(1e-12));

    // sharper temperature raises the winner's probability
    const auto ps = ops::softmax_temp(z, 0.2);
    double maxs = 0.0;
    for (std::int64_t i = 0; i < 8; ++i) maxs = std::max(maxs, ps[i]);
    REQUIRE(maxs > maxp);
  }
}

TEST_CASE("cross_entropy_soft matches closed forms and Gibbs inequality") {
  Tensor<double> u({4}, 0.25);
  REQUIRE(ops::cross_entropy_soft(u, u) == Approx(1.38629).margin(1e-5));

  const double eps = 1e-9;
  REQUIRE(ops::cross_entropy_soft(Tensor<double>::from({1.0, 0.0}),
                                  Tensor<double>::from({1.0 - eps, eps})) ==
          Approx(0.0).margin(1e-8));

  REQUIRE(ops::cross_entropy_soft(Tensor<double>::from({0.5, 0.5}),
                                  Tensor<double>::from({0.9, 0.1})) ==
          Approx(1.20397).margin(1e-5));

  REQUIRE_THROWS_AS(
      ops::cross_entropy_soft(u, Tensor<double>::from({0.5, 0.5})), ShapeError);

  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = random_simplex(6, rng);
    const auto q = random_simplex(6, rng);
    REQUIRE(ops::cross_entropy_soft(p, q) >=
            ops::cross_entropy_soft(p, p) - 1e-12);
    REQUIRE(ops::cross_entropy_soft(p, q) >= 0.0);
  }
}

TEST_CASE("bce_with_logits matches closed forms") {
  REQUIRE(ops::bce_with_logits(Tensor<double>::from({0.0}),
                               Tensor<double>::from({1.0})) ==
          Approx(0.69315).margin(1e-5));
  REQUIRE(ops::bce_with_logits(Tensor<double>::from({20.0}),
                               Tensor<double>::from({1.0})) ==
          Approx(0.0).margin(1e-8));
  REQUIRE(ops::bce_with_logits(Tensor<double>::from({0.0}),
                               Tensor<double>::from({0.0})) ==
          ops::bce_with_logits(Tensor<double>::from({0.0}),
                               Tensor<double>::from({1.0})));
  REQUIRE_THROWS_AS(ops::bce_with_logits(Tensor<double>::from({0.0, 1.0}),
                                         Tensor<double>::from({1.0})),
                    ShapeError);
}

TEST_CASE("gradient checks for pointwise ops and losses") {
  Rng rng(123);
  const double eps = 1e-5;

  SECTION("gelu") {
    for (int i = 0; i < 10; ++i) {
      const auto x = random_tensor({6}, rng);
      const double err = GradCheck::max_rel_error(
          [](const Tensor<double>& v) { return ops::gelu_forward(v); },
          [](const Tensor<double>& v, const Tensor<double>& dy) {
            return ops::gelu_backward(v, dy);
          },
          x, eps, rng);
      REQUIRE(err <= 1e-6);
    }
  }

  SECTION("relu away from the kink") {
    for (int i = 0; i < 10; ++i) {
      auto x = random_tensor({6}, rng);
      for (std::int64_t j = 0; j < x.numel(); ++j)
        if (std::abs(x[j]) < 0.05) x[j] = 0.5;
      const double err = GradCheck::max_rel_error(
          [](const Tensor<double>& v) { return ops::relu_forward(v); },
          [](const Tensor<double>& v, const Tensor<double>& dy) {
            return ops::relu_backward(v, dy);
          },
          x, eps, rng);
      REQUIRE(err <= 1e-8);
    }
  }

  SECTION("dropout in eval mode is the identity") {
    Rng drop_rng(1);
    for (int i = 0; i < 10; ++i) {
      const auto x = random_tensor({6}, rng);
      const double err = GradCheck::max_rel_error(
          [&](const Tensor<double>& v) {
            Rng r(1);
            return ops::dropout_forward(v, 0.5, /*train=*/false, r,
                                        (Tensor<double>*)nullptr);
          },
          [&](const Tensor<double>& v, const Tensor<double>& dy) {
            Tensor<double> mask(v.shape(), 1.0);
            return ops::dropout_backward(dy, mask);
          },
          x, eps, drop_rng);
      REQUIRE(err <= 1e-6);
    }
  }

  SECTION("softmax_temp") {
    for (int i = 0; i < 10; ++i) {
      const auto x = random_tensor({7}, rng);
      const double tau = 0.3 + rng.uniform();
      const double err = GradCheck::max_rel_error(
          [tau](const Tensor<double>& v) { return ops::softmax_temp(v, tau); },
          [tau](const Tensor<double>& v, const Tensor<double>& dy) {
            const auto p = ops::softmax_temp(v, tau);
            return ops::softmax_temp_backward(p, dy, tau);
          },
          x, eps, rng);
      REQUIRE(err <= 1e-6);
    }
  }

  SECTION("cross_entropy_soft w.r.t. predictions") {
    for (int i = 0; i < 10; ++i) {
      const auto t = random_simplex(5, rng);
      const auto p = random_simplex(5, rng);
      const double err = GradCheck::max_rel_error(
          [&](const Tensor<double>& v) {
            Tensor<double> out({1});
            out[0] = ops::cross_entropy_soft(t, v);
            return out;
          },
          [&](const Tensor<double>& v, const Tensor<double>& dy) {
            return ops::cross_entropy_soft_backward(t, v, dy[0]);
          },
          p, eps, rng);
      REQUIRE(err <= 1e-6);
    }
  }

  SECTION("bce_with_logits") {
    for (int i = 0; i < 10; ++i) {
      const auto z = random_tensor({6}, rng, 2.0);
      Tensor<double> y({6});
      for (std::int64_t j = 0; j < 6; ++j) y[j] = rng.bernoulli(0.5) ? 1.0 : 0.0;
      const double err = GradCheck::max_rel_error(
          [&](const Tensor<double>& v) {
            Tensor<double> out({1});
            out[0] = ops::bce_with_logits(v, y);
            return out;
          },
          [&](const Tensor<double>& v, const Tensor<double>& dy) {
            return ops::bce_with_logits_backward(v, y, dy[0]);
          },
          z, eps, rng);
      REQUIRE(err <= 1e-6);
    }
  }
}

TEST_CASE("gradient checks for matmul, linear and layernorm") {
  Rng rng(77);
  const double eps = 1e-5;

  SECTION("matmul is exact for a linear map") {
    const auto b = random_tensor({4, 3}, rng);
    const auto a = random_tensor({5, 4}, rng);
    const double err = GradCheck::max_rel_error(
        [&](const Tensor<double>& v) { return ops::matmul(v, b); },
        [&](const Tensor<double>& v, const Tensor<double>& dy) {
          return ops::matmul_nt(dy, b);
        },
        a, eps, rng);
    REQUIRE(err <= 1e-9);
  }

  SECTION("linear w.r.t. weights") {
    const auto x = random_tensor({5, 4}, rng);
    const auto w0 = random_tensor({4, 3}, rng);
    const Tensor<double> b0({3}, 0.1);
    const double err = GradCheck::max_rel_error(
        [&](const Tensor<double>& w) { return ops::linear_forward(x, w, b0); },
        [&](const Tensor<double>& w, const Tensor<double>& dy) {
          Tensor<double> dw(w.shape());
          Tensor<double> db(b0.shape());
          ops::linear_backward(x, w, dy, dw, db);
          return dw;
        },
        w0, eps, rng);
    REQUIRE(err <= 1e-8);
  }

  SECTION("layernorm w.r.t. input, gamma and beta") {
    const auto gamma = random_tensor({6}, rng);
    const Tensor<double> beta({6}, 0.05);
    for (int i = 0; i < 10; ++i) {
      const auto x = random_tensor({3, 6}, rng);
      const double err_x = GradCheck::max_rel_error(
          [&](const Tensor<double>& v) {
            return ops::layernorm_forward(v, gamma, beta,
                                          (ops::LayerNormCache<double>*)nullptr);
          },
          [&](const Tensor<double>& v, const Tensor<double>& dy) {
            ops::LayerNormCache<double> cache;
            ops::layernorm_forward(v, gamma, beta, &cache);
            Tensor<double> dg({6}), db({6});
            return ops::layernorm_backward(v, gamma, dy, cache, dg, db);
          },
          x, eps, rng);
      REQUIRE(err_x <= 1e-6);

      const double err_g = GradCheck::max_rel_error(
          [&](const Tensor<double>& g) {
            return ops::layernorm_forward(x, g, beta,
                                          (ops::LayerNormCache<double>*)nullptr);
          },
          [&](const Tensor<double>& g, const Tensor<double>& dy) {
            ops::LayerNormCache<double> cache;
            ops::layernorm_forward(x, g, beta, &cache);
            Tensor<double> dg({6}, 0.0), db({6}, 0.0);
            ops::layernorm_backward(x, g, dy, cache, dg, db);
            return dg;
          },
          gamma, eps, rng);
      REQUIRE(err_g <= 1e-6);
    }
  }
}

TEST_CASE("grad_check flags a corrupted backward") {
  Rng rng(31);
  const auto x = random_tensor({5}, rng);
  const double err = GradCheck::max_rel_error(
      [](const Tensor<double>& v) { return ops::gelu_forward(v); },
      [](const Tensor<double>& v, const Tensor<double>& dy) {
        auto dx = ops::gelu_backward(v, dy);
        dx[2] += 0.1;  // injected fault
        return dx;
      },
      x, 1e-5, rng);
  REQUIRE(err > 1e-2);
}

TEST_CASE("dropout train mode uses inverted scaling") {
  Rng rng(4);
  Tensor<float> x({10000}, 1.0f);
  Tensor<float> mask;
  const auto y = ops::dropout_forward(x, 0.5, /*train=*/true, rng, &mask);
  double sum = 0.0;
  std::int64_t zeros = 0;
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    if (y[i] == 0.0f) {
      ++zeros;
    } else {
      REQUIRE(y[i] == 2.0f);
    }
    sum += y[i];
  }
  REQUIRE(zeros > 4000);
  REQUIRE(zeros < 6000);
  REQUIRE(sum / double(y.numel()) == Approx(1.0).margin(0.05));
}
