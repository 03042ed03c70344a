#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "celldino/gradcheck.hpp"
#include "celldino/head.hpp"

using namespace celldino;
using Catch::Approx;

namespace {

// Gaussian blobs, one per class, single positive label per sample.
EmbeddingSet<float> blob_embeddings(std::int64_t n, std::int64_t dim,
                                    std::int64_t nc, std::uint64_t seed,
                                    double separation = 4.0) {
  Rng rng(seed);
  EmbeddingSet<float> set;
  set.features = Tensor<float>({n, dim});
  set.labels = LabelMatrix({n, nc});
  for (std::int64_t c = 0; c < nc; ++c)
    set.class_names.push_back("class" + std::to_string(c));
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t c = i % nc;
    set.ids.push_back("s" + std::to_string(i));
    set.labels.at2(i, c) = 1;
    for (std::int64_t j = 0; j < dim; ++j)
      set.features.at2(i, j) = static_cast<float>(
          rng.normal() + (j % nc == c ? separation : 0.0));
  }
  return set;
}

}  // namespace

TEST_CASE("standardizer closed forms") {
  EmbeddingSet<float> set;
  set.features = Tensor<float>({3, 3});
  // column 0: {-1, +1, 0} is handled below; use the spec fixtures directly
  // column layout: c0 = {0,2,4}, c1 = constant 5, c2 = {-1,+1,0}
  const float data[3][3] = {{0, 5, -1}, {2, 5, 1}, {4, 5, 0}};
  for (std::int64_t i = 0; i < 3; ++i)
    for (std::int64_t j = 0; j < 3; ++j) set.features.at2(i, j) = data[i][j];
  set.ids = {"a", "b", "c"};
  set.class_names = {"x"};
  set.labels = LabelMatrix({3, 1});
  for (std::int64_t i = 0; i < 3; ++i) set.labels.at2(i, 0) = 1;

  const auto s = Standardizer::fit(set);
  REQUIRE(s.mean[0] == Approx(2.0));
  REQUIRE(s.stddev[0] == Approx(std::sqrt(8.0 / 3.0)).margin(1e-6));

  const auto t = s.apply(set);
  REQUIRE(t.features.at2(0, 0) == Approx(-1.2247).margin(1e-4));
  REQUIRE(t.features.at2(1, 0) == Approx(0.0).margin(1e-6));
  REQUIRE(t.features.at2(2, 0) == Approx(1.2247).margin(1e-4));

  // constant column collapses to zero under the epsilon clamp
  REQUIRE(t.features.at2(0, 1) == Approx(0.0).margin(1e-6));
  REQUIRE(t.features.at2(2, 1) == Approx(0.0).margin(1e-6));

  // two-point column {-1,+1} subset: mean 0, std 1 -> unchanged
  EmbeddingSet<float> two;
  two.features = Tensor<float>({2, 1});
  two.features.at2(0, 0) = -1.0f;
  two.features.at2(1, 0) = 1.0f;
  two.ids = {"a", "b"};
  two.class_names = {"x"};
  two.labels = LabelMatrix({2, 1});
  two.labels.at2(0, 0) = two.labels.at2(1, 0) = 1;
  const auto s2 = Standardizer::fit(two);
  const auto t2 = s2.apply(two);
  REQUIRE(t2.features.at2(0, 0) == Approx(-1.0).margin(1e-6));
  REQUIRE(t2.features.at2(1, 0) == Approx(1.0).margin(1e-6));

  // transformed training rows have mean 0, variance 1
  const auto big = blob_embeddings(50, 8, 2, 3);
  const auto sb = Standardizer::fit(big);
  const auto tb = sb.apply(big);
  for (std::int64_t j = 0; j < 8; ++j) {
    double mu = 0, var = 0;
    for (std::int64_t i = 0; i < 50; ++i) mu += tb.features.at2(i, j);
    mu /= 50;
    for (std::int64_t i = 0; i < 50; ++i) {
      const double c = tb.features.at2(i, j) - mu;
      var += c * c;
    }
    var /= 50;
    REQUIRE(mu == Approx(0.0).margin(1e-5));
    REQUIRE(var == Approx(1.0).margin(1e-3));
  }

  // idempotence: refitting on standardized data changes nothing material
  const auto s3 = Standardizer::fit(tb);
  const auto t3 = s3.apply(tb);
  for (std::int64_t i = 0; i < t3.features.numel(); ++i)
    REQUIRE(std::abs(t3.features[i] - tb.features[i]) <= 1e-5);

  EmbeddingSet<float> empty;
  empty.features = Tensor<float>({0, 4});
  REQUIRE_THROWS_AS(Standardizer::fit(empty), DataError);
}

TEST_CASE("resample weights fixture and symmetry") {
  // s1={A}, s2={A}, s3={A,B}: counts A=3, B=1 -> weights (0.2, 0.2, 0.6)
  LabelMatrix labels({3, 2});
  labels.at2(0, 0) = 1;
  labels.at2(1, 0) = 1;
  labels.at2(2, 0) = 1;
  labels.at2(2, 1) = 1;
  const auto w = resample_weights(labels);
  REQUIRE(w[0] == Approx(0.2).margin(1e-12));
  REQUIRE(w[1] == Approx(0.2).margin(1e-12));
  REQUIRE(w[2] == Approx(0.6).margin(1e-12));

  // all samples share one class -> uniform
  LabelMatrix shared({4, 2});
  for (std::int64_t i = 0; i < 4; ++i) shared.at2(i, 0) = 1;
  for (double v : resample_weights(shared)) REQUIRE(v == Approx(0.25));

  // balanced disjoint classes -> uniform
  LabelMatrix balanced({4, 2});
  balanced.at2(0, 0) = balanced.at2(1, 0) = 1;
  balanced.at2(2, 1) = balanced.at2(3, 1) = 1;
  for (double v : resample_weights(balanced)) REQUIRE(v == Approx(0.25));

  // permutation equivariance and normalization
  Rng rng(5);
  LabelMatrix rand_labels({12, 3});
  for (std::int64_t i = 0; i < 12; ++i)
    rand_labels.at2(i, rng.uniform_index(3)) = 1;
  const auto wr = resample_weights(rand_labels);
  double sum = 0.0;
  for (double v : wr) sum += v;
  REQUIRE(sum == Approx(1.0).margin(1e-12));

  LabelMatrix rev({12, 3});
  for (std::int64_t i = 0; i < 12; ++i)
    for (std::int64_t c = 0; c < 3; ++c)
      rev.at2(i, c) = rand_labels.at2(11 - i, c);
  const auto wrev = resample_weights(rev);
  for (std::int64_t i = 0; i < 12; ++i)
    REQUIRE(wrev[static_cast<std::size_t>(i)] ==
            Approx(wr[static_cast<std::size_t>(11 - i)]).margin(1e-15));
}

TEST_CASE("mlp head shape contract and eval determinism") {
  HeadConfig cfg;
  cfg.n_classes = 17;
  MlpHead<float> head(768, cfg, 3);
  Rng rng(1);
  Tensor<float> x({2, 768});
  for (std::int64_t i = 0; i < x.numel(); ++i)
    x[i] = static_cast<float>(rng.normal());
  const auto a = head.forward(x, false, nullptr, nullptr);
  REQUIRE(a.shape() == Shape{2, 17});
  const auto b = head.forward(x, false, nullptr, nullptr);
  REQUIRE(a == b);  // dropout off in eval mode

  // train mode with dropout is stochastic w.r.t. the rng stream
  Rng d1(7), d2(8);
  const auto t1 = head.forward(x, true, &d1, nullptr);
  const auto t2 = head.forward(x, true, &d2, nullptr);
  REQUIRE(!(t1 == t2));

  REQUIRE_THROWS_AS(head.forward(Tensor<float>({2, 64}), false, nullptr, nullptr),
                    ShapeError);
}

TEST_CASE("gradients through the classifier head") {
  HeadConfig cfg;
  cfg.n_classes = 3;
  cfg.hidden1 = 8;
  cfg.hidden2 = 6;
  MlpHead<double> head(10, cfg, 11);
  Rng rng(2);
  Tensor<double> x({10});
  for (std::int64_t i = 0; i < 10; ++i) x[i] = rng.normal();
  const double err = GradCheck::max_rel_error(
      [&](const Tensor<double>& v) {
        return head.forward(v.reshaped({1, 10}), false, nullptr, nullptr);
      },
      [&](const Tensor<double>& v, const Tensor<double>& dy) {
        typename MlpHead<double>::Cache cache;
        head.params.zero_grads();
        head.forward(v.reshaped({1, 10}), false, nullptr, &cache);
        return head.backward(dy, cache).reshaped(v.shape());
      },
      x, 1e-5, rng);
  REQUIRE(err <= 1e-4);
}

TEST_CASE("predict threshold semantics") {
  HeadConfig cfg;
  cfg.n_classes = 3;
  cfg.hidden1 = 4;
  cfg.hidden2 = 4;
  MlpHead<float> head(4, cfg);
  // zero weights -> zero logits -> score 0.5 -> positive at the boundary
  EmbeddingSet<float> set;
  set.features = Tensor<float>({1, 4}, 1.0f);
  set.ids = {"a"};
  set.class_names = {"x", "y", "z"};
  set.labels = LabelMatrix({1, 3});
  set.labels.at2(0, 0) = 1;

  const auto p = predict(head, set, 0.5);
  for (std::int64_t c = 0; c < 3; ++c) {
    REQUIRE(p.scores.at2(0, c) == Approx(0.5));
    REQUIRE(p.labels.at2(0, c) == 1);  // >= convention at the boundary
  }
  const auto strict = predict(head, set, 1.1);
  for (std::int64_t c = 0; c < 3; ++c) REQUIRE(strict.labels.at2(0, c) == 0);

  // saturated logits via the final bias
  head.params.find("mlp.fc3.bias")->value[0] = 10.0f;
  head.params.find("mlp.fc3.bias")->value[1] = -10.0f;
  const auto sat = predict(head, set, 0.5);
  REQUIRE(sat.labels.at2(0, 0) == 1);
  REQUIRE(sat.labels.at2(0, 1) == 0);
}

TEST_CASE("raising the threshold never increases recall") {
  const auto set = blob_embeddings(60, 12, 3, 9, 1.0);
  HeadConfig cfg;
  cfg.n_classes = 3;
  cfg.epochs = 20;
  cfg.batch_size = 32;
  MlpHead<float> head(12, cfg, 5);
  const auto result = train_head(head, set, nullptr, 42);
  const auto std_set = result.standardizer.apply(set);

  double prev_recall[3] = {2.0, 2.0, 2.0};
  for (double threshold : {0.1, 0.3, 0.5, 0.7, 0.9}) {
    const auto p = predict(head, std_set, threshold);
    const auto pc = prf_per_class(std_set.labels, p.labels);
    for (std::size_t c = 0; c < 3; ++c) {
      REQUIRE(pc[c].recall <= prev_recall[c] + 1e-12);
      prev_recall[c] = pc[c].recall;
    }
  }
}

TEST_CASE("overfit sanity: 64 samples for 300 epochs reach train F1 = 1") {
  const auto set = blob_embeddings(64, 16, 3, 21);
  HeadConfig cfg;
  cfg.n_classes = 3;
  cfg.epochs = 300;
  cfg.batch_size = 512;  // one batch per epoch at n = 64
  MlpHead<float> head(16, cfg, 7);
  const auto result = train_head(head, set, nullptr, 13);
  REQUIRE(result.final_train_f1 == 1.0);
  REQUIRE(result.trace.size() == 300);
}

TEST_CASE("zero epochs leave an untrained head at chance level") {
  const auto set = blob_embeddings(60, 16, 3, 33);
  HeadConfig cfg;
  cfg.n_classes = 3;
  cfg.epochs = 0;
  MlpHead<float> head(16, cfg, 7);
  const auto result = train_head(head, set, nullptr, 13);
  REQUIRE(result.trace.empty());
  REQUIRE(result.final_train_f1 < 0.75);  // far from the trained regime
}

TEST_CASE("validation split uses training statistics") {
  const auto train = blob_embeddings(40, 8, 2, 1);
  auto val = blob_embeddings(20, 8, 2, 2);
  // shift the validation distribution; the standardizer must NOT adapt to it
  for (std::int64_t i = 0; i < val.features.numel(); ++i)
    val.features[i] += 100.0f;

  HeadConfig cfg;
  cfg.n_classes = 2;
  cfg.epochs = 5;
  cfg.batch_size = 32;
  MlpHead<float> head(8, cfg, 3);
  const auto result = train_head(head, train, &val, 5);

  const auto train_std = result.standardizer.apply(train);
  const auto val_std = result.standardizer.apply(val);
  double val_mean = 0.0;
  for (std::int64_t i = 0; i < val_std.features.numel(); ++i)
    val_mean += val_std.features[i];
  val_mean /= double(val_std.features.numel());
  REQUIRE(val_mean > 10.0);  // still far off: train statistics were used
  REQUIRE(std::isfinite(result.final_val_f1));
}

TEST_CASE("head training is bit-reproducible under a fixed seed") {
  const auto set = blob_embeddings(32, 8, 2, 11);
  HeadConfig cfg;
  cfg.n_classes = 2;
  cfg.epochs = 10;
  cfg.batch_size = 16;

  MlpHead<float> a(8, cfg, 5), b(8, cfg, 5);
  const auto ra = train_head(a, set, nullptr, 77);
  const auto rb = train_head(b, set, nullptr, 77);
  for (std::size_t i = 0; i < a.params.size(); ++i)
    REQUIRE(a.params[static_cast<int>(i)].value ==
            b.params[static_cast<int>(i)].value);
  for (std::size_t e = 0; e < ra.trace.size(); ++e)
    REQUIRE(ra.trace[e].loss == rb.trace[e].loss);
}
