#pragma once

#include <cmath>
#include <cstdint>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <vector>

#include "celldino/embedding.hpp"
#include "celldino/metrics.hpp"
#include "celldino/optim.hpp"
#include "celldino/ops.hpp"

namespace celldino {

// Per-dimension mean and standard deviation computed on training rows;
// population variance, epsilon floor on the stored deviation.
struct Standardizer {
  Tensor<float> mean;  // (dim)
  Tensor<float> stddev;
  static constexpr float kEps = 1e-8f;

  template <class T>
  static Standardizer fit(const EmbeddingSet<T>& train) {
    if (train.n() == 0) throw DataError("standardizer: empty training set");
    const std::int64_t n = train.n(), d = train.dim();
    Standardizer s;
    s.mean = Tensor<float>({d});
    s.stddev = Tensor<float>({d});
    for (std::int64_t j = 0; j < d; ++j) {
      double mu = 0.0;
      for (std::int64_t i = 0; i < n; ++i)
        mu += double(train.features.at2(i, j));
      mu /= double(n);
      double var = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        const double c = double(train.features.at2(i, j)) - mu;
        var += c * c;
      }
      var /= double(n);
      s.mean[j] = static_cast<float>(mu);
      s.stddev[j] = std::max(static_cast<float>(std::sqrt(var)), kEps);
    }
    return s;
  }

  template <class T>
  EmbeddingSet<T> apply(const EmbeddingSet<T>& set) const {
    if (set.dim() != mean.numel())
      throw ShapeError("standardizer: dimension mismatch");
    EmbeddingSet<T> out = set;
    for (std::int64_t i = 0; i < set.n(); ++i)
      for (std::int64_t j = 0; j < set.dim(); ++j)
        out.features.at2(i, j) = static_cast<T>(
            (set.features.at2(i, j) - T(mean[j])) / T(stddev[j]));
    return out;
  }
};

// weight_i proportional to 1 / count(rarest positive label of i), normalized
// to sum 1. Samples with no positive labels get weight 0 and a warning.
inline std::vector<double> resample_weights(const LabelMatrix& labels) {
  const std::int64_t n = labels.dim(0), k = labels.dim(1);
  std::vector<std::int64_t> counts(static_cast<std::size_t>(k), 0);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t c = 0; c < k; ++c)
      if (labels.at2(i, c)) ++counts[static_cast<std::size_t>(c)];
  std::vector<double> w(static_cast<std::size_t>(n), 0.0);
  double sum = 0.0;
  std::int64_t skipped = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t rarest = 0;
    for (std::int64_t c = 0; c < k; ++c)
      if (labels.at2(i, c)) {
        const std::int64_t cnt = counts[static_cast<std::size_t>(c)];
        if (rarest == 0 || cnt < rarest) rarest = cnt;
      }
    if (rarest == 0) {
      ++skipped;
      continue;
    }
    w[static_cast<std::size_t>(i)] = 1.0 / double(rarest);
    sum += w[static_cast<std::size_t>(i)];
  }
  if (skipped > 0)
    std::cerr << "[celldino] warning: excluded " << skipped
              << " unlabeled samples from resampling\n";
  if (sum == 0.0) throw DataError("resample_weights: no labeled samples");
  for (auto& v : w) v /= sum;
  return w;
}

struct HeadConfig {
  std::int64_t hidden1 = 512;
  std::int64_t hidden2 = 256;
  std::int64_t n_classes = 17;
  double dropout = 0.5;
  int epochs = 300;
  int batch_size = 512;
  double lr = 1e-4;
  double lr_end = 0.0;
  double weight_decay = 0.04;
  double threshold = 0.5;

  nlohmann::json to_json() const {
    return {{"hidden1", hidden1},   {"hidden2", hidden2},
            {"n_classes", n_classes}, {"dropout", dropout},
            {"epochs", epochs},     {"batch_size", batch_size},
            {"lr", lr},             {"lr_end", lr_end},
            {"weight_decay", weight_decay}, {"threshold", threshold}};
  }

  static HeadConfig from_json(const nlohmann::json& j) {
    HeadConfig c;
    c.hidden1 = j.value("hidden1", c.hidden1);
    c.hidden2 = j.value("hidden2", c.hidden2);
    c.n_classes = j.value("n_classes", c.n_classes);
    c.dropout = j.value("dropout", c.dropout);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.lr_end = j.value("lr_end", c.lr_end);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.threshold = j.value("threshold", c.threshold);
    return c;
  }
};

// Classification head: linear(512) + ReLU + dropout, linear(256) + ReLU +
// dropout, linear(n_classes). Dropout is active only in training mode.
template <class T>
class MlpHead {
 public:
  ParamStore<T> params;

  MlpHead(std::int64_t in_dim, const HeadConfig& cfg)
      : in_(in_dim), cfg_(cfg) {
    fc1_w_ = params.add("mlp.fc1.weight", {in_, cfg.hidden1});
    fc1_b_ = params.add("mlp.fc1.bias", {cfg.hidden1});
    fc2_w_ = params.add("mlp.fc2.weight", {cfg.hidden1, cfg.hidden2});
    fc2_b_ = params.add("mlp.fc2.bias", {cfg.hidden2});
    fc3_w_ = params.add("mlp.fc3.weight", {cfg.hidden2, cfg.n_classes});
    fc3_b_ = params.add("mlp.fc3.bias", {cfg.n_classes});
  }

  MlpHead(std::int64_t in_dim, const HeadConfig& cfg, std::uint64_t seed)
      : MlpHead(in_dim, cfg) {
    init(seed);
  }

  void init(std::uint64_t seed) {
    Rng rng(derive_seed(seed, "mlp-head-init"));
    for (auto& p : params) {
      if (p.name.ends_with(".bias")) {
        p.value.zero();
      } else {
        for (std::int64_t i = 0; i < p.value.numel(); ++i)
          p.value[i] = static_cast<T>(rng.trunc_normal(0.0, 0.02));
      }
    }
  }

  struct Cache {
    Tensor<T> x, fc1, r1, m1, d1, fc2, r2, m2, d2;
  };

  // x: (B, in) -> logits (B, n_classes)
  Tensor<T> forward(const Tensor<T>& x, bool train, Rng* rng,
                    Cache* cache) const {
    if (x.dim(1) != in_) throw ShapeError("mlp head: input dim mismatch");
    Rng fallback(0);
    Rng& r = rng ? *rng : fallback;
    Cache tmp;
    Cache& c = cache ? *cache : tmp;
    c.fc1 = ops::linear_forward(x, params[fc1_w_].value, params[fc1_b_].value);
    c.r1 = ops::relu_forward(c.fc1);
    c.d1 = ops::dropout_forward(c.r1, cfg_.dropout, train, r, &c.m1);
    c.fc2 = ops::linear_forward(c.d1, params[fc2_w_].value, params[fc2_b_].value);
    c.r2 = ops::relu_forward(c.fc2);
    c.d2 = ops::dropout_forward(c.r2, cfg_.dropout, train, r, &c.m2);
    Tensor<T> out =
        ops::linear_forward(c.d2, params[fc3_w_].value, params[fc3_b_].value);
    if (cache) c.x = x;
    return out;
  }

  Tensor<T> backward(const Tensor<T>& d_out, const Cache& c) {
    Tensor<T> d_d2 = ops::linear_backward(c.d2, params[fc3_w_].value, d_out,
                                          params[fc3_w_].grad, params[fc3_b_].grad);
    Tensor<T> d_r2 = ops::dropout_backward(d_d2, c.m2);
    Tensor<T> d_fc2 = ops::relu_backward(c.fc2, d_r2);
    Tensor<T> d_d1 = ops::linear_backward(c.d1, params[fc2_w_].value, d_fc2,
                                          params[fc2_w_].grad, params[fc2_b_].grad);
    Tensor<T> d_r1 = ops::dropout_backward(d_d1, c.m1);
    Tensor<T> d_fc1 = ops::relu_backward(c.fc1, d_r1);
    return ops::linear_backward(c.x, params[fc1_w_].value, d_fc1,
                                params[fc1_w_].grad, params[fc1_b_].grad);
  }

  const HeadConfig& cfg() const { return cfg_; }
  std::int64_t in_dim() const { return in_; }

 private:
  std::int64_t in_;
  HeadConfig cfg_;
  int fc1_w_, fc1_b_, fc2_w_, fc2_b_, fc3_w_, fc3_b_;
};

struct Prediction {
  Tensor<float> scores;  // (n, k), sigmoid of the logits
  LabelMatrix labels;    // score >= threshold
};

// Inputs must already be standardized.
template <class T>
Prediction predict(const MlpHead<T>& head, const EmbeddingSet<T>& set,
                   double threshold = 0.5) {
  Tensor<T> logits = head.forward(set.features, /*train=*/false, nullptr, nullptr);
  Prediction p;
  p.scores = Tensor<float>(logits.shape());
  p.labels = LabelMatrix(logits.shape());
  for (std::int64_t i = 0; i < logits.numel(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-double(logits[i])));
    p.scores[i] = static_cast<float>(s);
    p.labels[i] = s >= threshold ? 1 : 0;
  }
  return p;
}

struct EpochMetrics {
  int epoch;
  double loss;
  double train_f1;
  double val_f1;  // NaN when no validation split is given
};

struct HeadTrainResult {
  Standardizer standardizer;
  std::vector<EpochMetrics> trace;
  double final_train_f1 = 0.0;
  double final_val_f1 = 0.0;
};

// Trains the head on (already embedded) features: standardization fitted on
// the training rows only, inverse-rarest-label resampling with replacement,
// AdamW with cosine annealing, BCE-with-logits.
template <class T>
HeadTrainResult train_head(MlpHead<T>& head, const EmbeddingSet<T>& train_raw,
                           const EmbeddingSet<T>* val_raw,
                           std::uint64_t seed) {
  const HeadConfig& cfg = head.cfg();
  train_raw.validate();
  if (train_raw.n_classes() != cfg.n_classes)
    throw ConfigError("train_head: label matrix has " +
                      std::to_string(train_raw.n_classes()) +
                      " classes, head expects " +
                      std::to_string(cfg.n_classes));

  HeadTrainResult result;
  result.standardizer = Standardizer::fit(train_raw);
  const EmbeddingSet<T> train = result.standardizer.apply(train_raw);
  std::optional<EmbeddingSet<T>> val;
  if (val_raw) val = result.standardizer.apply(*val_raw);

  const std::vector<double> weights = resample_weights(train.labels);
  std::vector<double> cumulative(weights.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    cumulative[i] = acc;
  }

  const std::int64_t n = train.n();
  Tensor<T> targets({n, cfg.n_classes});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t c = 0; c < cfg.n_classes; ++c)
      targets.at2(i, c) = train.labels.at2(i, c) ? T(1) : T(0);

  AdamW<T> opt({cfg.lr, cfg.weight_decay, 0.9, 0.999, 1e-8});
  opt.attach(head.params);
  Schedule lr_sched{ScheduleKind::CosineAnnealing, cfg.lr, cfg.lr_end,
                    std::max(1, cfg.epochs)};

  Rng sample_rng(derive_seed(seed, "head-resample"));
  Rng dropout_rng(derive_seed(seed, "head-dropout"));

  auto eval_f1 = [&](const EmbeddingSet<T>& s) {
    const auto pred = predict(head, s, cfg.threshold);
    return evaluate_multilabel(s.labels, pred.labels).macro_f1;
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.cfg.lr = lr_sched.value(epoch);
    // one epoch = n draws with replacement
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (auto& idx : order) {
      const double u = sample_rng.uniform();
      idx = static_cast<std::int64_t>(
          std::lower_bound(cumulative.begin(), cumulative.end(),
                           u * cumulative.back()) -
          cumulative.begin());
      if (idx >= n) idx = n - 1;
    }

    double loss_sum = 0.0;
    std::int64_t batches = 0;
    for (std::int64_t base = 0; base < n; base += cfg.batch_size) {
      const std::int64_t bsz =
          std::min<std::int64_t>(cfg.batch_size, n - base);
      Tensor<T> x({bsz, train.dim()});
      Tensor<T> y({bsz, cfg.n_classes});
      for (std::int64_t i = 0; i < bsz; ++i) {
        const std::int64_t src = order[static_cast<std::size_t>(base + i)];
        std::copy(train.features.data() + src * train.dim(),
                  train.features.data() + (src + 1) * train.dim(),
                  x.data() + i * train.dim());
        std::copy(targets.data() + src * cfg.n_classes,
                  targets.data() + (src + 1) * cfg.n_classes,
                  y.data() + i * cfg.n_classes);
      }
      head.params.zero_grads();
      typename MlpHead<T>::Cache cache;
      const Tensor<T> logits = head.forward(x, /*train=*/true, &dropout_rng, &cache);
      const T loss = ops::bce_with_logits(logits, y);
      if (!std::isfinite(double(loss)))
        throw NumericError("train_head: non-finite loss at epoch " +
                           std::to_string(epoch));
      const Tensor<T> d_logits = ops::bce_with_logits_backward(logits, y, T(1));
      head.backward(d_logits, cache);
      opt.step(head.params);
      loss_sum += double(loss);
      ++batches;
    }

    EpochMetrics em;
    em.epoch = epoch;
    em.loss = loss_sum / double(batches);
    em.train_f1 = eval_f1(train);
    em.val_f1 = val ? eval_f1(*val) : std::nan("");
    result.trace.push_back(em);
  }

  result.final_train_f1 = eval_f1(train);
  result.final_val_f1 = val ? eval_f1(*val) : std::nan("");
  return result;
}

template <class T>
HeadTrainResult train_head(MlpHead<T>& head, const EmbeddingSet<T>& train_raw,
                           std::nullptr_t, std::uint64_t seed) {
  return train_head(head, train_raw,
                    static_cast<const EmbeddingSet<T>*>(nullptr), seed);
}

}  // namespace celldino
