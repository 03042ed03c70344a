#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "celldino/embedding.hpp"
#include "celldino/error.hpp"
#include "celldino/metrics.hpp"
#include "celldino/parallel.hpp"

namespace celldino {

enum class KnnNormalization { SumWeights, MinMax };

struct KnnConfig {
  std::vector<int> ks = {1, 3, 5, 10, 20};
  double tau = 0.07;
  double threshold = 0.5;
  KnnNormalization normalization = KnnNormalization::SumWeights;

  void validate() const {
    if (!(tau > 0)) throw ConfigError("knn: tau must be positive");
    if (threshold < 0 || threshold > 1)
      throw ConfigError("knn: threshold must be in [0,1]");
    for (int k : ks)
      if (k < 1) throw ConfigError("knn: k must be >= 1");
  }
};

// Cosine similarity with sequential accumulation; the exact summation order
// is part of the bit-exactness contract with the brute-force reference.
template <class T>
T cosine_sim(const T* a, const T* b, std::int64_t d) {
  T dot = 0, na = 0, nb = 0;
  for (std::int64_t i = 0; i < d; ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == T(0) || nb == T(0))
    throw NumericError("cosine_sim: zero vector");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

template <class T>
T cosine_sim(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "cosine_sim");
  return cosine_sim(a.data(), b.data(), a.numel());
}

template <class T>
struct KnnVote {
  std::vector<T> scores;                // per class, in [0,1]
  std::vector<std::uint8_t> prediction; // score >= threshold
};

// Soft-vote kNN for one query in a leave-one-out setting: neighbors are all
// other samples, weights w_i = exp(s_i / tau), class scores are the weighted
// sum of neighbor label vectors normalized per sample. Similarity ties at
// the k-boundary break by ascending sample index.
template <class T>
KnnVote<T> knn_soft_vote(std::int64_t query, const EmbeddingSet<T>& set,
                         const KnnConfig& cfg, int k) {
  cfg.validate();
  const std::int64_t n = set.n(), d = set.dim(), nc = set.n_classes();
  if (k > n - 1)
    throw ConfigError("knn: k=" + std::to_string(k) +
                      " exceeds n-1=" + std::to_string(n - 1));
  struct Cand {
    T sim;
    std::int64_t index;
  };
  std::vector<Cand> cands;
  cands.reserve(static_cast<std::size_t>(n - 1));
  const T* q = set.features.data() + query * d;
  for (std::int64_t i = 0; i < n; ++i) {
    if (i == query) continue;
    cands.push_back({cosine_sim(q, set.features.data() + i * d, d), i});
  }
  auto better = [](const Cand& a, const Cand& b) {
    if (a.sim != b.sim) return a.sim > b.sim;
    return a.index < b.index;
  };
  std::partial_sort(cands.begin(), cands.begin() + k, cands.end(), better);

  KnnVote<T> out;
  out.scores.assign(static_cast<std::size_t>(nc), T(0));
  T wsum = 0;
  T raw_min = 0, raw_max = 0;
  for (int r = 0; r < k; ++r) {
    const Cand& c = cands[static_cast<std::size_t>(r)];
    const T w = std::exp(c.sim / static_cast<T>(cfg.tau));
    wsum += w;
    for (std::int64_t cl = 0; cl < nc; ++cl)
      if (set.labels.at2(c.index, cl))
        out.scores[static_cast<std::size_t>(cl)] += w;
  }
  if (cfg.normalization == KnnNormalization::SumWeights) {
    for (auto& s : out.scores) s /= wsum;
  } else {
    raw_min = out.scores[0];
    raw_max = out.scores[0];
    for (const auto& s : out.scores) {
      raw_min = std::min(raw_min, s);
      raw_max = std::max(raw_max, s);
    }
    if (raw_max > raw_min) {
      for (auto& s : out.scores) s = (s - raw_min) / (raw_max - raw_min);
    } else {
      for (auto& s : out.scores) s = s > T(0) ? T(1) : T(0);
    }
  }
  out.prediction.resize(static_cast<std::size_t>(nc));
  for (std::int64_t cl = 0; cl < nc; ++cl)
    out.prediction[static_cast<std::size_t>(cl)] =
        out.scores[static_cast<std::size_t>(cl)] >=
                static_cast<T>(cfg.threshold)
            ? 1
            : 0;
  return out;
}

struct LooResult {
  std::map<int, MetricsReport> per_k;
};

// Every sample once as query against all remaining embeddings; exact
// exhaustive search.
template <class T>
LooResult loo_eval(const EmbeddingSet<T>& set, const KnnConfig& cfg) {
  cfg.validate();
  set.validate();
  const std::int64_t n = set.n();
  int max_k = 0;
  for (int k : cfg.ks) max_k = std::max(max_k, k);
  if (n < max_k + 1)
    throw ConfigError("loo_eval: need at least max(k)+1 samples");
  for (std::int64_t i = 0; i < n; ++i) {
    bool labeled = false;
    for (std::int64_t c = 0; c < set.n_classes(); ++c)
      if (set.labels.at2(i, c)) labeled = true;
    if (!labeled)
      throw DataError("loo_eval: sample " + set.ids[static_cast<std::size_t>(i)] +
                      " has no labels");
  }

  LooResult result;
  for (int k : cfg.ks) {
    LabelMatrix pred({n, set.n_classes()});
    parallel_for(n, [&](std::int64_t i) {
      const auto vote = knn_soft_vote(i, set, cfg, k);
      for (std::int64_t c = 0; c < set.n_classes(); ++c)
        pred.at2(i, c) = vote.prediction[static_cast<std::size_t>(c)];
    }, 4);
    result.per_k[k] = evaluate_multilabel(set.labels, pred, set.class_names);
  }
  return result;
}

}  // namespace celldino
