#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <vector>

#include "celldino/error.hpp"
#include "celldino/parallel.hpp"
#include "celldino/rng.hpp"
#include "celldino/tensor.hpp"

namespace celldino {
namespace ops {

template <class T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using EMap = Eigen::Map<EMat<T>>;
template <class T>
using ECMap = Eigen::Map<const EMat<T>>;
template <class T>
using EStrided = Eigen::Map<EMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ECStrided = Eigen::Map<const EMat<T>, 0, Eigen::OuterStride<>>;

template <class T>
inline EMap<T> as_mat(Tensor<T>& t, std::int64_t rows, std::int64_t cols) {
  return EMap<T>(t.data(), rows, cols);
}
template <class T>
inline ECMap<T> as_mat(const Tensor<T>& t, std::int64_t rows,
                       std::int64_t cols) {
  return ECMap<T>(t.data(), rows, cols);
}

template <class T>
inline void check_2d(const Tensor<T>& t, const char* what) {
  if (t.ndim() != 2) throw ShapeError(std::string(what) + ": expected 2-D");
}

// ---------------------------------------------------------------------------
// Matrix products. Row chunks are fixed-size so results do not depend on the
// thread count.
// ---------------------------------------------------------------------------

inline constexpr std::int64_t kGemmChunk = 256;

// C = A (M,K) @ B (K,N)
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  if (a.dim(1) != b.dim(0))
    throw ShapeError("matmul: inner dims " + shape_str(a.shape()) + " @ " +
                     shape_str(b.shape()));
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> c({m, n});
  ECMap<T> A(a.data(), m, k), B(b.data(), k, n);
  EMap<T> C(c.data(), m, n);
  if (m > 2 * kGemmChunk && num_threads() > 1) {
    const std::int64_t n_chunks = (m + kGemmChunk - 1) / kGemmChunk;
    parallel_for(n_chunks, [&](std::int64_t ci) {
      const std::int64_t lo = ci * kGemmChunk;
      const std::int64_t rows = std::min(kGemmChunk, m - lo);
      C.middleRows(lo, rows).noalias() = A.middleRows(lo, rows) * B;
    });
  } else {
    C.noalias() = A * B;
  }
  return c;
}

// C = A^T (M,K)->(K,M) @ B (M,N), accumulated into c (K,N)
template <class T>
void matmul_tn_acc(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c) {
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != m || c.dim(0) != k || c.dim(1) != n)
    throw ShapeError("matmul_tn_acc: incompatible shapes");
  ECMap<T> A(a.data(), m, k), B(b.data(), m, n);
  EMap<T> C(c.data(), k, n);
  C.noalias() += A.transpose() * B;
}

// C = A (M,K) @ B^T (N,K)->(K,N)
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k)
    throw ShapeError("matmul_nt: inner dims " + shape_str(a.shape()) + " @ " +
                     shape_str(b.shape()) + "^T");
  Tensor<T> c({m, n});
  ECMap<T> A(a.data(), m, k), B(b.data(), n, k);
  EMap<T> C(c.data(), m, n);
  if (m > 2 * kGemmChunk && num_threads() > 1) {
    const std::int64_t n_chunks = (m + kGemmChunk - 1) / kGemmChunk;
    parallel_for(n_chunks, [&](std::int64_t ci) {
      const std::int64_t lo = ci * kGemmChunk;
      const std::int64_t rows = std::min(kGemmChunk, m - lo);
      C.middleRows(lo, rows).noalias() = A.middleRows(lo, rows) * B.transpose();
    });
  } else {
    C.noalias() = A * B.transpose();
  }
  return c;
}

// ---------------------------------------------------------------------------
// Linear layer: y = x @ W + b, W stored (in, out).
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w,
                         const Tensor<T>& b) {
  Tensor<T> y = matmul(x, w);
  const std::int64_t rows = y.dim(0), cols = y.dim(1);
  if (b.numel() != cols) throw ShapeError("linear: bias size mismatch");
  EMap<T> Y(y.data(), rows, cols);
  ECMap<T> B(b.data(), 1, cols);
  Y.rowwise() += B.row(0);
  return y;
}

// Accumulates dW, db; returns dx.
template <class T>
Tensor<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w,
                          const Tensor<T>& dy, Tensor<T>& dw, Tensor<T>& db) {
  matmul_tn_acc(x, dy, dw);
  ECMap<T> DY(dy.data(), dy.dim(0), dy.dim(1));
  EMap<T> DB(db.data(), 1, db.numel());
  DB.row(0) += DY.colwise().sum();
  return matmul_nt(dy, w);
}

// ---------------------------------------------------------------------------
// Layer normalization over the last dimension of a 2-D tensor.
// ---------------------------------------------------------------------------

template <class T>
struct LayerNormCache {
  Tensor<T> mean;  // (rows)
  Tensor<T> rstd;  // (rows)
};

template <class T>
Tensor<T> layernorm_forward(const Tensor<T>& x, const Tensor<T>& gamma,
                            const Tensor<T>& beta, LayerNormCache<T>* cache,
                            T eps = T(1e-5)) {
  check_2d(x, "layernorm");
  const std::int64_t rows = x.dim(0), d = x.dim(1);
  if (gamma.numel() != d || beta.numel() != d)
    throw ShapeError("layernorm: affine size mismatch");
  Tensor<T> y(x.shape());
  Tensor<T> mean({rows}), rstd({rows});
  parallel_for(rows, [&](std::int64_t r) {
    const T* xr = x.data() + r * d;
    T* yr = y.data() + r * d;
    T mu = 0;
    for (std::int64_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      const T c = xr[j] - mu;
      var += c * c;
    }
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + eps);
    mean[r] = mu;
    rstd[r] = rs;
    for (std::int64_t j = 0; j < d; ++j)
      yr[j] = (xr[j] - mu) * rs * gamma[j] + beta[j];
  }, 8);
  if (cache) {
    cache->mean = std::move(mean);
    cache->rstd = std::move(rstd);
  }
  return y;
}

template <class T>
Tensor<T> layernorm_backward(const Tensor<T>& x, const Tensor<T>& gamma,
                             const Tensor<T>& dy,
                             const LayerNormCache<T>& cache, Tensor<T>& dgamma,
                             Tensor<T>& dbeta) {
  const std::int64_t rows = x.dim(0), d = x.dim(1);
  Tensor<T> dx(x.shape());
  // dgamma/dbeta are shared accumulators; reduce sequentially over rows.
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * d;
    const T* dyr = dy.data() + r * d;
    const T mu = cache.mean[r], rs = cache.rstd[r];
    for (std::int64_t j = 0; j < d; ++j) {
      const T xhat = (xr[j] - mu) * rs;
      dgamma[j] += dyr[j] * xhat;
      dbeta[j] += dyr[j];
    }
  }
  parallel_for(rows, [&](std::int64_t r) {
    const T* xr = x.data() + r * d;
    const T* dyr = dy.data() + r * d;
    T* dxr = dx.data() + r * d;
    const T mu = cache.mean[r], rs = cache.rstd[r];
    T sum_g = 0, sum_gx = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      const T xhat = (xr[j] - mu) * rs;
      const T g = dyr[j] * gamma[j];
      sum_g += g;
      sum_gx += g * xhat;
    }
    sum_g /= static_cast<T>(d);
    sum_gx /= static_cast<T>(d);
    for (std::int64_t j = 0; j < d; ++j) {
      const T xhat = (xr[j] - mu) * rs;
      const T g = dyr[j] * gamma[j];
      dxr[j] = rs * (g - sum_g - xhat * sum_gx);
    }
  }, 8);
  return dx;
}

// ---------------------------------------------------------------------------
// Pointwise activations.
// ---------------------------------------------------------------------------

// tanh approximation of GELU (standard ViT practice).
template <class T>
inline T gelu_scalar(T x) {
  const T c = T(0.7978845608028654);  // sqrt(2/pi)
  const T u = c * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}

template <class T>
inline T gelu_grad_scalar(T x) {
  const T c = T(0.7978845608028654);
  const T u = c * (x + T(0.044715) * x * x * x);
  const T t = std::tanh(u);
  const T du = c * (T(1) + T(0.134145) * x * x);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

template <class T>
Tensor<T> gelu_forward(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  parallel_for(x.numel(), [&](std::int64_t i) { y[i] = gelu_scalar(x[i]); },
               4096);
  return y;
}

template <class T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  Tensor<T> dx(x.shape());
  parallel_for(
      x.numel(),
      [&](std::int64_t i) { dx[i] = dy[i] * gelu_grad_scalar(x[i]); }, 4096);
  return dx;
}

template <class T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = x[i] > 0 ? x[i] : T(0);
  return y;
}

template <class T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  Tensor<T> dx(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) dx[i] = x[i] > 0 ? dy[i] : T(0);
  return dx;
}

// Inverted dropout: kept activations are scaled by 1/keep at train time, so
// evaluation is the identity.
template <class T>
Tensor<T> dropout_forward(const Tensor<T>& x, double p, bool train, Rng& rng,
                          Tensor<T>* mask_out) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: p must be in [0,1)");
  if (!train || p == 0.0) {
    if (mask_out) *mask_out = Tensor<T>(x.shape(), T(1));
    return x;
  }
  const T scale = T(1.0 / (1.0 - p));
  Tensor<T> mask(x.shape());
  Tensor<T> y(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const T m = rng.bernoulli(p) ? T(0) : scale;
    mask[i] = m;
    y[i] = x[i] * m;
  }
  if (mask_out) *mask_out = std::move(mask);
  return y;
}

template <class T>
Tensor<T> dropout_backward(const Tensor<T>& dy, const Tensor<T>& mask) {
  require_same_shape(dy, mask, "dropout_backward");
  Tensor<T> dx(dy.shape());
  for (std::int64_t i = 0; i < dy.numel(); ++i) dx[i] = dy[i] * mask[i];
  return dx;
}

// ---------------------------------------------------------------------------
// Tempered softmax and losses.
// ---------------------------------------------------------------------------

// In-place row-wise softmax with temperature; max-subtraction for stability.
template <class T>
void softmax_temp_rows(T* data, std::int64_t rows, std::int64_t k, T tau) {
  parallel_for(rows, [&](std::int64_t r) {
    T* z = data + r * k;
    T m = z[0];
    for (std::int64_t j = 1; j < k; ++j) m = std::max(m, z[j]);
    T sum = 0;
    for (std::int64_t j = 0; j < k; ++j) {
      z[j] = std::exp((z[j] - m) / tau);
      sum += z[j];
    }
    const T inv = T(1) / sum;
    for (std::int64_t j = 0; j < k; ++j) z[j] *= inv;
  }, 8);
}

template <class T>
Tensor<T> softmax_temp(const Tensor<T>& logits, T tau) {
  if (!(tau > T(0))) throw ConfigError("softmax_temp: tau must be positive");
  for (std::int64_t i = 0; i < logits.numel(); ++i)
    if (!std::isfinite(static_cast<double>(logits[i])))
      throw NumericError("softmax_temp: non-finite logit");
  Tensor<T> p = logits;
  const std::int64_t k = logits.dim(logits.ndim() - 1);
  softmax_temp_rows(p.data(), logits.numel() / k, k, tau);
  return p;
}

// dz = (diag(p) - p p^T) dy / tau, row-wise.
template <class T>
Tensor<T> softmax_temp_backward(const Tensor<T>& p, const Tensor<T>& dy,
                                T tau) {
  require_same_shape(p, dy, "softmax_temp_backward");
  const std::int64_t k = p.dim(p.ndim() - 1);
  const std::int64_t rows = p.numel() / k;
  Tensor<T> dz(p.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* pr = p.data() + r * k;
    const T* dyr = dy.data() + r * k;
    T* dzr = dz.data() + r * k;
    T dot = 0;
    for (std::int64_t j = 0; j < k; ++j) dot += pr[j] * dyr[j];
    for (std::int64_t j = 0; j < k; ++j)
      dzr[j] = pr[j] * (dyr[j] - dot) / tau;
  }
  return dz;
}

inline constexpr double kProbFloor = 1e-12;

// H(p_target, p_pred) = -sum_i p_target_i * log(p_pred_i), with a clamp
// floor inside the logarithm.
template <class T>
T cross_entropy_soft(const Tensor<T>& p_target, const Tensor<T>& p_pred) {
  require_same_shape(p_target, p_pred, "cross_entropy_soft");
  T h = 0;
  for (std::int64_t i = 0; i < p_target.numel(); ++i)
    h -= p_target[i] * std::log(std::max(p_pred[i], T(kProbFloor)));
  return h;
}

// Gradient w.r.t. p_pred; zero where the clamp is active.
template <class T>
Tensor<T> cross_entropy_soft_backward(const Tensor<T>& p_target,
                                      const Tensor<T>& p_pred, T dh) {
  Tensor<T> dp(p_pred.shape());
  for (std::int64_t i = 0; i < p_pred.numel(); ++i)
    dp[i] = p_pred[i] > T(kProbFloor) ? dh * (-p_target[i] / p_pred[i]) : T(0);
  return dp;
}

// Mean over elements of the stable log-sigmoid form:
// max(z,0) - z*y + log(1 + exp(-|z|)).
template <class T>
T bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets) {
  require_same_shape(logits, targets, "bce_with_logits");
  T sum = 0;
  for (std::int64_t i = 0; i < logits.numel(); ++i) {
    const T z = logits[i], y = targets[i];
    sum += std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  return sum / static_cast<T>(logits.numel());
}

template <class T>
Tensor<T> bce_with_logits_backward(const Tensor<T>& logits,
                                   const Tensor<T>& targets, T dl) {
  Tensor<T> dz(logits.shape());
  const T inv_n = dl / static_cast<T>(logits.numel());
  for (std::int64_t i = 0; i < logits.numel(); ++i) {
    const T s = T(1) / (T(1) + std::exp(-logits[i]));
    dz[i] = (s - targets[i]) * inv_n;
  }
  return dz;
}

// ---------------------------------------------------------------------------
// Multi-head self-attention over a batch of equal-length sequences.
// x: (B*S, D) row-major; per-sequence attention, heads split the channel dim.
// ---------------------------------------------------------------------------

template <class T>
struct MhaCache {
  Tensor<T> qkv;    // (B*S, 3D)
  Tensor<T> probs;  // (B, H, S, S)
  Tensor<T> ctx;    // (B*S, D)
};

template <class T>
Tensor<T> mha_forward(const Tensor<T>& x, std::int64_t batch, std::int64_t seq,
                      std::int64_t heads, const Tensor<T>& w_qkv,
                      const Tensor<T>& b_qkv, const Tensor<T>& w_proj,
                      const Tensor<T>& b_proj, MhaCache<T>* cache) {
  const std::int64_t d = x.dim(1);
  if (d % heads != 0) throw ShapeError("mha: embed dim not divisible by heads");
  const std::int64_t dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  Tensor<T> qkv = linear_forward(x, w_qkv, b_qkv);  // (B*S, 3D)
  Tensor<T> probs({batch, heads, seq, seq});
  Tensor<T> ctx({batch * seq, d});

  parallel_for(batch * heads, [&](std::int64_t bh) {
    const std::int64_t b = bh / heads, h = bh % heads;
    const T* base = qkv.data() + b * seq * 3 * d;
    ECStrided<T> Q(base + h * dh, seq, dh, Eigen::OuterStride<>(3 * d));
    ECStrided<T> K(base + d + h * dh, seq, dh, Eigen::OuterStride<>(3 * d));
    ECStrided<T> V(base + 2 * d + h * dh, seq, dh, Eigen::OuterStride<>(3 * d));
    T* pr = probs.data() + ((b * heads + h) * seq) * seq;
    EMap<T> P(pr, seq, seq);
    P.noalias() = Q * K.transpose() * scale;
    softmax_temp_rows(pr, seq, seq, T(1));
    EStrided<T> C(ctx.data() + b * seq * d + h * dh, seq, dh,
                  Eigen::OuterStride<>(d));
    C.noalias() = ECMap<T>(pr, seq, seq) * V;
  });

  Tensor<T> out = linear_forward(ctx, w_proj, b_proj);
  if (cache) {
    cache->qkv = std::move(qkv);
    cache->probs = std::move(probs);
    cache->ctx = std::move(ctx);
  }
  return out;
}

template <class T>
Tensor<T> mha_backward(const Tensor<T>& x, std::int64_t batch, std::int64_t seq,
                       std::int64_t heads, const Tensor<T>& w_qkv,
                       const Tensor<T>& w_proj, const MhaCache<T>& cache,
                       const Tensor<T>& d_out, Tensor<T>& dw_qkv,
                       Tensor<T>& db_qkv, Tensor<T>& dw_proj,
                       Tensor<T>& db_proj) {
  const std::int64_t d = x.dim(1);
  const std::int64_t dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  Tensor<T> dctx =
      linear_backward(cache.ctx, w_proj, d_out, dw_proj, db_proj);
  Tensor<T> dqkv({batch * seq, 3 * d}, T(0));

  parallel_for(batch * heads, [&](std::int64_t bh) {
    const std::int64_t b = bh / heads, h = bh % heads;
    const T* base = cache.qkv.data() + b * seq * 3 * d;
    ECStrided<T> Q(base + h * dh, seq, dh, Eigen::OuterStride<>(3 * d));
    ECStrided<T> K(base + d + h * dh, seq, dh, Eigen::OuterStride<>(3 * d));
    ECStrided<T> V(base + 2 * d + h * dh, seq, dh, Eigen::OuterStride<>(3 * d));
    const T* pr = cache.probs.data() + ((b * heads + h) * seq) * seq;
    ECMap<T> P(pr, seq, seq);
    ECStrided<T> DC(dctx.data() + b * seq * d + h * dh, seq, dh,
                    Eigen::OuterStride<>(d));

    EMat<T> dprobs(seq, seq);
    dprobs.noalias() = DC * V.transpose();
    // row-wise softmax backward
    EMat<T> dscores(seq, seq);
    for (std::int64_t r = 0; r < seq; ++r) {
      const T dot = P.row(r).dot(dprobs.row(r));
      dscores.row(r).array() = P.row(r).array() * (dprobs.row(r).array() - dot);
    }
    dscores *= scale;

    T* dbase = dqkv.data() + b * seq * 3 * d;
    EStrided<T> DQ(dbase + h * dh, seq, dh, Eigen::OuterStride<>(3 * d));
    EStrided<T> DK(dbase + d + h * dh, seq, dh, Eigen::OuterStride<>(3 * d));
    EStrided<T> DV(dbase + 2 * d + h * dh, seq, dh,
                   Eigen::OuterStride<>(3 * d));
    DQ.noalias() = dscores * K;
    DK.noalias() = dscores.transpose() * Q;
    DV.noalias() = P.transpose() * DC;
  });

  return linear_backward(x, w_qkv, dqkv, dw_qkv, db_qkv);
}

}  // namespace ops
}  // namespace celldino
