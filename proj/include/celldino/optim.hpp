#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "celldino/error.hpp"
#include "celldino/params.hpp"
#include "celldino/tensor.hpp"

namespace celldino {

struct AdamWConfig {
  double lr = 1e-4;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// AdamW with decoupled weight decay applied before the adaptive update:
// w <- w * (1 - lr*wd), then the bias-corrected Adam step.
template <class T>
class AdamW {
 public:
  AdamWConfig cfg;

  AdamW() = default;
  explicit AdamW(AdamWConfig c) : cfg(c) {}

  void attach(const ParamStore<T>& store) {
    m_.clear();
    v_.clear();
    for (const auto& p : store) {
      m_.emplace_back(p.value.shape());
      v_.emplace_back(p.value.shape());
    }
    step_count_ = 0;
  }

  std::int64_t step_count() const { return step_count_; }

  void step(ParamStore<T>& store) {
    if (m_.size() != store.size())
      throw ShapeError("adamw: optimizer not attached to this store");
    ++step_count_;
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(step_count_));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(step_count_));
    const T lr = static_cast<T>(cfg.lr);
    const T decay = static_cast<T>(1.0 - cfg.lr * cfg.weight_decay);
    const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    const T ib1 = static_cast<T>(1.0 - cfg.beta1);
    const T ib2 = static_cast<T>(1.0 - cfg.beta2);
    const T inv_bc1 = static_cast<T>(1.0 / bc1);
    const T inv_bc2 = static_cast<T>(1.0 / bc2);
    const T eps = static_cast<T>(cfg.eps);
    for (std::size_t i = 0; i < store.size(); ++i) {
      auto& p = store[static_cast<int>(i)];
      if (!p.grad.same_shape(p.value))
        throw ShapeError("adamw: grad shape mismatch at " + p.name);
      Tensor<T>& m = m_[i];
      Tensor<T>& v = v_[i];
      for (std::int64_t j = 0; j < p.value.numel(); ++j) {
        const T g = p.grad[j];
        p.value[j] *= decay;
        m[j] = b1 * m[j] + ib1 * g;
        v[j] = b2 * v[j] + ib2 * g * g;
        const T mhat = m[j] * inv_bc1;
        const T vhat = v[j] * inv_bc2;
        p.value[j] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

 private:
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
  std::int64_t step_count_ = 0;
};

enum class ScheduleKind { CosineAnnealing, CosineRamp };

// Cosine interpolation from start to end over total_steps; exact at both
// boundaries. CosineAnnealing is used for learning rates (start > end),
// CosineRamp for the teacher momentum (start < end).
struct Schedule {
  ScheduleKind kind = ScheduleKind::CosineAnnealing;
  double start = 0.0;
  double end = 0.0;
  std::int64_t total_steps = 1;

  double value(std::int64_t step) const {
    if (step < 0 || step > total_steps)
      throw ConfigError("schedule: step out of range");
    if (total_steps == 0) return end;
    const double r = double(step) / double(total_steps);
    return end + (start - end) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * r));
  }
};

// Linear warmup to `peak` over warmup_steps, then cosine annealing to `end`.
struct WarmupCosine {
  double peak = 0.0;
  double end = 0.0;
  std::int64_t warmup_steps = 0;
  std::int64_t total_steps = 1;

  double value(std::int64_t step) const {
    if (warmup_steps > 0 && step < warmup_steps)
      return peak * double(step + 1) / double(warmup_steps);
    Schedule tail{ScheduleKind::CosineAnnealing, peak, end,
                  std::max<std::int64_t>(1, total_steps - warmup_steps)};
    return tail.value(std::min(step - warmup_steps, tail.total_steps));
  }
};

}  // namespace celldino
