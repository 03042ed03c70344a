#pragma once

#include <string>
#include <vector>

#include "celldino/error.hpp"
#include "celldino/tensor.hpp"

namespace celldino {

// One named parameter with its gradient accumulator.
template <class T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

// Ordered named parameter collection. Order is the registration order and is
// part of the checkpoint contract.
template <class T>
class ParamStore {
 public:
  int add(const std::string& name, Shape shape) {
    for (const auto& p : params_)
      if (p.name == name) throw ConfigError("duplicate parameter: " + name);
    params_.push_back({name, Tensor<T>(shape), Tensor<T>(shape)});
    return static_cast<int>(params_.size()) - 1;
  }

  std::size_t size() const { return params_.size(); }
  Param<T>& operator[](int i) { return params_[static_cast<std::size_t>(i)]; }
  const Param<T>& operator[](int i) const {
    return params_[static_cast<std::size_t>(i)];
  }

  Param<T>* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }
  const Param<T>* find(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  void zero_grads() {
    for (auto& p : params_) p.grad.zero();
  }

  std::int64_t total_elems() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

  void copy_values_from(const ParamStore& other) {
    require_aligned(other, "copy_values_from");
    for (std::size_t i = 0; i < params_.size(); ++i)
      params_[i].value = other.params_[i].value;
  }

  void require_aligned(const ParamStore& other, const char* what) const {
    if (params_.size() != other.params_.size())
      throw ShapeError(std::string(what) + ": parameter count mismatch");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_[i].name != other.params_[i].name)
        throw ShapeError(std::string(what) + ": parameter name mismatch at " +
                         params_[i].name + " vs " + other.params_[i].name);
      if (!params_[i].value.same_shape(other.params_[i].value))
        throw ShapeError(std::string(what) + ": shape mismatch at " +
                         params_[i].name);
    }
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Param<T>> params_;
};

// theta_t <- lambda * theta_t + (1 - lambda) * theta_s, elementwise.
template <class T>
void ema_update(ParamStore<T>& teacher, const ParamStore<T>& student,
                double lambda) {
  if (lambda < 0.0 || lambda > 1.0)
    throw ConfigError("ema_update: lambda must be in [0,1]");
  teacher.require_aligned(student, "ema_update");
  const T lam = static_cast<T>(lambda);
  const T one_m = static_cast<T>(1.0 - lambda);
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    Tensor<T>& t = teacher[static_cast<int>(i)].value;
    const Tensor<T>& s = student[static_cast<int>(i)].value;
    for (std::int64_t j = 0; j < t.numel(); ++j)
      t[j] = lam * t[j] + one_m * s[j];
  }
}

}  // namespace celldino
