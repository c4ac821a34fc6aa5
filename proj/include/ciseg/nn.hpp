#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ciseg/graph.hpp"
#include "ciseg/rng.hpp"
#include "ciseg/tensor.hpp"

namespace ciseg {

// Named parameter registry. Insertion order is the canonical order used by
// checkpoints and the parameter-count bookkeeping, so it must stay stable
// across construction paths.
template <typename T>
class ParamStore {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> t) {
    if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate name " + name);
    index_[name] = names_.size();
    names_.push_back(name);
    tensors_.push_back(std::move(t));
    return tensors_.back();
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Tensor<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("ParamStore: unknown name " + name);
    return tensors_[it->second];
  }
  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("ParamStore: unknown name " + name);
    return tensors_[it->second];
  }

  void replace(const std::string& name, Tensor<T> t) { get(name) = std::move(t); }

  const std::vector<std::string>& names() const { return names_; }
  size_t count() const { return names_.size(); }

  int64_t total_scalars() const {
    int64_t n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
  std::map<std::string, size_t> index_;
};

template <typename T>
Tensor<T> xavier_uniform(std::vector<int> dims, int fan_in, int fan_out, SplitMix64& rng) {
  T bound = T(std::sqrt(6.0 / double(fan_in + fan_out)));
  return Tensor<T>::rand_uniform(std::move(dims), rng, -bound, bound);
}

template <typename T>
Tensor<T> kaiming_uniform(std::vector<int> dims, int fan_in, SplitMix64& rng) {
  T bound = T(std::sqrt(6.0 / double(fan_in)));
  return Tensor<T>::rand_uniform(std::move(dims), rng, -bound, bound);
}

// Decoupled weight decay Adam. Parameters are registered per step; state is
// keyed by name and reset whenever the trainable set changes (each continual
// step trains with a fresh optimizer).
template <typename T>
class AdamW {
 public:
  struct Config {
    T lr = T(1e-4);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    T weight_decay = T(1e-4);
  };

  explicit AdamW(Config cfg) : cfg_(cfg) {}

  void register_param(const std::string& name, Tensor<T>* param) {
    params_.push_back({name, param, Tensor<T>(param->dims()), Tensor<T>(param->dims())});
  }

  size_t param_count() const { return params_.size(); }

  // grads must be keyed identically to the registered set.
  void step(const std::map<std::string, Tensor<T>>& grads) {
    ++t_;
    T bc1 = T(1) - std::pow(cfg_.beta1, T(t_));
    T bc2 = T(1) - std::pow(cfg_.beta2, T(t_));
    for (auto& s : params_) {
      auto it = grads.find(s.name);
      if (it == grads.end()) throw std::invalid_argument("AdamW: missing grad for " + s.name);
      const Tensor<T>& g = it->second;
      Tensor<T>& p = *s.param;
      for (int64_t i = 0; i < p.numel(); ++i) {
        s.m[i] = cfg_.beta1 * s.m[i] + (T(1) - cfg_.beta1) * g[i];
        s.v[i] = cfg_.beta2 * s.v[i] + (T(1) - cfg_.beta2) * g[i] * g[i];
        T mhat = s.m[i] / bc1;
        T vhat = s.v[i] / bc2;
        p[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p[i]);
      }
    }
  }

 private:
  struct Slot {
    std::string name;
    Tensor<T>* param;
    Tensor<T> m;
    Tensor<T> v;
  };
  Config cfg_;
  std::vector<Slot> params_;
  int64_t t_ = 0;
};

}  // namespace ciseg
