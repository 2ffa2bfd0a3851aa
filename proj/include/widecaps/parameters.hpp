#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>

#include "widecaps/ops.hpp"

namespace widecaps {

template <typename T>
struct Parameter {
  Tensor<T> value;
  bool decay = false;  // subject to the L2 penalty (weights/kernels, not biases or BN affine)
};

template <typename T>
using ParameterSet = std::map<std::string, Parameter<T>>;

template <typename T>
using BufferSet = std::map<std::string, RunningStats<T>>;

/// Learned parameters plus batch-norm running statistics.
template <typename T>
struct ModelState {
  ParameterSet<T> params;
  BufferSet<T> buffers;
};

template <typename T>
std::size_t count_parameters(const ParameterSet<T>& params) {
  std::size_t n = 0;
  for (const auto& [name, p] : params) n += p.value.size();
  return n;
}

/// Samples N(0, 2 / fan_in).
template <typename T>
Tensor<T> he_normal_init(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  if (fan_in == 0) throw ConfigError("he_normal_init: fan_in must be >= 1");
  Tensor<T> out(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& v : out.data()) v = static_cast<T>(dist(rng));
  return out;
}

/// Binds model parameters onto a tape for one forward pass. Each parameter becomes a
/// single leaf, so a weight shared by several consumers accumulates all their gradients.
template <typename T>
class ModelContext {
 public:
  ModelContext(Tape<T>& tape, ModelState<T>& state, BatchNormMode mode,
               BatchNormOptions bn = {}, bool requires_grad = true)
      : tape_(tape), state_(state), mode_(mode), bn_(bn), requires_grad_(requires_grad) {}

  Tape<T>& tape() { return tape_; }
  BatchNormMode mode() const { return mode_; }
  const BatchNormOptions& bn_options() const { return bn_; }

  Var<T> param(const std::string& name) {
    if (auto it = bound_.find(name); it != bound_.end()) return it->second;
    auto it = state_.params.find(name);
    if (it == state_.params.end()) throw ConfigError("missing parameter '" + name + "'");
    Var<T> v = tape_.leaf(it->second.value, requires_grad_);
    bound_.emplace(name, v);
    return v;
  }

  /// Uses an existing tape value for a parameter instead of binding a fresh leaf.
  void bind(const std::string& name, Var<T> v) { bound_[name] = v; }

  RunningStats<T>& stats(const std::string& name) {
    auto it = state_.buffers.find(name);
    if (it == state_.buffers.end()) throw ConfigError("missing batch-norm statistics '" + name + "'");
    return it->second;
  }

  bool has_param(const std::string& name) const { return state_.params.count(name) > 0; }

  /// Leaves bound so far, by parameter name.
  const std::map<std::string, Var<T>>& bound() const { return bound_; }

 private:
  Tape<T>& tape_;
  ModelState<T>& state_;
  BatchNormMode mode_;
  BatchNormOptions bn_;
  bool requires_grad_;
  std::map<std::string, Var<T>> bound_;
};

}  // namespace widecaps
