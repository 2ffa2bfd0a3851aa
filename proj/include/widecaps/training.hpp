#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "widecaps/data.hpp"
#include "widecaps/model.hpp"

namespace widecaps {

struct Hyperparameters {
  double initial_lr = 0.01;  // ILR
  double drop_rate = 0.5;
  std::size_t epoch_drop = 60;
  double momentum = 0.9;
  double l2 = 5e-4;
  std::size_t batch_size = 128;
  std::size_t epochs = 1;
  std::size_t patience = 0;  // stop after this many epochs without improvement; 0 disables
};

template <typename T>
struct TrainState {
  ModelState<T> model;
  std::map<std::string, Tensor<T>> velocity;  // mirrors model.params
  std::size_t epoch = 0;
  Hyperparameters hyper;
  std::uint64_t seed = 0;

  static TrainState fresh(ModelState<T> model, Hyperparameters hyper, std::uint64_t seed) {
    TrainState s;
    for (const auto& [name, p] : model.params) s.velocity.emplace(name, Tensor<T>::zeros(p.value.shape()));
    s.model = std::move(model);
    s.hyper = hyper;
    s.seed = seed;
    return s;
  }
};

struct EpochReport {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double accuracy = 0.0;
  double lr = 0.0;
  double wall_seconds = 0.0;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

/// ILR · drop_rate^floor(epoch / epoch_drop).
inline double step_lr(std::size_t epoch, double initial_lr, double drop_rate, std::size_t epoch_drop) {
  if (epoch_drop == 0) throw ConfigError("step_lr: epoch_drop must be >= 1");
  return initial_lr * std::pow(drop_rate, static_cast<double>(epoch / epoch_drop));
}

/// -sum_j y_j log(max(x̂_j, 1e-12)) for one prediction.
template <typename T>
T cross_entropy_loss(const Tensor<T>& x_hat, const Tensor<T>& target) {
  Tape<T> tape;
  return cross_entropy(tape.constant(x_hat), target).value()[0];
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
template <typename T>
double accuracy(const Tensor<T>& predictions, std::span<const int> labels) {
  if (predictions.rank() != 2 || predictions.extent(0) != labels.size() || labels.empty()) {
    throw InputError("accuracy: predictions " + shape_string(predictions.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t j = predictions.extent(1);
  std::size_t correct = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= j) {
      throw InputError("accuracy: label " + std::to_string(labels[r]) + " outside [0," + std::to_string(j) + ")");
    }
    const T* row = predictions.raw() + r * j;
    const auto best = static_cast<std::size_t>(std::max_element(row, row + j) - row);
    if (best == static_cast<std::size_t>(labels[r])) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

template <typename T>
using GradientMap = std::map<std::string, Tensor<T>>;

/// 0.5 · λ · Σ θ² over decayed parameters.
template <typename T>
double l2_penalty(const ParameterSet<T>& params, double coeff) {
  double total = 0.0;
  for (const auto& [name, p] : params) {
    if (!p.decay) continue;
    for (auto v : p.value.data()) total += static_cast<double>(v) * static_cast<double>(v);
  }
  return 0.5 * coeff * total;
}

/// g' = g + λθ (decayed parameters only); v <- μv - lr·g'; θ <- θ + v, with lr from step_lr.
template <typename T>
void sgd_momentum_step(TrainState<T>& state, const GradientMap<T>& grads) {
  const auto& h = state.hyper;
  const T lr = static_cast<T>(step_lr(state.epoch, h.initial_lr, h.drop_rate, h.epoch_drop));
  const T mu = static_cast<T>(h.momentum);
  const T l2 = static_cast<T>(h.l2);
  for (const auto& [name, g] : grads) {
    for (auto v : g.data())
      if (!std::isfinite(v)) throw DivergenceError("non-finite gradient for parameter '" + name + "'");
  }
  for (auto& [name, p] : state.model.params) {
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const Tensor<T>& g = git->second;
    if (g.shape() != p.value.shape()) {
      throw DimensionError("gradient for '" + name + "' has shape " + shape_string(g.shape()) +
                           ", parameter " + shape_string(p.value.shape()));
    }
    auto vit = state.velocity.find(name);
    if (vit == state.velocity.end()) vit = state.velocity.emplace(name, Tensor<T>::zeros(p.value.shape())).first;
    Tensor<T>& vel = vit->second;
    const T decay = p.decay ? l2 : T{0};
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T gi = g[i] + decay * p.value[i];
      vel[i] = mu * vel[i] - lr * gi;
      p.value[i] += vel[i];
    }
  }
}

/// Splits a permutation into batches; a trailing singleton is folded into the previous
/// batch so batch-norm always sees at least two samples.
inline std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t b = 0; b < n; b += batch_size) out.emplace_back(b, std::min(n, b + batch_size));
  if (out.size() > 1 && out.back().second - out.back().first == 1) {
    out.pop_back();
    out.back().second = n;
  }
  return out;
}

/// Forward + loss + backward on one batch. Returns loss and fills grads.
template <typename T>
double compute_gradients(const WideCapsModel<T>& model, ModelState<T>& state, const Batch<T>& batch,
                         GradientMap<T>& grads, Tensor<T>* probabilities = nullptr) {
  Tape<T> tape;
  ModelContext<T> ctx(tape, state, BatchNormMode::train, model.bn_options(), true);
  Var<T> images = tape.constant(batch.images);
  ModelOutput<T> out = model.forward(ctx, images);
  Var<T> loss = cross_entropy(out.probabilities, batch.targets);
  tape.backward(loss);
  grads.clear();
  for (const auto& [name, v] : ctx.bound()) grads.emplace(name, tape.grad(v));
  if (probabilities) *probabilities = out.probabilities.value();
  return static_cast<double>(loss.value()[0]);
}

/// One pass over the dataset in a seeded shuffled order, one SGD step per batch.
template <typename T>
EpochReport train_epoch(TrainState<T>& state, const WideCapsModel<T>& model, const LabeledDataset& data,
                        std::size_t batch_size) {
  if (data.size() == 0) throw InputError("train_epoch: dataset is empty");
  const auto start = std::chrono::steady_clock::now();
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(state.seed ^ (0x9e3779b97f4a7c15ULL * (state.epoch + 1)));
  std::shuffle(order.begin(), order.end(), rng);

  EpochReport report;
  report.epoch = state.epoch;
  report.lr = step_lr(state.epoch, state.hyper.initial_lr, state.hyper.drop_rate, state.hyper.epoch_drop);
  double loss_sum = 0.0;
  std::size_t correct = 0;
  GradientMap<T> grads;
  Tensor<T> probs;
  for (auto [lo, hi] : batch_ranges(order.size(), batch_size)) {
    std::span<const std::size_t> idx(order.data() + lo, hi - lo);
    Batch<T> batch = make_batch<T>(data, idx);
    const double loss = compute_gradients(model, state.model, batch, grads, &probs);
    loss_sum += loss * static_cast<double>(hi - lo);
    correct += static_cast<std::size_t>(std::lround(accuracy(probs, batch.labels) * static_cast<double>(hi - lo)));
    sgd_momentum_step(state, grads);
  }
  report.mean_loss = loss_sum / static_cast<double>(data.size());
  report.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  ++state.epoch;
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

/// Class probabilities for every sample, batch-norm in inference mode.
template <typename T>
Tensor<T> predict_probabilities(const WideCapsModel<T>& model, const ModelState<T>& state,
                                const LabeledDataset& data, std::size_t batch_size = 128) {
  ModelState<T> frozen = state;
  Tensor<T> out({data.size(), data.classes});
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t lo = 0; lo < data.size(); lo += batch_size) {
    const std::size_t hi = std::min(data.size(), lo + batch_size);
    Batch<T> batch = make_batch<T>(data, std::span<const std::size_t>(idx.data() + lo, hi - lo));
    Tape<T> tape;
    ModelContext<T> ctx(tape, frozen, BatchNormMode::infer, model.bn_options(), false);
    ModelOutput<T> o = model.forward(ctx, tape.constant(batch.images));
    std::copy(o.probabilities.value().data().begin(), o.probabilities.value().data().end(),
              out.raw() + lo * data.classes);
  }
  return out;
}

/// Mean cross-entropy and accuracy; leaves parameters and running statistics untouched.
template <typename T>
EvalResult evaluate(const WideCapsModel<T>& model, const ModelState<T>& state, const LabeledDataset& data,
                    std::size_t batch_size = 128) {
  if (data.size() == 0) throw InputError("evaluate: dataset is empty");
  if (data.classes != model.config().classes) {
    throw InputError("evaluate: dataset has " + std::to_string(data.classes) + " classes, model " +
                     std::to_string(model.config().classes));
  }
  const Tensor<T> probs = predict_probabilities(model, state, data, batch_size);
  EvalResult r;
  const std::size_t j = data.classes;
  double loss = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const T p = probs[i * j + static_cast<std::size_t>(data.labels[i])];
    loss -= std::log(std::max(static_cast<double>(p), 1e-12));
  }
  r.loss = loss / static_cast<double>(data.size());
  r.accuracy = accuracy(probs, data.labels);
  return r;
}

}  // namespace widecaps
