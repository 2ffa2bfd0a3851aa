#pragma once

// Squeeze-and-excitation gating, used inside residual blocks (channels of a feature
// map) and as the attention head over classification capsules (capsules as channels).

#include <cstddef>
#include <string>

#include "widecaps/ops.hpp"

namespace widecaps {

/// SE weights for C channels reduced by ratio r: w1 [C, C/r], b1 [C/r], w2 [C/r, C], b2 [C].
template <typename T>
struct SEParams {
  Tensor<T> w1, b1, w2, b2;

  std::size_t channels() const { return w1.extent(0); }
  std::size_t hidden() const { return w1.extent(1); }

  static SEParams zeros(std::size_t channels, std::size_t ratio) {
    const std::size_t hid = checked_hidden(channels, ratio);
    return {Tensor<T>::zeros({channels, hid}), Tensor<T>::zeros({hid}),
            Tensor<T>::zeros({hid, channels}), Tensor<T>::zeros({channels})};
  }

  static std::size_t checked_hidden(std::size_t channels, std::size_t ratio) {
    if (ratio == 0 || channels % ratio != 0 || channels / ratio == 0) {
      throw ConfigError("SE reduction ratio " + std::to_string(ratio) + " does not divide " +
                        std::to_string(channels) + " channels");
    }
    return channels / ratio;
  }
};

/// Reduction ratio for a channel count: 64 -> 4 and 128 -> 8 (both giving a 16-unit
/// hidden layer); otherwise 4, falling back to the largest divisor below it.
inline std::size_t default_se_ratio(std::size_t channels) {
  if (channels == 128) return 8;
  for (std::size_t r : {4u, 3u, 2u}) {
    if (channels % r == 0 && channels / r >= 1) return r;
  }
  return 1;
}

template <typename T>
struct SEVars {
  Var<T> w1, b1, w2, b2;
};

template <typename T>
SEVars<T> bind(Tape<T>& tape, const SEParams<T>& p, bool requires_grad = false) {
  return {tape.leaf(p.w1, requires_grad), tape.leaf(p.b1, requires_grad),
          tape.leaf(p.w2, requires_grad), tape.leaf(p.b2, requires_grad)};
}

namespace detail {

template <typename T>
void check_se(const SEVars<T>& p, std::size_t channels) {
  const auto& w1 = p.w1.shape();
  const auto& w2 = p.w2.shape();
  if (w1.size() != 2 || w2.size() != 2 || w1[1] != w2[0] || w2[1] != w1[0] ||
      p.b1.value().size() != w1[1] || p.b2.value().size() != w2[1]) {
    throw ConfigError("SE parameters are inconsistent: w1 " + shape_string(w1) + ", w2 " +
                      shape_string(w2));
  }
  if (w1[0] != channels) {
    throw ConfigError("SE parameters expect " + std::to_string(w1[0]) + " channels, input has " +
                      std::to_string(channels));
  }
}

}  // namespace detail

/// Excitation: sigmoid(W2 · relu(W1 · s + b1) + b2) on a squeezed descriptor s [N, C]
/// or [C]. Every gate lies in (0, 1).
template <typename T>
Var<T> se_excitation(Var<T> squeezed, const SEVars<T>& p) {
  const bool single = squeezed.shape().size() == 1;
  Var<T> s = single ? reshape(squeezed, {1, squeezed.value().size()}) : squeezed;
  detail::check_se(p, s.shape()[1]);
  Var<T> hidden = relu(linear(s, p.w1, p.b1));
  Var<T> gates = sigmoid(linear(hidden, p.w2, p.b2));
  return single ? reshape(gates, squeezed.shape()) : gates;
}

/// SE gate vector M_SE for a feature map [H, W, C] or [N, H, W, C].
template <typename T>
Var<T> se_gates(Var<T> features, const SEVars<T>& p) {
  return se_excitation(global_avg_pool(features), p);
}

/// F' = F scaled per channel by its SE gate.
template <typename T>
Var<T> se_block(Var<T> features, const SEVars<T>& p) {
  return mul_channels(features, se_gates(features, p));
}

template <typename T>
struct AttentionResult {
  Var<T> poses;        // [..., J, k]
  Var<T> activations;  // [..., J], a distribution
  Var<T> gates;        // [..., J]
};

/// Attention capsules over J classification capsules: each pose row is squeezed to its
/// mean, SE gates g are excited across classes, poses are scaled by g and the class
/// distribution is softmax(g ⊙ raw agreements).
template <typename T>
AttentionResult<T> attention_capsules(Var<T> poses, Var<T> raw_agreements, const SEVars<T>& p) {
  const auto& ps = poses.shape();
  if (ps.size() < 2 || Shape(ps.begin(), ps.end() - 1) != raw_agreements.shape()) {
    throw DimensionError("attention_capsules: poses " + shape_string(ps) +
                         " do not match agreements " + shape_string(raw_agreements.shape()));
  }
  Var<T> gates = se_excitation(mean_last(poses), p);
  Var<T> gated = scale_rows(poses, gates);
  Var<T> act = softmax(mul(gates, raw_agreements));
  return {gated, act, gates};
}

// ---------------------------------------------------------------- value-level API

template <typename T>
Tensor<T> se_block(const Tensor<T>& features, const SEParams<T>& p) {
  Tape<T> tape;
  return se_block(tape.constant(features), bind(tape, p)).value();
}

template <typename T>
Tensor<T> se_gates(const Tensor<T>& features, const SEParams<T>& p) {
  Tape<T> tape;
  return se_gates(tape.constant(features), bind(tape, p)).value();
}

template <typename T>
struct AttentionOutput {
  Tensor<T> poses;
  Tensor<T> activations;
  Tensor<T> gates;
};

template <typename T>
AttentionOutput<T> attention_capsules(const Tensor<T>& poses, const Tensor<T>& raw_agreements,
                                      const SEParams<T>& p) {
  Tape<T> tape;
  auto r = attention_capsules(tape.constant(poses), tape.constant(raw_agreements), bind(tape, p));
  return {r.poses.value(), r.activations.value(), r.gates.value()};
}

}  // namespace widecaps
