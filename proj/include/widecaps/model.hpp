#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "widecaps/attention.hpp"
#include "widecaps/backbone.hpp"
#include "widecaps/routing.hpp"

namespace widecaps {

/// Divides each last-axis row by its sum.
template <typename T>
Var<T> normalize_rows(Var<T> x) {
  const std::size_t k = x.value().last_extent();
  const std::size_t rows = x.value().size() / k;
  Tensor<T> out = x.value();
  std::vector<T> totals(rows, T{0});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t f = 0; f < k; ++f) totals[r] += out[r * k + f];
    for (std::size_t f = 0; f < k; ++f) out[r * k + f] /= totals[r];
  }
  return x.tape->record(
      std::move(out), {x}, [ix = x.id, rows, k, totals = std::move(totals)](Tape<T>& t, std::size_t self) {
        const auto& g = t.grad_ref(self);
        const auto& y = t.value(self);
        auto& gx = t.grad_buffer(ix);
        for (std::size_t r = 0; r < rows; ++r) {
          T dot{0};
          for (std::size_t f = 0; f < k; ++f) dot += g[r * k + f] * y[r * k + f];
          for (std::size_t f = 0; f < k; ++f) gx[r * k + f] += (g[r * k + f] - dot) / totals[r];
        }
      });
}

template <typename T>
struct ModelOutput {
  Var<T> probabilities;   // [N, J], sums to 1 per row
  Var<T> activations;     // [N, J], routing (or attention) activations x̂
  Var<T> poses;           // [N, J, k]
  Var<T> raw_agreements;  // [N, J]
};

/// Full network: stem -> residual stages -> primary capsules -> prediction vectors ->
/// FM routing -> (optional) attention capsules.
template <typename T>
class WideCapsModel {
 public:
  explicit WideCapsModel(ModelConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  const ModelConfig& config() const { return cfg_; }

  ModelState<T> init(std::uint64_t seed) const {
    ModelState<T> state;
    std::mt19937_64 rng(seed);
    ParameterInitializer<T> init(state, rng);
    init_backbone(init, cfg_);
    const std::size_t n = cfg_.primary_capsules();
    init.dense("caps.weights", {cfg_.classes, n, cfg_.primary_dim, cfg_.class_dim}, cfg_.primary_dim);
    if (cfg_.attention_caps) init.se("attention", cfg_.classes, cfg_.effective_attention_ratio());
    return state;
  }

  BatchNormOptions bn_options() const { return {cfg_.bn_epsilon, cfg_.bn_momentum}; }

  /// images: [N, H, W, C].
  ModelOutput<T> forward(ModelContext<T>& ctx, Var<T> images) const {
    const auto& s = images.shape();
    if (s.size() != 4 || s[1] != cfg_.input_height || s[2] != cfg_.input_width ||
        s[3] != cfg_.input_channels) {
      throw DimensionError("model expects [N," + std::to_string(cfg_.input_height) + "," +
                           std::to_string(cfg_.input_width) + "," + std::to_string(cfg_.input_channels) +
                           "] images, got " + shape_string(s));
    }
    const std::size_t batch = s[0];
    if (!cfg_.input_mean.empty()) {
      Tensor<T> shift({cfg_.input_channels}), inv_std({cfg_.input_channels});
      for (std::size_t c = 0; c < cfg_.input_channels; ++c) {
        shift[c] = static_cast<T>(-cfg_.input_mean[c]);
        inv_std[c] = static_cast<T>(1.0 / cfg_.input_std[c]);
      }
      Tape<T>& tape = ctx.tape();
      images = mul_channels(add_bias(images, tape.constant(shift)), tape.constant(inv_std));
    }
    Var<T> features = backbone_forward(ctx, cfg_, images);
    Var<T> primary = primary_capsule_layer(ctx, features, cfg_.primary_dim, cfg_.primary_stride);
    Var<T> caps = reshape(primary, {batch, cfg_.primary_capsules(), cfg_.primary_dim});
    Var<T> preds = predict(caps, ctx.param("caps.weights"));
    RoutingResult<T> routed = fm_routing(preds, cfg_.routing);
    if (cfg_.attention_caps) {
      AttentionResult<T> att = attention_capsules(routed.poses, routed.raw_agreements, se_vars(ctx, "attention"));
      return {att.activations, att.activations, att.poses, routed.raw_agreements};
    }
    Var<T> probs = cfg_.routing == RoutingVariant::modified ? routed.activations
                                                            : normalize_rows(routed.activations);
    return {probs, routed.activations, routed.poses, routed.raw_agreements};
  }

 private:
  ModelConfig cfg_;
};

}  // namespace widecaps
