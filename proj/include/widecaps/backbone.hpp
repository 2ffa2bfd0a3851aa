#pragma once

// Convolutional stem, bottleneck residual stages with optional SE gating, and the
// primary-capsule layer.
//
// Parameter naming: "stem.<i>.kernel|bias", "stage<s>.block<b>.<layer>.*",
// "primary.conv.kernel", "primary.bn.*". Batch-norm layers own "<name>.gamma" and
// "<name>.beta" parameters plus running statistics under "<name>".

#include <array>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "widecaps/attention.hpp"
#include "widecaps/parameters.hpp"
#include "widecaps/routing.hpp"

namespace widecaps {

enum class BlockKind {
  standard_bottleneck,  // f/4, f/4, f
  wide_bottleneck,      // f/4, f/2, f
  wide_prose,           // f/2, f/2, 2f ("halve, then multiply by 4")
};

inline std::string to_string(BlockKind k) {
  switch (k) {
    case BlockKind::standard_bottleneck: return "standard_bottleneck";
    case BlockKind::wide_bottleneck: return "wide_bottleneck";
    case BlockKind::wide_prose: return "wide_prose";
  }
  return "?";
}

inline BlockKind parse_block_kind(const std::string& s) {
  if (s == "standard_bottleneck" || s == "standard") return BlockKind::standard_bottleneck;
  if (s == "wide_bottleneck" || s == "wide") return BlockKind::wide_bottleneck;
  if (s == "wide_prose") return BlockKind::wide_prose;
  throw ConfigError("unknown block kind '" + s + "'");
}

struct ChannelPlan {
  std::size_t reduce;  // 1x1
  std::size_t inner;   // 3x3
  std::size_t expand;  // 1x1, block output width
};

inline ChannelPlan channel_plan(BlockKind kind, std::size_t filters) {
  if (filters == 0 || filters % 4 != 0) {
    throw ConfigError("bottleneck filters must be a positive multiple of 4, got " +
                      std::to_string(filters));
  }
  switch (kind) {
    case BlockKind::standard_bottleneck: return {filters / 4, filters / 4, filters};
    case BlockKind::wide_bottleneck: return {filters / 4, filters / 2, filters};
    case BlockKind::wide_prose: return {filters / 2, filters / 2, 2 * filters};
  }
  throw ConfigError("unknown block kind");
}

struct BlockSpec {
  BlockKind kind = BlockKind::wide_bottleneck;
  std::size_t filters = 64;
  std::size_t stride = 1;
  bool se = true;
  bool projection = true;
  std::size_t se_ratio = 0;  // 0: default_se_ratio(output width)

  void validate() const {
    channel_plan(kind, filters);
    if (stride != 1 && stride != 2) throw ConfigError("block stride must be 1 or 2");
  }
  std::size_t out_channels() const { return channel_plan(kind, filters).expand; }
  std::size_t effective_se_ratio() const {
    return se_ratio ? se_ratio : default_se_ratio(out_channels());
  }
};

/// Declarative architecture description.
struct ModelConfig {
  std::size_t input_height = 32;
  std::size_t input_width = 32;
  std::size_t input_channels = 3;
  std::vector<std::size_t> stem_widths{16, 32, 64, 128};
  std::vector<std::size_t> stage_depths{4, 8, 4};
  std::vector<std::size_t> stage_widths{64, 128, 256};
  BlockKind block = BlockKind::wide_bottleneck;
  bool se = true;
  std::size_t se_ratio = 0;  // 0: per-width default
  std::size_t primary_types = 8;  // C'
  std::size_t primary_dim = 16;   // K
  std::size_t primary_stride = 2;
  std::size_t classes = 10;    // J
  std::size_t class_dim = 16;  // k
  RoutingVariant routing = RoutingVariant::modified;
  bool attention_caps = true;
  std::size_t attention_se_ratio = 0;  // 0: 2 when J is even, else 1
  double bn_epsilon = 1e-5;
  double bn_momentum = 0.9;
  // Optional fixed per-channel input standardization (x - mean) / std; empty disables.
  std::vector<double> input_mean;
  std::vector<double> input_std;

  void validate() const {
    auto positive = [](const std::vector<std::size_t>& v, const char* what, std::size_t count) {
      if (v.size() != count) {
        throw ConfigError(std::string(what) + " must list " + std::to_string(count) + " values");
      }
      for (auto x : v)
        if (x == 0) throw ConfigError(std::string(what) + " entries must be positive");
    };
    positive(stem_widths, "stem_widths", 4);
    positive(stage_depths, "stage_depths", 3);
    positive(stage_widths, "stage_widths", 3);
    if (input_height < 3 || input_width < 3 || input_channels == 0) {
      throw ConfigError("input must be at least 3x3 with one channel");
    }
    for (auto w : stage_widths) channel_plan(block, w);
    if (primary_types == 0 || primary_dim == 0 || class_dim == 0) {
      throw ConfigError("capsule dimensions must be positive");
    }
    if (primary_stride != 1 && primary_stride != 2) throw ConfigError("primary_stride must be 1 or 2");
    if (classes < 2) throw ConfigError("at least 2 classes are required");
    if (!(bn_momentum >= 0.0 && bn_momentum < 1.0) || !(bn_epsilon > 0.0)) {
      throw ConfigError("batch-norm momentum must be in [0,1) and epsilon positive");
    }
    if (input_mean.size() != input_std.size() || (!input_mean.empty() && input_mean.size() != input_channels)) {
      throw ConfigError("input_mean/input_std must both be empty or list one value per input channel");
    }
    for (auto s : input_std)
      if (!(s > 0.0)) throw ConfigError("input_std entries must be positive");
    SEParams<double>::checked_hidden(classes, effective_attention_ratio());
    if (se && se_ratio) {
      for (auto w : stage_widths) SEParams<double>::checked_hidden(channel_plan(block, w).expand, se_ratio);
    }
  }

  std::size_t effective_attention_ratio() const {
    if (attention_se_ratio) return attention_se_ratio;
    return classes % 2 == 0 ? 2 : 1;
  }

  BlockSpec block_spec(std::size_t stage, std::size_t index) const {
    BlockSpec b;
    b.kind = block;
    b.filters = stage_widths.at(stage);
    b.stride = (stage > 0 && index == 0) ? 2 : 1;
    b.se = se;
    b.projection = true;
    b.se_ratio = se_ratio;
    return b;
  }

  std::size_t total_blocks() const {
    std::size_t n = 0;
    for (auto d : stage_depths) n += d;
    return n;
  }

  /// Spatial extent after each stage: stage 0 keeps the input size, later stages halve
  /// it (rounding up, as "same" padding does).
  std::array<std::pair<std::size_t, std::size_t>, 3> stage_extents() const {
    std::array<std::pair<std::size_t, std::size_t>, 3> out{};
    std::size_t h = input_height, w = input_width;
    for (std::size_t s = 0; s < 3; ++s) {
      if (s > 0) {
        h = (h + 1) / 2;
        w = (w + 1) / 2;
      }
      out[s] = {h, w};
    }
    return out;
  }

  std::size_t backbone_channels() const { return channel_plan(block, stage_widths[2]).expand; }

  std::pair<std::size_t, std::size_t> primary_extent() const {
    auto [h, w] = stage_extents()[2];
    return {(h + primary_stride - 1) / primary_stride, (w + primary_stride - 1) / primary_stride};
  }

  /// Number of primary capsules n = H' · W' · C'.
  std::size_t primary_capsules() const {
    auto [h, w] = primary_extent();
    return h * w * primary_types;
  }
};

// ---------------------------------------------------------------- initialization

template <typename T>
class ParameterInitializer {
 public:
  ParameterInitializer(ModelState<T>& state, std::mt19937_64& rng) : state_(state), rng_(rng) {}

  void conv(const std::string& name, std::size_t kh, std::size_t kw, std::size_t cin,
            std::size_t cout, bool bias) {
    state_.params[name + ".kernel"] = {he_normal_init<T>({kh, kw, cin, cout}, kh * kw * cin, rng_), true};
    if (bias) state_.params[name + ".bias"] = {Tensor<T>::zeros({cout}), false};
  }

  void bn(const std::string& name, std::size_t channels) {
    state_.params[name + ".gamma"] = {Tensor<T>::full({channels}, T{1}), false};
    state_.params[name + ".beta"] = {Tensor<T>::zeros({channels}), false};
    state_.buffers.insert_or_assign(name, RunningStats<T>(channels));
  }

  void se(const std::string& name, std::size_t channels, std::size_t ratio) {
    const std::size_t hid = SEParams<T>::checked_hidden(channels, ratio);
    state_.params[name + ".w1"] = {he_normal_init<T>({channels, hid}, channels, rng_), true};
    state_.params[name + ".b1"] = {Tensor<T>::zeros({hid}), false};
    state_.params[name + ".w2"] = {he_normal_init<T>({hid, channels}, hid, rng_), true};
    state_.params[name + ".b2"] = {Tensor<T>::zeros({channels}), false};
  }

  void dense(const std::string& name, Shape shape, std::size_t fan_in) {
    state_.params[name] = {he_normal_init<T>(std::move(shape), fan_in, rng_), true};
  }

 private:
  ModelState<T>& state_;
  std::mt19937_64& rng_;
};

template <typename T>
void init_stem(ParameterInitializer<T>& init, std::size_t in_channels,
               const std::vector<std::size_t>& widths) {
  std::size_t cin = in_channels;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    init.conv("stem." + std::to_string(i), 3, 3, cin, widths[i], true);
    cin = widths[i];
  }
}

template <typename T>
void init_block(ParameterInitializer<T>& init, const std::string& prefix, const BlockSpec& spec,
                std::size_t in_channels) {
  spec.validate();
  const ChannelPlan plan = channel_plan(spec.kind, spec.filters);
  init.conv(prefix + ".conv1", 1, 1, in_channels, plan.reduce, false);
  init.bn(prefix + ".bn1", plan.reduce);
  init.conv(prefix + ".conv2", 3, 3, plan.reduce, plan.inner, false);
  init.bn(prefix + ".bn2", plan.inner);
  init.conv(prefix + ".conv3", 1, 1, plan.inner, plan.expand, false);
  init.bn(prefix + ".bn3", plan.expand);
  if (spec.se) init.se(prefix + ".se", plan.expand, spec.effective_se_ratio());
  if (spec.projection) {
    init.conv(prefix + ".proj", 1, 1, in_channels, plan.expand, false);
    init.bn(prefix + ".proj_bn", plan.expand);
  }
}

/// Parameter count of one block, from its initialized tensors.
inline std::size_t block_parameter_count(const BlockSpec& spec, std::size_t in_channels) {
  ModelState<float> state;
  std::mt19937_64 rng(0);
  ParameterInitializer<float> init(state, rng);
  init_block(init, "b", spec, in_channels);
  return count_parameters(state.params);
}

template <typename T>
void init_backbone(ParameterInitializer<T>& init, const ModelConfig& cfg) {
  init_stem(init, cfg.input_channels, cfg.stem_widths);
  std::size_t cin = cfg.stem_widths.back();
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t b = 0; b < cfg.stage_depths[s]; ++b) {
      const BlockSpec spec = cfg.block_spec(s, b);
      init_block(init, "stage" + std::to_string(s) + ".block" + std::to_string(b), spec, cin);
      cin = spec.out_channels();
    }
  const std::size_t caps_channels = cfg.primary_types * cfg.primary_dim;
  init.conv("primary.conv", 3, 3, cin, caps_channels, false);
  init.bn("primary.bn", caps_channels);
}

// ---------------------------------------------------------------- forward

template <typename T>
Var<T> conv_layer(ModelContext<T>& ctx, const std::string& name, Var<T> x, std::size_t stride) {
  Var<T> y = conv2d(x, ctx.param(name + ".kernel"), stride, Padding::same);
  if (ctx.has_param(name + ".bias")) y = add_bias(y, ctx.param(name + ".bias"));
  return y;
}

template <typename T>
Var<T> bn_layer(ModelContext<T>& ctx, const std::string& name, Var<T> x) {
  return batch_norm(x, ctx.param(name + ".gamma"), ctx.param(name + ".beta"), ctx.mode(),
                    ctx.stats(name), ctx.bn_options());
}

template <typename T>
SEVars<T> se_vars(ModelContext<T>& ctx, const std::string& name) {
  return {ctx.param(name + ".w1"), ctx.param(name + ".b1"), ctx.param(name + ".w2"),
          ctx.param(name + ".b2")};
}

/// Four 3x3 stride-1 "same" convolutions, each followed by ReLU.
template <typename T>
Var<T> conv_stem(ModelContext<T>& ctx, Var<T> x, std::size_t layers = 4) {
  const auto& xs = x.shape();
  const std::size_t h = xs[xs.size() - 3], w = xs[xs.size() - 2];
  if (h < 3 || w < 3) {
    throw DimensionError("conv_stem: input " + shape_string(xs) + " is smaller than the 3x3 kernel");
  }
  for (std::size_t i = 0; i < layers; ++i) x = relu(conv_layer(ctx, "stem." + std::to_string(i), x, 1));
  return x;
}

/// Bottleneck residual block: 1x1 -> BN -> ReLU -> 3x3 (strided) -> BN -> ReLU -> 1x1 -> BN,
/// optional SE gating, projection or identity skip, final ReLU. The channel plan picks
/// between the standard and wide variants.
template <typename T>
Var<T> bottleneck_block(ModelContext<T>& ctx, const std::string& prefix, Var<T> x, const BlockSpec& spec) {
  spec.validate();
  const std::size_t cin = x.shape().back();
  const ChannelPlan plan = channel_plan(spec.kind, spec.filters);
  if (!spec.projection && (cin != plan.expand || spec.stride != 1)) {
    throw DimensionError("bottleneck block '" + prefix + "': identity skip needs " +
                         std::to_string(plan.expand) + " input channels and stride 1, got " +
                         shape_string(x.shape()) + " stride " + std::to_string(spec.stride));
  }
  Var<T> y = relu(bn_layer(ctx, prefix + ".bn1", conv_layer(ctx, prefix + ".conv1", x, 1)));
  y = relu(bn_layer(ctx, prefix + ".bn2", conv_layer(ctx, prefix + ".conv2", y, spec.stride)));
  y = bn_layer(ctx, prefix + ".bn3", conv_layer(ctx, prefix + ".conv3", y, 1));
  if (spec.se) y = se_block(y, se_vars(ctx, prefix + ".se"));
  Var<T> skip = spec.projection
                    ? bn_layer(ctx, prefix + ".proj_bn", conv_layer(ctx, prefix + ".proj", x, spec.stride))
                    : x;
  return relu(add(y, skip));
}

template <typename T>
Var<T> wide_bottleneck_se_block(ModelContext<T>& ctx, const std::string& prefix, Var<T> x, BlockSpec spec) {
  if (spec.kind == BlockKind::standard_bottleneck) spec.kind = BlockKind::wide_bottleneck;
  return bottleneck_block(ctx, prefix, x, spec);
}

template <typename T>
Var<T> standard_bottleneck_block(ModelContext<T>& ctx, const std::string& prefix, Var<T> x, BlockSpec spec) {
  spec.kind = BlockKind::standard_bottleneck;
  return bottleneck_block(ctx, prefix, x, spec);
}

/// Stem followed by three residual stages; the first block of stages 2 and 3 has stride 2.
/// Returns each stage's output.
template <typename T>
std::vector<Var<T>> backbone_stages(ModelContext<T>& ctx, const ModelConfig& cfg, Var<T> x) {
  x = conv_stem(ctx, x);
  std::vector<Var<T>> outs;
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t b = 0; b < cfg.stage_depths[s]; ++b) {
      x = bottleneck_block(ctx, "stage" + std::to_string(s) + ".block" + std::to_string(b), x,
                           cfg.block_spec(s, b));
    }
    outs.push_back(x);
  }
  return outs;
}

template <typename T>
Var<T> backbone_forward(ModelContext<T>& ctx, const ModelConfig& cfg, Var<T> x) {
  return backbone_stages(ctx, cfg, x).back();
}

/// Strided conv -> BN -> reshape [.., H, W, C'·K] to [.., H, W, C', K] -> squash.
template <typename T>
Var<T> primary_capsule_layer(ModelContext<T>& ctx, Var<T> x, std::size_t capsule_dim, std::size_t stride = 2) {
  if (capsule_dim == 0) throw ConfigError("primary capsule dimension must be positive");
  Var<T> y = bn_layer(ctx, "primary.bn", conv_layer(ctx, "primary.conv", x, stride));
  Shape s = y.shape();
  const std::size_t c = s.back();
  if (c % capsule_dim != 0) {
    throw ConfigError("primary capsules: " + std::to_string(c) + " channels are not divisible by K=" +
                      std::to_string(capsule_dim));
  }
  s.back() = c / capsule_dim;
  s.push_back(capsule_dim);
  return squash(reshape(y, s));
}

}  // namespace widecaps
