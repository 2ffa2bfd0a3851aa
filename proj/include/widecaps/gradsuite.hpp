#pragma once

// Finite-difference suites over every differentiable operation and a toy model, shared
// by the CLI `gradcheck` subcommand and the test suite.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "widecaps/gradcheck.hpp"
#include "widecaps/model.hpp"

namespace widecaps {

struct GradCase {
  std::string module;  // tensor | routing | attention | backbone | model
  std::string name;
  std::function<GradCheckReport()> run;
};

namespace gradsuite {

inline Tensor<double> normal(Shape s, std::mt19937_64& rng, double stddev = 1.0) {
  Tensor<double> t(std::move(s));
  std::normal_distribution<double> d(0.0, stddev);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

// Uniform magnitudes in [lo, hi] with random sign; keeps relu inputs off the kink.
inline Tensor<double> away_from_zero(Shape s, std::mt19937_64& rng, double lo = 0.05, double hi = 1.0) {
  Tensor<double> t(std::move(s));
  std::uniform_real_distribution<double> mag(lo, hi);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.data()) v = sign(rng) ? mag(rng) : -mag(rng);
  return t;
}

inline Tensor<double> one_hot_rows(std::size_t rows, std::size_t classes, std::mt19937_64& rng) {
  Tensor<double> t = Tensor<double>::zeros({rows, classes});
  std::uniform_int_distribution<std::size_t> pick(0, classes - 1);
  for (std::size_t r = 0; r < rows; ++r) t[r * classes + pick(rng)] = 1.0;
  return t;
}

// Scalar readout sum(y ⊙ w) with fixed random w, so every output coordinate matters
// (a plain sum would hide errors in ops whose outputs sum to a constant, e.g. softmax).
inline Var<double> probe(Var<double> y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, y.tape->constant(normal(y.shape(), rng))));
}

/// The toy configuration used for the whole-model check: stem widths divided by 8,
/// depths [1,1,1], 8x8 single-channel input, J=3.
inline ModelConfig toy_model_config() {
  ModelConfig c;
  c.input_height = 8;
  c.input_width = 8;
  c.input_channels = 1;
  c.stem_widths = {2, 4, 8, 16};
  c.stage_depths = {1, 1, 1};
  c.stage_widths = {8, 16, 32};
  c.primary_types = 4;
  c.primary_dim = 4;
  c.primary_stride = 1;
  c.classes = 3;
  c.class_dim = 4;
  return c;
}

// Gradient of the model loss w.r.t. every parameter (and the input images).
inline GradCheckReport model_check(const ModelConfig& cfg, std::size_t batch, std::size_t coords,
                                   std::uint64_t seed) {
  const WideCapsModel<double> model(cfg);
  const ModelState<double> init = model.init(seed);
  std::mt19937_64 rng(seed + 1);
  std::vector<std::string> names;
  std::vector<Tensor<double>> values;
  for (const auto& [name, p] : init.params) {
    names.push_back(name);
    Tensor<double> v = p.value;
    // Perturb BN affine and biases away from their symmetric initial values.
    if (name.ends_with(".gamma")) {
      for (auto& x : v.data()) x = 1.0 + 0.2 * std::normal_distribution<double>(0.0, 1.0)(rng);
    } else if (name.ends_with(".beta") || name.ends_with(".bias") || name.ends_with(".b1") ||
               name.ends_with(".b2")) {
      for (auto& x : v.data()) x = 0.1 * std::normal_distribution<double>(0.0, 1.0)(rng);
    }
    values.push_back(std::move(v));
  }
  names.push_back("images");
  Tensor<double> images({batch, cfg.input_height, cfg.input_width, cfg.input_channels});
  std::uniform_real_distribution<double> pix(0.0, 1.0);
  for (auto& x : images.data()) x = pix(rng);
  values.push_back(images);
  const Tensor<double> targets = one_hot_rows(batch, cfg.classes, rng);

  auto f = [&](Tape<double>& tape, std::vector<Var<double>>& vars) {
    ModelState<double> state = init;  // fresh running statistics every evaluation
    ModelContext<double> ctx(tape, state, BatchNormMode::train, model.bn_options(), true);
    for (std::size_t i = 0; i + 1 < vars.size(); ++i) ctx.bind(names[i], vars[i]);
    ModelOutput<double> out = model.forward(ctx, vars.back());
    return cross_entropy(out.probabilities, targets);
  };
  GradCheckOptions opts;
  opts.max_coords_per_param = coords;
  opts.seed = seed;
  return finite_diff_check(f, values, names, opts);
}

// Backbone alone (stem + stages + primary capsules) with a probe readout.
inline GradCheckReport backbone_check(std::uint64_t seed) {
  const ModelConfig cfg = toy_model_config();
  const WideCapsModel<double> model(cfg);
  const ModelState<double> init = model.init(seed);
  std::vector<std::string> names;
  std::vector<Tensor<double>> values;
  for (const auto& [name, p] : init.params) {
    if (name.rfind("caps.", 0) == 0 || name.rfind("attention.", 0) == 0) continue;
    names.push_back(name);
    values.push_back(p.value);
  }
  std::mt19937_64 rng(seed + 7);
  names.push_back("images");
  values.push_back(normal({2, cfg.input_height, cfg.input_width, 1}, rng));
  auto f = [&](Tape<double>& tape, std::vector<Var<double>>& vars) {
    ModelState<double> state = init;
    ModelContext<double> ctx(tape, state, BatchNormMode::train, model.bn_options(), true);
    for (std::size_t i = 0; i + 1 < vars.size(); ++i) ctx.bind(names[i], vars[i]);
    Var<double> feats = backbone_forward(ctx, cfg, vars.back());
    return probe(primary_capsule_layer(ctx, feats, cfg.primary_dim, cfg.primary_stride), seed);
  };
  GradCheckOptions opts;
  opts.max_coords_per_param = 12;
  opts.seed = seed;
  return finite_diff_check(f, values, names, opts);
}

}  // namespace gradsuite

/// Every gradient check, tagged by module.
inline std::vector<GradCase> gradient_cases(std::uint64_t seed = 2024) {
  using namespace gradsuite;
  using V = std::vector<Var<double>>;
  using P = std::vector<Tensor<double>>;
  std::vector<GradCase> cases;
  auto push = [&](std::string module, std::string name, std::function<GradCheckReport()> run) {
    cases.push_back({std::move(module), std::move(name), std::move(run)});
  };
  auto simple = [&](std::string module, std::string name, P params, std::vector<std::string> names,
                    std::function<Var<double>(Tape<double>&, V&)> f) {
    push(std::move(module), std::move(name), [params, names, f] { return finite_diff_check(f, params, names); });
  };
  std::mt19937_64 rng(seed);

  simple("tensor", "matmul", {normal({3, 4}, rng), normal({4, 2}, rng)}, {"a", "b"},
         [](Tape<double>&, V& v) { return probe(matmul(v[0], v[1]), 1); });
  simple("tensor", "add_mul_scale", {normal({2, 3}, rng), normal({2, 3}, rng)}, {"a", "b"},
         [](Tape<double>&, V& v) { return probe(scale(add(mul(v[0], v[1]), v[0]), 0.7), 2); });
  simple("tensor", "gradient_accumulation", {normal({4}, rng)}, {"x"},
         [](Tape<double>&, V& v) { return probe(mul(v[0], sigmoid(v[0])), 3); });
  simple("tensor", "conv2d_same", {normal({6, 6, 2}, rng), normal({3, 3, 2, 3}, rng)}, {"x", "kernels"},
         [](Tape<double>&, V& v) { return probe(conv2d(v[0], v[1], 1, Padding::same), 4); });
  simple("tensor", "conv2d_stride2_batched", {normal({2, 5, 5, 2}, rng), normal({3, 3, 2, 2}, rng)},
         {"x", "kernels"}, [](Tape<double>&, V& v) { return probe(conv2d(v[0], v[1], 2, Padding::same), 5); });
  simple("tensor", "conv2d_valid", {normal({5, 6, 2}, rng), normal({2, 3, 2, 2}, rng)}, {"x", "kernels"},
         [](Tape<double>&, V& v) { return probe(conv2d(v[0], v[1], 1, Padding::valid), 6); });
  simple("tensor", "conv2d_pointwise", {normal({2, 3, 3, 4}, rng), normal({1, 1, 4, 3}, rng)}, {"x", "kernels"},
         [](Tape<double>&, V& v) { return probe(conv2d(v[0], v[1], 1, Padding::same), 7); });
  simple("tensor", "global_avg_pool", {normal({2, 3, 3, 4}, rng)}, {"x"},
         [](Tape<double>&, V& v) { return probe(global_avg_pool(v[0]), 8); });
  {
    Tensor<double> gamma = normal({3}, rng, 0.3);
    for (auto& g : gamma.data()) g += 1.0;
    simple("tensor", "batch_norm_train", {normal({4, 2, 2, 3}, rng), gamma, normal({3}, rng)},
           {"x", "gamma", "beta"}, [](Tape<double>&, V& v) {
             RunningStats<double> stats(3);
             return probe(batch_norm(v[0], v[1], v[2], BatchNormMode::train, stats), 9);
           });
    simple("tensor", "batch_norm_infer", {normal({3, 4}, rng), normal({4}, rng), normal({4}, rng)}, {"x", "gamma", "beta"},
           [](Tape<double>&, V& v) {
             RunningStats<double> stats(Tensor<double>({4}, {0.1, -0.2, 0.3, 0.0}),
                                        Tensor<double>({4}, {0.5, 1.5, 2.0, 1.0}));
             return probe(batch_norm(v[0], v[1], v[2], BatchNormMode::infer, stats), 10);
           });
  }
  simple("tensor", "relu", {away_from_zero({3, 4}, rng)}, {"x"},
         [](Tape<double>&, V& v) { return probe(relu(v[0]), 11); });
  simple("tensor", "sigmoid", {normal({3, 4}, rng, 3.0)}, {"x"},
         [](Tape<double>&, V& v) { return probe(sigmoid(v[0]), 12); });
  simple("tensor", "exp", {normal({5}, rng)}, {"x"}, [](Tape<double>&, V& v) { return probe(exp(v[0]), 13); });
  simple("tensor", "softmax", {normal({3, 5}, rng, 2.0)}, {"x"},
         [](Tape<double>&, V& v) { return probe(softmax(v[0]), 14); });
  simple("tensor", "linear", {normal({3, 4}, rng), normal({4, 2}, rng), normal({2}, rng)}, {"x", "w", "b"},
         [](Tape<double>&, V& v) { return probe(linear(v[0], v[1], v[2]), 15); });
  simple("tensor", "reductions", {normal({2, 3, 4}, rng)}, {"x"}, [](Tape<double>&, V& v) {
    return add(probe(mean_last(v[0]), 16), add(probe(sum_last(v[0]), 17), mean(mul(v[0], v[0]))));
  });
  {
    Tensor<double> logits = normal({4, 3}, rng);
    const Tensor<double> targets = one_hot_rows(4, 3, rng);
    simple("tensor", "cross_entropy", {logits}, {"logits"},
           [targets](Tape<double>&, V& v) { return cross_entropy(softmax(v[0]), targets); });
    Tensor<double> probs({4, 3});
    std::uniform_real_distribution<double> u(0.05, 1.0);
    for (auto& p : probs.data()) p = u(rng);
    simple("tensor", "cross_entropy_direct", {probs}, {"probs"},
           [targets](Tape<double>&, V& v) { return cross_entropy(v[0], targets); });
  }

  simple("routing", "squash", {normal({3, 4}, rng)}, {"s"}, [](Tape<double>&, V& v) { return probe(squash(v[0]), 20); });
  simple("routing", "l2_normalize", {normal({3, 4}, rng)}, {"x"},
         [](Tape<double>&, V& v) { return probe(l2_normalize(v[0]), 21); });
  simple("routing", "pose", {normal({2, 5}, rng)}, {"h"}, [](Tape<double>&, V& v) { return probe(pose(v[0]), 22); });
  simple("routing", "predict", {normal({2, 3, 4}, rng), normal({3, 3, 4, 2}, rng)}, {"u", "w"},
         [](Tape<double>&, V& v) { return probe(predict(v[0], v[1]), 23); });
  simple("routing", "fm_interaction", {normal({3, 6, 4}, rng)}, {"preds"},
         [](Tape<double>&, V& v) { return probe(fm_interaction(v[0]), 24); });
  simple("routing", "agreement", {normal({3, 4}, rng)}, {"h"},
         [](Tape<double>&, V& v) { return probe(agreement(v[0]), 25); });
  simple("routing", "modified_fm_routing", {normal({3, 6, 4}, rng)}, {"preds"}, [](Tape<double>&, V& v) {
    auto r = modified_fm_routing(v[0]);
    return add(probe(r.activations, 26), probe(r.poses, 27));
  });
  simple("routing", "original_fm_routing", {normal({2, 3, 5, 4}, rng)}, {"preds"}, [](Tape<double>&, V& v) {
    auto r = original_fm_routing(v[0]);
    return add(probe(r.activations, 28), probe(r.poses, 29));
  });

  auto se_params = [&](std::size_t c, std::size_t r) {
    const std::size_t hid = c / r;
    return P{normal({c, hid}, rng, 0.5), normal({hid}, rng, 0.2), normal({hid, c}, rng, 0.5), normal({c}, rng, 0.2)};
  };
  {
    P params{normal({2, 3, 3, 4}, rng)};
    for (auto& t : se_params(4, 2)) params.push_back(t);
    simple("attention", "se_block", params, {"features", "w1", "b1", "w2", "b2"}, [](Tape<double>&, V& v) {
      return probe(se_block(v[0], SEVars<double>{v[1], v[2], v[3], v[4]}), 30);
    });
  }
  {
    P params{normal({2, 4, 3}, rng), normal({2, 4}, rng)};
    for (auto& t : se_params(4, 2)) params.push_back(t);
    simple("attention", "attention_capsules", params, {"poses", "agreements", "w1", "b1", "w2", "b2"},
           [](Tape<double>&, V& v) {
             auto r = attention_capsules(v[0], v[1], SEVars<double>{v[2], v[3], v[4], v[5]});
             return add(probe(r.activations, 31), probe(r.poses, 32));
           });
  }

  push("backbone", "backbone_and_primary_capsules", [seed] { return backbone_check(seed); });
  push("model", "toy_widecaps_loss", [seed] { return model_check(toy_model_config(), 3, 10, seed); });
  return cases;
}

inline bool is_gradient_module(const std::string& m) {
  return m == "all" || m == "tensor" || m == "routing" || m == "attention" || m == "backbone" || m == "model";
}

}  // namespace widecaps
