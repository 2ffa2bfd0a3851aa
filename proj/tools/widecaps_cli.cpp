// widecaps command-line front end: train, eval, gradcheck, routing-demo, ablate, print-config.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <random>
#include <string>

#include "CLI11.hpp"
#include "widecaps.hpp"

using namespace widecaps;

namespace {

int cmd_train(const std::string& config_path, const std::optional<std::uint64_t>& seed,
              const std::optional<std::string>& out) {
  RunConfig cfg = load_run_config(config_path);
  if (seed) cfg.seed = *seed;
  if (out) cfg.out_dir = *out;
  std::printf("training %s -> %s\n", config_path.c_str(), cfg.out_dir.c_str());
  const auto result = run_training<float>(cfg, [](const EpochRecord& e) {
    std::printf("epoch %zu  loss %.6f  train_acc %.4f", e.train.epoch, e.train.mean_loss, e.train.accuracy);
    if (e.test) std::printf("  test_loss %.6f  test_acc %.4f", e.test->loss, e.test->accuracy);
    std::printf("  lr %.6g  %.1fs\n", e.train.lr, e.train.wall_seconds);
    std::fflush(stdout);
  });
  std::printf("final accuracy %.4f (metrics.csv, config.json, checkpoint.json in %s)\n", result.final_accuracy(),
              cfg.out_dir.c_str());
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string split = "test";
  std::size_t count = 500;
  std::uint64_t data_seed = 7;
  double noise = 0.1;
  std::size_t batch = 128;
};

int cmd_eval(const EvalArgs& a) {
  const Checkpoint<float> ck = load_checkpoint<float>(a.checkpoint);
  const WideCapsModel<float> model(ck.model);
  const LabeledDataset ds = load_data_source(a.data, a.split == "train" ? Split::train : Split::test, ck.model,
                                             a.count, a.noise, a.data_seed);
  const EvalResult r = evaluate(model, ck.state.model, ds, a.batch);
  std::printf("samples %zu\nloss %.9g\naccuracy %.9g\n", ds.size(), r.loss, r.accuracy);
  return 0;
}

int cmd_gradcheck(const std::string& module, std::uint64_t seed) {
  if (!is_gradient_module(module)) throw ConfigError("unknown module '" + module + "'");
  bool ok = true;
  double worst = 0.0;
  std::size_t ran = 0;
  for (const auto& c : gradient_cases(seed)) {
    if (module != "all" && c.module != module) continue;
    const GradCheckReport r = c.run();
    ++ran;
    worst = std::max(worst, r.max_rel_error);
    ok = ok && r.passed();
    std::printf("%-9s %-30s %s\n", c.module.c_str(), c.name.c_str(), r.summary().c_str());
    for (const auto& f : r.failures) std::printf("    %s\n", f.c_str());
  }
  std::printf("%s: %zu checks, max relative error %.3g\n", ok ? "PASS" : "FAIL", ran, worst);
  return ok ? 0 : 1;
}

void print_row(const char* label, const Tensor<double>& t, std::size_t row, std::size_t width) {
  std::printf("  %s", label);
  for (std::size_t f = 0; f < width; ++f) std::printf(" % .6f", t[row * width + f]);
  std::printf("\n");
}

int cmd_routing_demo(std::size_t n, std::size_t k, std::size_t classes, const std::string& variant_name,
                     std::uint64_t seed) {
  const RoutingVariant variant = parse_routing_variant(variant_name);
  if (n == 0 || k == 0 || classes == 0) throw ConfigError("--n, --k and --classes must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  Tensor<double> preds({classes, n, k});
  for (auto& v : preds.data()) v = d(rng);
  const RoutingOutput<double> out = fm_routing(preds, variant);

  // Brute-force cross-check: normalize each prediction, sum every pair explicitly.
  const Tensor<double> unit = l2_normalize_capsules(preds);
  double max_diff = 0.0;
  std::printf("variant %s  J=%zu n=%zu k=%zu seed=%llu\n", to_string(variant).c_str(), classes, n, k,
              static_cast<unsigned long long>(seed));
  double total = 0.0;
  for (std::size_t j = 0; j < classes; ++j) {
    Tensor<double> bank({n, k});
    std::copy_n(unit.raw() + j * n * k, n * k, bank.raw());
    const Tensor<double> ref_h = pairwise_interaction_reference(bank);
    const double ref_b = agreement(ref_h);
    max_diff = std::max(max_diff, std::abs(ref_b - out.raw_agreements[j]));
    std::printf("class %zu\n  b_hat % .9f  (pairwise oracle % .9f)\n  x_hat % .9f\n", j, out.raw_agreements[j],
                ref_b, out.activations[j]);
    print_row("pose ", out.poses, j, k);
    total += out.activations[j];
  }
  std::printf("sum x_hat %.9f\nmax |b_hat - oracle| %.3g\n", total, max_diff);
  return max_diff <= 1e-9 ? 0 : 1;
}

struct AblateArgs {
  std::string ladder = "v1..v5";
  std::string data = "synthetic:blobs";
  std::optional<std::string> config;
  std::optional<std::size_t> epochs;
  std::optional<std::uint64_t> seed;
};

int cmd_ablate(const AblateArgs& a) {
  RunConfig cfg = a.config ? load_run_config(*a.config) : desk_scale_config();
  cfg.data.train = a.data;
  cfg.data.test = a.data;
  if (a.epochs) cfg.train.epochs = *a.epochs;
  if (a.seed) cfg.seed = *a.seed;
  const auto rungs = parse_ladder(a.ladder);
  const LoadedData data = load_run_data(cfg);
  std::printf("ladder %s on %s: %zu train / %zu test samples, %zu epochs\n", a.ladder.c_str(), a.data.c_str(),
              data.train.size(), data.test ? data.test->size() : 0, cfg.train.epochs);
  std::printf("%-5s %-40s %10s %10s %10s\n", "rung", "configuration", "final_acc", "best_acc", "params");
  run_ladder(cfg, data, rungs, [&](const LadderEntry& e) {
    const ModelConfig m = ladder_config(cfg.model, e.rung);
    const std::string desc = to_string(m.block) + (m.se ? "+se" : "") + " " + to_string(m.routing) +
                             (m.attention_caps ? " attention" : "");
    std::printf("%-5s %-40s %10.4f %10.4f %10zu\n", e.rung.c_str(), desc.c_str(), e.final_accuracy,
                e.best_accuracy, e.parameters);
    std::fflush(stdout);
  });
  return 0;
}

int cmd_print_config(const std::string& preset) {
  if (preset == "desk") {
    std::cout << serialize(desk_scale_config());
  } else if (preset == "default") {
    std::cout << serialize(RunConfig{});
  } else {
    throw ConfigError("unknown preset '" + preset + "' (desk or default)");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"WideCaps capsule network: training, evaluation and verification"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> train_seed;
  std::optional<std::string> train_out;
  auto* train = app.add_subcommand("train", "Train from a JSON run config; writes metrics.csv and a checkpoint");
  train->add_option("--config", config_path, "Run config file")->required();
  train->add_option("--seed", train_seed, "Override the config seed");
  train->add_option("--out", train_out, "Override the output directory");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint; prints loss and accuracy");
  eval->add_option("--checkpoint", ev.checkpoint, "checkpoint.json written by train")->required();
  eval->add_option("--data", ev.data, "Data source (synthetic:blobs, fashion:<dir>, idx:..., cifar:..., path)")
      ->required();
  eval->add_option("--split", ev.split, "Split to read")->check(CLI::IsMember({"train", "test"}));
  eval->add_option("--count", ev.count, "Samples (synthetic) or prefix limit, 0 = all");
  eval->add_option("--data-seed", ev.data_seed, "Synthetic generator seed (test split uses seed+1)");
  eval->add_option("--noise", ev.noise, "Synthetic noise level");
  eval->add_option("--batch", ev.batch, "Evaluation batch size")->check(CLI::PositiveNumber);

  std::string module = "all";
  std::uint64_t grad_seed = 2024;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient suites; nonzero exit on failure");
  grad->add_option("--module", module, "all|tensor|routing|attention|backbone|model");
  grad->add_option("--seed", grad_seed, "Seed for random inputs");

  std::size_t demo_n = 8, demo_k = 4, demo_j = 3;
  std::string demo_variant = "modified";
  std::uint64_t demo_seed = 0;
  auto* demo = app.add_subcommand("routing-demo", "Route random predictions and compare with the pairwise oracle");
  demo->add_option("--n", demo_n, "Input capsules");
  demo->add_option("--k", demo_k, "Capsule dimension");
  demo->add_option("--classes", demo_j, "Output capsules J");
  demo->add_option("--variant", demo_variant, "modified|original");
  demo->add_option("--seed", demo_seed, "Seed");

  AblateArgs ab;
  auto* ablate = app.add_subcommand("ablate", "Train the v1..v5 ablation ladder at toy scale");
  ablate->add_option("--ladder", ab.ladder, "Rungs, e.g. v1..v5 or v2,v5");
  ablate->add_option("--data", ab.data, "Data source for both splits");
  ablate->add_option("--config", ab.config, "Base run config (defaults to the desk-scale preset)");
  ablate->add_option("--epochs", ab.epochs, "Override epochs per rung");
  ablate->add_option("--seed", ab.seed, "Override the seed");

  std::string preset = "desk";
  auto* print = app.add_subcommand("print-config", "Print a run config preset as JSON");
  print->add_option("--preset", preset, "desk|default");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*train) return cmd_train(config_path, train_seed, train_out);
    if (*eval) return cmd_eval(ev);
    if (*grad) return cmd_gradcheck(module, grad_seed);
    if (*demo) return cmd_routing_demo(demo_n, demo_k, demo_j, demo_variant, demo_seed);
    if (*ablate) return cmd_ablate(ab);
    if (*print) return cmd_print_config(preset);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
