#pragma once

// End-to-end training run driven by a RunConfig: load data, train for the configured
// epochs, write metrics.csv / config.json / checkpoint.json under out_dir.
//
// metrics.csv columns: epoch,loss,accuracy,lr
//   loss     mean training cross-entropy over the epoch
//   accuracy test accuracy after the epoch (training accuracy when no test set is given)
//   lr       learning rate used during the epoch
// Values are printed with %.9g; wall time is left out so reruns compare byte for byte.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "widecaps/checkpoint.hpp"
#include "widecaps/config.hpp"
#include "widecaps/training.hpp"

namespace widecaps {

struct EpochRecord {
  EpochReport train;
  std::optional<EvalResult> test;

  double reported_accuracy() const { return test ? test->accuracy : train.accuracy; }
};

template <typename T>
struct RunResult {
  ModelConfig model;  // includes standardization statistics when enabled
  TrainState<T> state;
  std::vector<EpochRecord> epochs;
  std::string csv;

  double final_accuracy() const { return epochs.empty() ? 0.0 : epochs.back().reported_accuracy(); }
  double best_accuracy() const {
    double best = 0.0;
    for (const auto& e : epochs) best = std::max(best, e.reported_accuracy());
    return best;
  }
};

inline std::string format_metric(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string csv_header() { return "epoch,loss,accuracy,lr\n"; }

inline std::string csv_row(const EpochRecord& r) {
  return std::to_string(r.train.epoch) + "," + format_metric(r.train.mean_loss) + "," +
         format_metric(r.reported_accuracy()) + "," + format_metric(r.train.lr) + "\n";
}

/// Per-channel mean and (population) standard deviation of a dataset's pixels.
inline std::pair<std::vector<double>, std::vector<double>> channel_statistics(const LabeledDataset& ds) {
  const std::size_t c = ds.channels();
  std::vector<double> sum(c, 0.0), sq(c, 0.0);
  const auto px = ds.images.data();
  for (std::size_t i = 0; i < px.size(); ++i) {
    sum[i % c] += px[i];
    sq[i % c] += static_cast<double>(px[i]) * px[i];
  }
  const double count = static_cast<double>(px.size() / c);
  std::vector<double> mean(c), stddev(c);
  for (std::size_t k = 0; k < c; ++k) {
    mean[k] = sum[k] / count;
    stddev[k] = std::sqrt(std::max(sq[k] / count - mean[k] * mean[k], 0.0));
    if (stddev[k] < 1e-6) stddev[k] = 1.0;
  }
  return {mean, stddev};
}

struct LoadedData {
  LabeledDataset train;
  std::optional<LabeledDataset> test;
};

inline LoadedData load_run_data(const RunConfig& cfg) {
  LoadedData d;
  const auto& dc = cfg.data;
  d.train = load_data_source(dc.train, Split::train, cfg.model, dc.train_size, dc.noise, dc.seed);
  if (!dc.test.empty()) d.test = load_data_source(dc.test, Split::test, cfg.model, dc.test_size, dc.noise, dc.seed);
  return d;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains on already-loaded data. Does not touch the filesystem.
template <typename T>
RunResult<T> train_model(RunConfig cfg, const LoadedData& data, const EpochCallback& on_epoch = {}) {
  if (data.train.classes != cfg.model.classes) {
    throw ConfigError("training data has " + std::to_string(data.train.classes) + " classes, model expects " +
                      std::to_string(cfg.model.classes));
  }
  if (cfg.data.standardize) {
    auto [mean, stddev] = channel_statistics(data.train);
    cfg.model.input_mean = mean;
    cfg.model.input_std = stddev;
  }
  const WideCapsModel<T> model(cfg.model);
  RunResult<T> result;
  result.model = cfg.model;
  result.state = TrainState<T>::fresh(model.init(cfg.seed), cfg.train, cfg.seed);
  result.csv = csv_header();

  double best = -1.0;
  std::size_t stale = 0;
  for (std::size_t e = 0; e < cfg.train.epochs; ++e) {
    EpochRecord rec;
    rec.train = train_epoch(result.state, model, data.train, cfg.train.batch_size);
    if (data.test) rec.test = evaluate(model, result.state.model, *data.test, cfg.train.batch_size);
    result.csv += csv_row(rec);
    result.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (cfg.train.patience > 0) {
      const double acc = rec.reported_accuracy();
      if (acc > best) {
        best = acc;
        stale = 0;
      } else if (++stale >= cfg.train.patience) {
        break;
      }
    }
  }
  return result;
}

/// Loads data, trains, and writes metrics.csv, config.json and checkpoint.json (+ .bin)
/// into cfg.out_dir.
template <typename T>
RunResult<T> run_training(const RunConfig& cfg, const EpochCallback& on_epoch = {}) {
  namespace fs = std::filesystem;
  const LoadedData data = load_run_data(cfg);
  RunResult<T> result = train_model<T>(cfg, data, on_epoch);
  fs::create_directories(cfg.out_dir);
  const fs::path out(cfg.out_dir);
  {
    std::ofstream csv(out / "metrics.csv", std::ios::binary | std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot write " + (out / "metrics.csv").string());
    csv << result.csv;
  }
  {
    RunConfig effective = cfg;
    effective.model = result.model;
    std::ofstream js(out / "config.json", std::ios::binary | std::ios::trunc);
    js << serialize(effective);
  }
  save_checkpoint(result.state, result.model, (out / "checkpoint.json").string());
  return result;
}

/// Small single-channel configuration that trains in seconds per epoch on one core:
/// depths [1,1,1], stem widths [8,16,16,32], 16x16 inputs, J=4, synthetic blobs.
inline RunConfig desk_scale_config() {
  RunConfig c;
  auto& m = c.model;
  m.input_height = 16;
  m.input_width = 16;
  m.input_channels = 1;
  m.stem_widths = {8, 16, 16, 32};
  m.stage_depths = {1, 1, 1};
  m.stage_widths = {16, 32, 64};
  m.primary_types = 8;
  m.primary_dim = 8;
  m.classes = 4;
  m.class_dim = 8;
  c.train.batch_size = 32;
  c.train.epochs = 15;
  c.data.train_size = 2000;
  c.data.test_size = 500;
  return c;
}

// ---------------------------------------------------------------- ablation ladder
//
//   v1  standard bottleneck, exp-activated FM routing, no SE, no attention capsules
//   v2  v1 with softmax (modified) routing
//   v3  v2 with SE gating in every block
//   v4  v3 with wide bottleneck blocks
//   v5  v4 with attention capsules (the full model)

inline std::vector<std::string> ladder_rungs() { return {"v1", "v2", "v3", "v4", "v5"}; }

inline ModelConfig ladder_config(ModelConfig base, const std::string& rung) {
  const auto rungs = ladder_rungs();
  const auto it = std::find(rungs.begin(), rungs.end(), rung);
  if (it == rungs.end()) throw ConfigError("unknown ladder rung '" + rung + "' (expected v1..v5)");
  const auto level = static_cast<int>(it - rungs.begin()) + 1;
  base.routing = level >= 2 ? RoutingVariant::modified : RoutingVariant::original;
  base.se = level >= 3;
  base.block = level >= 4 ? BlockKind::wide_bottleneck : BlockKind::standard_bottleneck;
  base.attention_caps = level >= 5;
  base.validate();
  return base;
}

/// Expands "v1..v5", "v2,v4" or a single rung.
inline std::vector<std::string> parse_ladder(const std::string& spec) {
  const auto rungs = ladder_rungs();
  auto index = [&](const std::string& r) {
    const auto it = std::find(rungs.begin(), rungs.end(), r);
    if (it == rungs.end()) throw ConfigError("unknown ladder rung '" + r + "' (expected v1..v5)");
    return static_cast<std::size_t>(it - rungs.begin());
  };
  std::vector<std::string> out;
  for (const auto& part : detail::split_list(spec, ',')) {
    const auto dots = part.find("..");
    if (dots == std::string::npos) {
      out.push_back(rungs[index(part)]);
      continue;
    }
    const std::size_t lo = index(part.substr(0, dots)), hi = index(part.substr(dots + 2));
    if (lo > hi) throw ConfigError("ladder range '" + part + "' is reversed");
    for (std::size_t i = lo; i <= hi; ++i) out.push_back(rungs[i]);
  }
  return out;
}

struct LadderEntry {
  std::string rung;
  double final_accuracy = 0.0;
  double best_accuracy = 0.0;
  std::size_t parameters = 0;
};

/// Trains every rung on the same data and seed.
inline std::vector<LadderEntry> run_ladder(const RunConfig& base, const LoadedData& data,
                                           const std::vector<std::string>& rungs,
                                           const std::function<void(const LadderEntry&)>& on_rung = {}) {
  std::vector<LadderEntry> out;
  for (const auto& rung : rungs) {
    RunConfig cfg = base;
    cfg.model = ladder_config(base.model, rung);
    const RunResult<float> r = train_model<float>(cfg, data);
    LadderEntry e{rung, r.final_accuracy(), r.best_accuracy(), count_parameters(r.state.model.params)};
    if (on_rung) on_rung(e);
    out.push_back(e);
  }
  return out;
}

}  // namespace widecaps
