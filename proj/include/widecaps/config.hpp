#pragma once

// Run configuration (JSON) and data-source resolution.
//
// Schema (every key optional; missing keys take the defaults below, unknown keys are
// rejected):
//   {
//     "seed": 1, "out_dir": "run",
//     "model": { "input_height", "input_width", "input_channels", "stem_widths"[4],
//                "stage_depths"[3], "stage_widths"[3], "block", "se", "se_ratio",
//                "primary_types", "primary_dim", "primary_stride", "classes", "class_dim",
//                "routing", "attention_caps", "attention_se_ratio", "bn_epsilon",
//                "bn_momentum", "input_mean", "input_std" },
//     "train": { "initial_lr", "drop_rate", "epoch_drop", "momentum", "l2", "batch_size",
//                "epochs", "patience" },
//     "data":  { "train", "test", "train_size", "test_size", "noise", "seed", "standardize" }
//   }
//
// Data sources: "synthetic:blobs", "synthetic:bars", "fashion:<dir>" (IDX files named
// train-images-idx3-ubyte / t10k-images-idx3-ubyte ...), "idx:<images>,<labels>",
// "cifar:<file>[,<file>...]", or a bare path (directory -> fashion layout, *.bin ->
// CIFAR-10, anything else -> IDX image file with its *-labels-idx1-ubyte sibling).

#include <cstdint>
#include <filesystem>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "widecaps/backbone.hpp"
#include "widecaps/data.hpp"
#include "widecaps/training.hpp"

namespace widecaps {

struct DataConfig {
  std::string train = "synthetic:blobs";
  std::string test = "synthetic:blobs";
  std::size_t train_size = 2000;  // sample count for synthetic sources, a prefix limit otherwise (0 = all)
  std::size_t test_size = 500;
  double noise = 0.1;
  std::uint64_t seed = 7;  // synthetic generation; the test split uses seed + 1
  bool standardize = false;  // per-channel standardization with training-set statistics
};

struct RunConfig {
  ModelConfig model;
  Hyperparameters train;
  DataConfig data;
  std::uint64_t seed = 1;
  std::string out_dir = "run";
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed, const char* where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) throw ConfigError(std::string("unknown key '") + it.key() + "' in " + where);
  }
}

template <typename V>
void get_opt(const nlohmann::json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline nlohmann::json to_json(const ModelConfig& m) {
  return {{"input_height", m.input_height},
          {"input_width", m.input_width},
          {"input_channels", m.input_channels},
          {"stem_widths", m.stem_widths},
          {"stage_depths", m.stage_depths},
          {"stage_widths", m.stage_widths},
          {"block", to_string(m.block)},
          {"se", m.se},
          {"se_ratio", m.se_ratio},
          {"primary_types", m.primary_types},
          {"primary_dim", m.primary_dim},
          {"primary_stride", m.primary_stride},
          {"classes", m.classes},
          {"class_dim", m.class_dim},
          {"routing", to_string(m.routing)},
          {"attention_caps", m.attention_caps},
          {"attention_se_ratio", m.attention_se_ratio},
          {"bn_epsilon", m.bn_epsilon},
          {"bn_momentum", m.bn_momentum},
          {"input_mean", m.input_mean},
          {"input_std", m.input_std}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j,
                         {"input_height", "input_width", "input_channels", "stem_widths", "stage_depths",
                          "stage_widths", "block", "se", "se_ratio", "primary_types", "primary_dim",
                          "primary_stride", "classes", "class_dim", "routing", "attention_caps",
                          "attention_se_ratio", "bn_epsilon", "bn_momentum", "input_mean", "input_std"},
                         "model");
  ModelConfig m;
  detail::get_opt(j, "input_height", m.input_height);
  detail::get_opt(j, "input_width", m.input_width);
  detail::get_opt(j, "input_channels", m.input_channels);
  detail::get_opt(j, "stem_widths", m.stem_widths);
  detail::get_opt(j, "stage_depths", m.stage_depths);
  detail::get_opt(j, "stage_widths", m.stage_widths);
  std::string block = to_string(m.block), routing = to_string(m.routing);
  detail::get_opt(j, "block", block);
  detail::get_opt(j, "routing", routing);
  m.block = parse_block_kind(block);
  m.routing = parse_routing_variant(routing);
  detail::get_opt(j, "se", m.se);
  detail::get_opt(j, "se_ratio", m.se_ratio);
  detail::get_opt(j, "primary_types", m.primary_types);
  detail::get_opt(j, "primary_dim", m.primary_dim);
  detail::get_opt(j, "primary_stride", m.primary_stride);
  detail::get_opt(j, "classes", m.classes);
  detail::get_opt(j, "class_dim", m.class_dim);
  detail::get_opt(j, "attention_caps", m.attention_caps);
  detail::get_opt(j, "attention_se_ratio", m.attention_se_ratio);
  detail::get_opt(j, "bn_epsilon", m.bn_epsilon);
  detail::get_opt(j, "bn_momentum", m.bn_momentum);
  detail::get_opt(j, "input_mean", m.input_mean);
  detail::get_opt(j, "input_std", m.input_std);
  m.validate();
  return m;
}

inline nlohmann::json to_json(const Hyperparameters& h) {
  return {{"initial_lr", h.initial_lr}, {"drop_rate", h.drop_rate}, {"epoch_drop", h.epoch_drop},
          {"momentum", h.momentum},     {"l2", h.l2},               {"batch_size", h.batch_size},
          {"epochs", h.epochs},         {"patience", h.patience}};
}

inline Hyperparameters hyperparameters_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"initial_lr", "drop_rate", "epoch_drop", "momentum", "l2", "batch_size", "epochs", "patience"},
                         "train");
  Hyperparameters h;
  detail::get_opt(j, "initial_lr", h.initial_lr);
  detail::get_opt(j, "drop_rate", h.drop_rate);
  detail::get_opt(j, "epoch_drop", h.epoch_drop);
  detail::get_opt(j, "momentum", h.momentum);
  detail::get_opt(j, "l2", h.l2);
  detail::get_opt(j, "batch_size", h.batch_size);
  detail::get_opt(j, "epochs", h.epochs);
  detail::get_opt(j, "patience", h.patience);
  if (h.epoch_drop == 0 || h.batch_size == 0) throw ConfigError("epoch_drop and batch_size must be >= 1");
  if (!(h.drop_rate > 0.0 && h.drop_rate <= 1.0)) throw ConfigError("drop_rate must be in (0,1]");
  if (h.l2 < 0.0 || h.initial_lr < 0.0) throw ConfigError("initial_lr and l2 must be non-negative");
  return h;
}

inline nlohmann::json to_json(const DataConfig& d) {
  return {{"train", d.train}, {"test", d.test},   {"train_size", d.train_size}, {"test_size", d.test_size},
          {"noise", d.noise}, {"seed", d.seed}, {"standardize", d.standardize}};
}

inline DataConfig data_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"train", "test", "train_size", "test_size", "noise", "seed", "standardize"}, "data");
  DataConfig d;
  detail::get_opt(j, "train", d.train);
  detail::get_opt(j, "test", d.test);
  detail::get_opt(j, "train_size", d.train_size);
  detail::get_opt(j, "test_size", d.test_size);
  detail::get_opt(j, "noise", d.noise);
  detail::get_opt(j, "seed", d.seed);
  detail::get_opt(j, "standardize", d.standardize);
  return d;
}

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"data", to_json(c.data)},
          {"seed", c.seed},
          {"out_dir", c.out_dir}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"model", "train", "data", "seed", "out_dir"}, "run config");
  RunConfig c;
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  if (j.contains("train")) c.train = hyperparameters_from_json(j.at("train"));
  if (j.contains("data")) c.data = data_config_from_json(j.at("data"));
  detail::get_opt(j, "seed", c.seed);
  detail::get_opt(j, "out_dir", c.out_dir);
  return c;
}

inline std::string serialize(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

inline RunConfig parse_run_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("run config is not valid JSON: ") + e.what());
  }
  return run_config_from_json(j);
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

// ---------------------------------------------------------------- data sources

enum class Split { train, test };

namespace detail {

inline std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

inline LabeledDataset load_fashion_dir(const std::filesystem::path& dir, Split split) {
  const std::string stem = split == Split::train ? "train" : "t10k";
  return load_idx_dataset((dir / (stem + "-images-idx3-ubyte")).string(),
                          (dir / (stem + "-labels-idx1-ubyte")).string(), 10,
                          split == Split::train ? "train" : "test");
}

inline std::string idx_labels_sibling(const std::string& images) {
  std::string labels = images;
  const auto pos = labels.find("images-idx3");
  if (pos == std::string::npos) {
    throw ConfigError("cannot derive a label file for '" + images + "'; use idx:<images>,<labels>");
  }
  labels.replace(pos, 11, "labels-idx1");
  return labels;
}

}  // namespace detail

/// Resolves a data-source string to a dataset. Synthetic sources draw `count` samples
/// shaped for `model`; file sources keep the first `count` samples (0 keeps all).
inline LabeledDataset load_data_source(const std::string& source, Split split, const ModelConfig& model,
                                       std::size_t count, double noise, std::uint64_t seed) {
  LabeledDataset ds;
  const std::string split_name = split == Split::train ? "train" : "test";
  if (source == "synthetic:blobs" || source == "synthetic:bars") {
    if (count == 0) throw ConfigError("synthetic data needs a positive sample count");
    if (model.input_channels != 1) throw ConfigError("synthetic data is single-channel; set input_channels=1");
    const auto kind = source == "synthetic:blobs" ? SyntheticKind::blobs : SyntheticKind::bars;
    SyntheticOptions opts;
    opts.noise = noise;
    ds = synthetic_dataset(kind, count, model.input_height, model.input_width, model.classes,
                           split == Split::train ? seed : seed + 1, opts);
  } else if (source.rfind("fashion:", 0) == 0) {
    ds = detail::load_fashion_dir(source.substr(8), split);
  } else if (source.rfind("idx:", 0) == 0) {
    const auto parts = detail::split_list(source.substr(4), ',');
    if (parts.size() != 2) throw ConfigError("idx source must be idx:<images>,<labels>");
    ds = load_idx_dataset(parts[0], parts[1], model.classes);
  } else if (source.rfind("cifar:", 0) == 0) {
    std::vector<LabeledDataset> parts;
    for (const auto& p : detail::split_list(source.substr(6), ',')) parts.push_back(read_cifar10_bin(p));
    ds = concatenate(parts);
  } else {
    namespace fs = std::filesystem;
    const fs::path p(source);
    if (fs::is_directory(p)) {
      ds = detail::load_fashion_dir(p, split);
    } else if (p.extension() == ".bin") {
      ds = read_cifar10_bin(source);
    } else if (fs::exists(p)) {
      ds = load_idx_dataset(source, detail::idx_labels_sibling(source), model.classes);
    } else {
      throw ConfigError("unknown data source '" + source + "'");
    }
  }
  ds.split = split_name;
  if (source.rfind("synthetic:", 0) != 0) ds = ds.head(count);
  ds.validate();
  return ds;
}

}  // namespace widecaps
