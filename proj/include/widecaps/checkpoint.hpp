#pragma once

// Checkpoints are a JSON manifest plus one raw blob. The manifest lists every tensor
// (parameters, momentum buffers, batch-norm statistics) with kind, name, shape, dtype,
// byte offset and element count; the blob stores the elements back to back in
// little-endian order regardless of host byte order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "widecaps/config.hpp"
#include "widecaps/training.hpp"

namespace widecaps {

inline constexpr const char* kCheckpointFormat = "widecaps-checkpoint";
inline constexpr int kCheckpointVersion = 1;

template <typename T>
struct Checkpoint {
  ModelConfig model;
  TrainState<T> state;
};

namespace detail {

template <typename T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32" : "f64";
}

template <typename T>
void append_le(std::vector<unsigned char>& out, std::span<const T> values) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  for (T v : values) {
    Bits bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (std::size_t b = 0; b < sizeof bits; ++b) out.push_back(static_cast<unsigned char>(bits >> (8 * b)));
  }
}

template <typename S, typename T>
void read_le(const unsigned char* src, std::size_t count, T* dst) {
  using Bits = std::conditional_t<sizeof(S) == 4, std::uint32_t, std::uint64_t>;
  for (std::size_t i = 0; i < count; ++i) {
    Bits bits = 0;
    for (std::size_t b = 0; b < sizeof bits; ++b) bits |= static_cast<Bits>(src[i * sizeof bits + b]) << (8 * b);
    S v;
    std::memcpy(&v, &bits, sizeof v);
    dst[i] = static_cast<T>(v);
  }
}

}  // namespace detail

inline std::string blob_path_for(const std::string& manifest_path) { return manifest_path + ".bin"; }

/// Writes `path` (manifest) and `path`.bin (blob).
template <typename T>
void save_checkpoint(const TrainState<T>& state, const ModelConfig& model, const std::string& path) {
  std::vector<unsigned char> blob;
  nlohmann::json tensors = nlohmann::json::array();
  auto add = [&](const std::string& kind, const std::string& name, const Tensor<T>& t, bool decay) {
    nlohmann::json e = {{"kind", kind},
                        {"name", name},
                        {"shape", t.shape()},
                        {"offset", blob.size()},
                        {"count", t.size()}};
    if (kind == "param") e["decay"] = decay;
    tensors.push_back(std::move(e));
    detail::append_le<T>(blob, t.data());
  };
  for (const auto& [name, p] : state.model.params) add("param", name, p.value, p.decay);
  for (const auto& [name, v] : state.velocity) add("velocity", name, v, false);
  for (const auto& [name, s] : state.model.buffers) {
    add("running_mean", name, s.mean, false);
    add("running_var", name, s.var, false);
  }
  const std::string blob_file = std::filesystem::path(blob_path_for(path)).filename().string();
  nlohmann::json manifest = {{"format", kCheckpointFormat},
                             {"version", kCheckpointVersion},
                             {"dtype", detail::dtype_name<T>()},
                             {"blob", blob_file},
                             {"blob_bytes", blob.size()},
                             {"epoch", state.epoch},
                             {"seed", state.seed},
                             {"hyperparameters", to_json(state.hyper)},
                             {"model", to_json(model)},
                             {"tensors", tensors}};
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint manifest '" + path + "'");
    out << manifest.dump(2) << "\n";
  }
  std::ofstream out(blob_path_for(path), std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint blob '" + blob_path_for(path) + "'");
  out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorruptionError("cannot open checkpoint manifest '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(ss.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw CorruptionError("checkpoint manifest is not valid JSON: " + std::string(e.what()));
  }
  Checkpoint<T> ck;
  std::vector<unsigned char> blob;
  try {
    if (m.at("format") != kCheckpointFormat || m.at("version") != kCheckpointVersion) {
      throw CorruptionError("unsupported checkpoint format/version");
    }
    const std::string dtype = m.at("dtype");
    if (dtype != "f32" && dtype != "f64") throw CorruptionError("unknown dtype '" + dtype + "'");
    const std::size_t width = dtype == "f32" ? 4 : 8;
    const auto blob_path = std::filesystem::path(path).parent_path() / m.at("blob").get<std::string>();
    blob = detail::read_file_bytes(blob_path.string());
    const std::size_t declared = m.at("blob_bytes");
    if (blob.size() != declared) {
      throw CorruptionError("checkpoint blob is " + std::to_string(blob.size()) + " bytes, manifest declares " +
                            std::to_string(declared));
    }
    ck.model = model_config_from_json(m.at("model"));
    ck.state.hyper = hyperparameters_from_json(m.at("hyperparameters"));
    ck.state.epoch = m.at("epoch");
    ck.state.seed = m.at("seed");
    std::size_t expected_offset = 0;
    for (const auto& e : m.at("tensors")) {
      const std::string kind = e.at("kind");
      const std::string name = e.at("name");
      const Shape shape = e.at("shape").get<Shape>();
      const std::size_t offset = e.at("offset");
      const std::size_t count = e.at("count");
      if (shape.empty() || shape_size(shape) != count || count == 0) {
        throw CorruptionError("tensor '" + name + "' shape does not match its element count");
      }
      if (offset != expected_offset || offset + count * width > blob.size()) {
        throw CorruptionError("tensor '" + name + "' lies outside the blob or out of order");
      }
      expected_offset = offset + count * width;
      Tensor<T> t(shape);
      if (width == 4) {
        detail::read_le<float>(blob.data() + offset, count, t.raw());
      } else {
        detail::read_le<double>(blob.data() + offset, count, t.raw());
      }
      if (kind == "param") {
        ck.state.model.params[name] = {std::move(t), e.at("decay").get<bool>()};
      } else if (kind == "velocity") {
        ck.state.velocity[name] = std::move(t);
      } else if (kind == "running_mean" || kind == "running_var") {
        auto it = ck.state.model.buffers.find(name);
        if (it == ck.state.model.buffers.end()) {
          it = ck.state.model.buffers.emplace(name, RunningStats<T>(t.size())).first;
        }
        (kind == "running_mean" ? it->second.mean : it->second.var) = std::move(t);
      } else {
        throw CorruptionError("unknown tensor kind '" + kind + "'");
      }
    }
    if (expected_offset != blob.size()) throw CorruptionError("checkpoint blob has trailing bytes");
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("checkpoint manifest is malformed: ") + e.what());
  } catch (const FormatError& e) {
    throw CorruptionError(e.what());
  } catch (const ConfigError& e) {
    throw CorruptionError(std::string("checkpoint model/hyperparameters invalid: ") + e.what());
  }
  for (const auto& [name, v] : ck.state.velocity) {
    auto it = ck.state.model.params.find(name);
    if (it == ck.state.model.params.end() || it->second.value.shape() != v.shape()) {
      throw CorruptionError("velocity '" + name + "' has no matching parameter");
    }
  }
  // Parameters must match the architecture the manifest describes.
  const ModelState<T> reference = WideCapsModel<T>(ck.model).init(0);
  for (const auto& [name, p] : reference.params) {
    auto it = ck.state.model.params.find(name);
    if (it == ck.state.model.params.end() || it->second.value.shape() != p.value.shape()) {
      throw CorruptionError("parameter '" + name + "' missing or mis-shaped for the stored model");
    }
  }
  if (reference.params.size() != ck.state.model.params.size()) {
    throw CorruptionError("checkpoint holds parameters the stored model does not use");
  }
  return ck;
}

}  // namespace widecaps
