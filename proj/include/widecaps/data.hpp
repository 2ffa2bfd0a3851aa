#pragma once

// Dataset ingestion: IDX (MNIST-family) files, CIFAR-10 binary batches and seeded
// synthetic image sets. Pixels are scaled to [0, 1] by 1/255; no other preprocessing.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "widecaps/tensor.hpp"

namespace widecaps {

struct LabeledDataset {
  Tensor<float> images;  // [N, H, W, C]
  std::vector<int> labels;
  std::size_t classes = 10;
  std::string split;

  std::size_t size() const { return labels.size(); }
  std::size_t height() const { return images.extent(1); }
  std::size_t width() const { return images.extent(2); }
  std::size_t channels() const { return images.extent(3); }

  void validate() const {
    if (images.rank() != 4) throw InputError("dataset images must be [N,H,W,C]");
    if (labels.empty()) throw InputError("dataset is empty");
    if (images.extent(0) != labels.size()) throw InputError("dataset image/label counts differ");
    for (auto l : labels)
      if (l < 0 || static_cast<std::size_t>(l) >= classes) {
        throw InputError("label " + std::to_string(l) + " outside [0," + std::to_string(classes) + ")");
      }
    for (auto v : images.data())
      if (!(v >= 0.0f && v <= 1.0f)) throw InputError("pixel value outside [0,1]");
  }

  /// First `count` samples (all of them when count is 0 or exceeds the size).
  LabeledDataset head(std::size_t count) const {
    if (count == 0 || count >= size()) return *this;
    const std::size_t per = images.size() / size();
    LabeledDataset out;
    Shape s = images.shape();
    s[0] = count;
    out.images = Tensor<float>(s, std::vector<float>(images.data().begin(),
                                                     images.data().begin() + static_cast<std::ptrdiff_t>(count * per)));
    out.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(count));
    out.classes = classes;
    out.split = split;
    return out;
  }
};

namespace detail {

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(std::span<const unsigned char> b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

inline std::string hex_bytes(std::span<const unsigned char> b, std::size_t count) {
  std::string out;
  char buf[4];
  for (std::size_t i = 0; i < std::min(count, b.size()); ++i) {
    std::snprintf(buf, sizeof buf, "%02x", b[i]);
    if (i) out += ' ';
    out += buf;
  }
  return out;
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Decoded IDX file: either an image tensor [N, H, W, 1] or a label vector.
struct IdxContents {
  bool is_images = false;
  Tensor<float> images;
  std::vector<int> labels;
};

inline IdxContents parse_idx(std::span<const unsigned char> bytes, const std::string& origin = "<memory>") {
  if (bytes.size() < 4) {
    throw FormatError(origin + ": truncated IDX header (" + std::to_string(bytes.size()) + " bytes)");
  }
  const std::uint32_t magic = detail::read_be32(bytes, 0);
  IdxContents out;
  if (magic == kIdxImagesMagic) {
    if (bytes.size() < 16) throw FormatError(origin + ": truncated IDX image header");
    const std::size_t n = detail::read_be32(bytes, 4);
    const std::size_t h = detail::read_be32(bytes, 8);
    const std::size_t w = detail::read_be32(bytes, 12);
    if (n == 0 || h == 0 || w == 0) throw FormatError(origin + ": IDX image dimensions must be positive");
    const std::size_t need = 16 + n * h * w;
    if (bytes.size() != need) {
      throw FormatError(origin + ": IDX image length " + std::to_string(bytes.size()) + " bytes, expected " +
                        std::to_string(need));
    }
    out.is_images = true;
    out.images = Tensor<float>({n, h, w, 1});
    for (std::size_t i = 0; i < n * h * w; ++i) out.images[i] = static_cast<float>(bytes[16 + i]) / 255.0f;
  } else if (magic == kIdxLabelsMagic) {
    if (bytes.size() < 8) throw FormatError(origin + ": truncated IDX label header");
    const std::size_t n = detail::read_be32(bytes, 4);
    if (n == 0) throw FormatError(origin + ": IDX label count must be positive");
    if (bytes.size() != 8 + n) {
      throw FormatError(origin + ": IDX label length " + std::to_string(bytes.size()) + " bytes, expected " +
                        std::to_string(8 + n));
    }
    out.labels.assign(bytes.begin() + 8, bytes.end());
  } else {
    throw FormatError(origin + ": bad IDX magic, observed bytes " + detail::hex_bytes(bytes, 4) +
                      " (expected 00 00 08 03 or 00 00 08 01)");
  }
  return out;
}

inline IdxContents read_idx(const std::string& path) {
  const auto bytes = detail::read_file_bytes(path);
  return parse_idx(bytes, path);
}

/// Pairs an IDX image file with its label file.
inline LabeledDataset load_idx_dataset(const std::string& images_path, const std::string& labels_path,
                                       std::size_t classes = 10, std::string split = {}) {
  IdxContents img = read_idx(images_path);
  IdxContents lab = read_idx(labels_path);
  if (!img.is_images) throw FormatError(images_path + ": expected an IDX image file");
  if (lab.is_images) throw FormatError(labels_path + ": expected an IDX label file");
  if (img.images.extent(0) != lab.labels.size()) {
    throw FormatError("IDX image count " + std::to_string(img.images.extent(0)) + " != label count " +
                      std::to_string(lab.labels.size()));
  }
  LabeledDataset ds{std::move(img.images), std::move(lab.labels), classes, std::move(split)};
  for (auto l : ds.labels)
    if (static_cast<std::size_t>(l) >= classes) throw FormatError(labels_path + ": label out of range");
  return ds;
}

inline constexpr std::size_t kCifarRecordBytes = 3073;

/// CIFAR-10 binary batch: records of 1 label byte + 1024 R, 1024 G, 1024 B bytes.
inline LabeledDataset parse_cifar10(std::span<const unsigned char> bytes, const std::string& origin = "<memory>") {
  if (bytes.empty() || bytes.size() % kCifarRecordBytes != 0) {
    throw FormatError(origin + ": CIFAR-10 length " + std::to_string(bytes.size()) +
                      " is not a positive multiple of 3073");
  }
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  LabeledDataset ds;
  ds.classes = 10;
  ds.images = Tensor<float>({n, 32, 32, 3});
  ds.labels.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const unsigned char* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] > 9) {
      throw FormatError(origin + ": record " + std::to_string(r) + " has label " + std::to_string(rec[0]));
    }
    ds.labels[r] = rec[0];
    float* dst = ds.images.raw() + r * 3072;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < 1024; ++p) dst[p * 3 + c] = static_cast<float>(rec[1 + c * 1024 + p]) / 255.0f;
  }
  return ds;
}

inline LabeledDataset read_cifar10_bin(const std::string& path) {
  const auto bytes = detail::read_file_bytes(path);
  return parse_cifar10(bytes, path);
}

inline LabeledDataset concatenate(const std::vector<LabeledDataset>& parts) {
  if (parts.empty()) throw InputError("nothing to concatenate");
  LabeledDataset out;
  out.classes = parts.front().classes;
  out.split = parts.front().split;
  Shape s = parts.front().images.shape();
  std::vector<float> pixels;
  for (const auto& p : parts) {
    if (p.images.rank() != 4 || !std::equal(s.begin() + 1, s.end(), p.images.shape().begin() + 1)) {
      throw InputError("cannot concatenate datasets with different image shapes");
    }
    pixels.insert(pixels.end(), p.images.data().begin(), p.images.data().end());
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  s[0] = out.labels.size();
  out.images = Tensor<float>(s, std::move(pixels));
  return out;
}

// ---------------------------------------------------------------- synthetic data

enum class SyntheticKind { blobs, bars };

inline std::string to_string(SyntheticKind k) { return k == SyntheticKind::blobs ? "blobs" : "bars"; }

struct SyntheticOptions {
  double noise = 0.1;   // std of additive Gaussian pixel noise
  double jitter = 0.75; // max center/offset displacement in pixels
};

/// Noise-free class template: a unit-amplitude blob (or bar) at the class's canonical
/// position, with an optional displacement.
inline std::vector<float> synthetic_template(SyntheticKind kind, std::size_t h, std::size_t w, std::size_t j,
                                             std::size_t classes, double dy = 0.0, double dx = 0.0) {
  std::vector<float> img(h * w, 0.0f);
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;
  const double cx = (static_cast<double>(w) - 1.0) / 2.0;
  const double extent = static_cast<double>(std::min(h, w));
  if (kind == SyntheticKind::blobs) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(classes);
    const double radius = 0.3 * extent;
    const double by = cy + radius * std::sin(angle) + dy;
    const double bx = cx + radius * std::cos(angle) + dx;
    const double sigma = extent / 8.0;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double d2 = (y - by) * (y - by) + (x - bx) * (x - bx);
        img[y * w + x] = static_cast<float>(std::exp(-d2 / (2.0 * sigma * sigma)));
      }
  } else {
    const double angle = std::numbers::pi * static_cast<double>(j) / static_cast<double>(classes);
    const double ny = std::cos(angle), nx = -std::sin(angle);  // unit normal of the bar
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double d = (y - cy - dy) * ny + (x - cx - dx) * nx;
        img[y * w + x] = static_cast<float>(std::exp(-d * d / 2.0));
      }
  }
  return img;
}

/// Seeded class-conditional images [N, H, W, 1]. Labels are assigned round-robin and
/// shuffled, so every class has floor(N/J) or ceil(N/J) samples.
inline LabeledDataset synthetic_dataset(SyntheticKind kind, std::size_t n, std::size_t h, std::size_t w,
                                        std::size_t classes, std::uint64_t seed, SyntheticOptions opts = {}) {
  if (classes < 2) throw ConfigError("synthetic_dataset needs at least 2 classes");
  if (n == 0 || h == 0 || w == 0) throw ConfigError("synthetic_dataset needs positive N, H, W");
  std::mt19937_64 rng(seed);
  LabeledDataset ds;
  ds.classes = classes;
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<int>(i % classes);
  std::shuffle(ds.labels.begin(), ds.labels.end(), rng);
  ds.images = Tensor<float>({n, h, w, 1});
  std::uniform_real_distribution<double> jitter(-opts.jitter, opts.jitter);
  std::uniform_real_distribution<double> amplitude(0.7, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double dy = jitter(rng), dx = jitter(rng), a = amplitude(rng);
    const auto tmpl = synthetic_template(kind, h, w, static_cast<std::size_t>(ds.labels[i]), classes, dy, dx);
    float* dst = ds.images.raw() + i * h * w;
    for (std::size_t p = 0; p < h * w; ++p) {
      double v = a * tmpl[p];
      if (opts.noise > 0.0) v += opts.noise * noise(rng);
      dst[p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return ds;
}

// ---------------------------------------------------------------- batching

template <typename T>
struct Batch {
  Tensor<T> images;   // [B, H, W, C]
  Tensor<T> targets;  // one-hot [B, J]
  std::vector<int> labels;
};

template <typename T>
Batch<T> make_batch(const LabeledDataset& ds, std::span<const std::size_t> indices) {
  Shape s = ds.images.shape();
  s[0] = indices.size();
  const std::size_t per = ds.images.size() / ds.size();
  Batch<T> b{Tensor<T>(s), Tensor<T>({indices.size(), ds.classes}), {}};
  b.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const float* src = ds.images.raw() + indices[i] * per;
    std::copy(src, src + per, b.images.raw() + i * per);
    b.targets[i * ds.classes + static_cast<std::size_t>(ds.labels[indices[i]])] = T{1};
    b.labels.push_back(ds.labels[indices[i]]);
  }
  return b;
}

}  // namespace widecaps
