#pragma once

#include <stdexcept>
#include <string>

namespace widecaps {

// Shapes that cannot be combined (matmul inner extents, conv output of size 0, ...).
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Model/routing/SE configurations that are structurally invalid.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Bad caller-supplied data: non one-hot targets, labels out of range, empty datasets.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class InsufficientBatchError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed dataset files.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Checkpoint manifest and blob disagree.
class CorruptionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite gradient encountered by the optimizer.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace widecaps
