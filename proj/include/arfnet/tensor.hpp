// Copyright 2026 the arfnet authors
// SPDX-License-Identifier: Apache-2.0

/**
 * @file tensor.hpp
 * @brief Dense row-major tensor type and the error taxonomy shared by the
 *        whole library.
 *
 * A Tensor<T> is a plain value: shape plus a flat data buffer. Gradient
 * participation is a lightweight handle (tape id + slot) assigned by a
 * GradTape when the tensor is watched or produced by a recorded op.
 */

#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace arfnet {

/// Base class for all library errors.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Shape mismatch between tensors (e.g. kernel channels vs input channels).
struct DimensionError : Error {
  explicit DimensionError(const std::string& msg) : Error(msg) {}
};

/// Invalid configuration value (even kernel extent, bad placement, ...).
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

/// Caller broke a documented precondition (grid out of range, lambda out of
/// range, non-deterministic function handed to the gradient checker).
struct ContractError : Error {
  explicit ContractError(const std::string& msg) : Error(msg) {}
};

/// Episode construction failure (not enough classes or samples).
struct EpisodeError : Error {
  explicit EpisodeError(const std::string& msg) : Error(msg) {}
};

/// File format / IO failure.
struct IoError : Error {
  explicit IoError(const std::string& msg) : Error(msg) {}
};

inline std::string shape_to_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline size_t numel_of(const std::vector<int>& shape) {
  size_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw DimensionError("non-positive extent in shape " + shape_to_string(shape));
    n *= static_cast<size_t>(e);
  }
  return n;
}

template <typename T>
struct Tensor {
  static_assert(std::is_floating_point_v<T>, "Tensor requires a floating-point element type");

  std::vector<int> shape;
  std::vector<T> data;

  // Gradient-trace handle. A tensor participates in differentiation iff it
  // was watched by / produced on a still-living tape; `tape_id` guards
  // against stale slots from an earlier tape.
  int node = -1;
  std::uint64_t tape_id = 0;

  Tensor() = default;

  explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(numel_of(shape), T(0)) {}

  Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != data.size())
      throw DimensionError("data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_to_string(shape));
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

  static Tensor full(std::vector<int> s, T v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  static Tensor ones(std::vector<int> s) { return full(std::move(s), T(1)); }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  int rank() const { return static_cast<int>(shape.size()); }
  size_t numel() const { return data.size(); }
  bool requires_grad() const { return node >= 0; }

  int extent(int axis) const { return shape[static_cast<size_t>(axis)]; }

  /// Row-major flat offset of a multi-index.
  template <typename... Ix>
  size_t offset(Ix... ix) const {
    static_assert((std::is_integral_v<Ix> && ...));
    const int idx[] = {static_cast<int>(ix)...};
    size_t off = 0;
    for (size_t a = 0; a < sizeof...(Ix); ++a) off = off * static_cast<size_t>(shape[a]) + static_cast<size_t>(idx[a]);
    return off;
  }

  template <typename... Ix>
  T& at(Ix... ix) {
    return data[offset(ix...)];
  }
  template <typename... Ix>
  const T& at(Ix... ix) const {
    return data[offset(ix...)];
  }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

template <typename T>
void require_shape(const Tensor<T>& t, const std::vector<int>& shape, const char* what) {
  if (t.shape != shape)
    throw DimensionError(std::string(what) + ": expected shape " + shape_to_string(shape) +
                         ", got " + shape_to_string(t.shape));
}

template <typename T>
void require_rank(const Tensor<T>& t, int rank, const char* what) {
  if (t.rank() != rank)
    throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_to_string(t.shape));
}

}  // namespace arfnet
