#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "magic/autograd.hpp"
#include "magic/rng.hpp"

namespace magic {

/// Named, ordered collection of trainable leaves.
template <typename T>
class ParameterSet {
 public:
  Var<T> add(const std::string& name, Tensor<T> init, bool trainable = true);

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  Var<T> add_fan_in(const std::string& name, Shape shape, std::int64_t fan_in, Rng& rng);
  Var<T> add_zeros(const std::string& name, Shape shape);
  Var<T> add_ones(const std::string& name, Shape shape);

  const Var<T>& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::size_t size() const { return params_.size(); }
  std::int64_t element_count() const;
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void set_trainable(bool on);
  void zero_grad();

  /// Overwrites values by name; every parameter must be present with a matching shape.
  void load(const std::vector<std::pair<std::string, Tensor<T>>>& values);
  std::vector<std::pair<std::string, Tensor<T>>> snapshot() const;

  /// FNV-1a over names, shapes and raw value bytes.
  std::string digest() const;

 private:
  std::vector<std::pair<std::string, Var<T>>> params_;
};

/// Hex FNV-1a 64-bit digest of a byte range, chainable through `state`.
std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t state = 0xcbf29ce484222325ull);
std::string hex64(std::uint64_t v);

}  // namespace magic
