#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "magic/parameters.hpp"
#include "magic/schedule.hpp"
#include "magic/unet.hpp"

namespace magic {

/// Named tensors plus string metadata, stored in the "MGK1" container:
///   magic "MGK1", u32 version, u32 tensor count,
///   per tensor: u32 name length, name, u8 dtype (0 f32, 1 f64), u32 rank, u64 extents, raw values,
///   u32 metadata count, then (u32 length, key, u32 length, value) pairs.
/// All integers are little-endian.
struct Checkpoint {
  struct Entry {
    std::string name;
    std::variant<Tensor<float>, Tensor<double>> value;
  };

  std::vector<Entry> tensors;
  std::map<std::string, std::string> metadata;

  template <typename T>
  void put(const std::string& name, Tensor<T> value);
  template <typename T>
  const Tensor<T>& get(const std::string& name) const;
  bool has(const std::string& name) const;

  /// Adds every parameter under `prefix`.
  template <typename T>
  void put_parameters(const ParameterSet<T>& params, const std::string& prefix = "");
  /// Restores every parameter of `params` from entries under `prefix`.
  template <typename T>
  void load_parameters(ParameterSet<T>& params, const std::string& prefix = "") const;

  const std::string& meta(const std::string& key) const;
  std::string meta_or(const std::string& key, const std::string& fallback) const;

  /// FNV-1a over the serialized tensor section (names, dtypes, shapes, values).
  std::string tensor_digest() const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void put_unet_config(Checkpoint& ckpt, const UNetConfig& cfg);
UNetConfig unet_config_from(const Checkpoint& ckpt);
void put_schedule(Checkpoint& ckpt, const NoiseSchedule& sched);
NoiseSchedule schedule_from(const Checkpoint& ckpt);

/// Round-trip safe text form of a double.
std::string format_double(double v);

}  // namespace magic
