#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "s2gr/numerics/tape.hpp"

namespace s2gr::nx {

// Binary checkpoint container, all integers little-endian:
//
//   magic    8 bytes  "S2GRCKPT"
//   version  u32      1
//   n_meta   u32      then n_meta x { u32 len, key bytes, u32 len, value bytes }
//   n_tensor u32      then n_tensor x {
//                       u32 name_len, name bytes (UTF-8),
//                       u32 rank, rank x u32 extents,
//                       prod(extents) x f32 payload, row-major }
struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

struct Checkpoint {
  static constexpr char kMagic[8] = {'S', '2', 'G', 'R', 'C', 'K', 'P', 'T'};
  static constexpr std::uint32_t kVersion = 1;

  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
  std::string meta_value(const std::string& key, const std::string& fallback = "") const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

template <typename T>
void append_parameters(Checkpoint& ckpt, const ParameterStore<T>& store, const std::string& prefix = "");

/// Copies tensors named `prefix + param.name` into the store. Every parameter
/// must be present with a matching shape (ShapeError otherwise).
template <typename T>
void load_parameters(const Checkpoint& ckpt, ParameterStore<T>& store, const std::string& prefix = "");

}  // namespace s2gr::nx
