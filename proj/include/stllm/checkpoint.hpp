#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "stllm/parameter.hpp"
#include "stllm/tensor.hpp"

namespace stllm {

// Archive layout (all integers little-endian):
//   "STLLCKPT"            8 bytes
//   version               u32 (= 1)
//   header_len            u64
//   header                header_len bytes of UTF-8 JSON:
//                           {"meta": {...}, "parameters": [{"name", "shape", "frozen"}, ...]}
//   payload               for each parameter in header order, product(shape) float64 values

struct CheckpointEntry {
  std::string name;
  bool frozen = false;
  Tensor value;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<CheckpointEntry> entries;

  [[nodiscard]] const CheckpointEntry* find(std::string_view name) const noexcept;
};

Checkpoint make_checkpoint(const ParameterSet& params, nlohmann::json meta);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params, nlohmann::json meta);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::string_view bytes);

/// Copies values (and optionally frozen flags) for every parameter whose name
/// matches `pattern`. Every matched parameter must be present in the archive
/// with the same shape. Returns the number of parameters loaded.
std::size_t load_into(ParameterSet& params, const Checkpoint& ckpt, std::string_view pattern = "*",
                      bool apply_frozen_flags = true);

}  // namespace stllm
