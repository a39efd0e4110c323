#pragma once

#include "mdasr/nn/model.hpp"

#include <filesystem>
#include <optional>

namespace mdasr::nn {

// Binary layout, all integers and floats little-endian:
//   "MDAS" | u16 version | config block | u32 tensor count |
//   per tensor: u32 name length, name bytes, u8 dtype (0 = f32, 1 = f64),
//               u8 rank, u32 dims[rank], row-major data.
inline constexpr std::uint16_t checkpoint_version = 1;

template <typename T>
void save_checkpoint(const Params<T>& params, const std::filesystem::path& path);

// Reads only the config block.
ModelConfig read_checkpoint_config(const std::filesystem::path& path);

// Errors: ErrorKind::format (magic, version, dtype), ErrorKind::corruption
// (truncated or inconsistent data), ErrorKind::config_mismatch when
// `expected` is given and disagrees with the stored config.
template <typename T>
Params<T> load_checkpoint(const std::filesystem::path& path, const std::optional<ModelConfig>& expected = std::nullopt);

}  // namespace mdasr::nn
