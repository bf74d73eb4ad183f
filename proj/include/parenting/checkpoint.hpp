#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include "parenting/model.hpp"

namespace parenting {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary layout (little-endian host order):
///   "PRNTCKPT" | u32 version | config | u32 tensor count |
///   per tensor: u32 name length, name, i64 rows, i64 cols, rows*cols f64 row-major.
/// Non-unit tensors come first, then the parameter units in model order.
void save_checkpoint(const MicroTransformer& model, const std::filesystem::path& path);

/// Throws VersionMismatchError, TruncatedFileError or DimensionMismatchError.
/// When `expected` is given, a file written for another configuration is
/// rejected with DimensionMismatchError.
MicroTransformer load_checkpoint(const std::filesystem::path& path,
                                 const std::optional<ModelConfig>& expected = std::nullopt);

}  // namespace parenting
