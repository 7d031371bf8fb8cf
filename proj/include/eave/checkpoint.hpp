#pragma once

// Binary model checkpoints: magic "EAVECKPT", u32 version, the canonical
// config JSON, then every parameter as name, shape and little-endian floats,
// in EaveModel::parameters() order.

#include <filesystem>

#include "eave/encoder.hpp"

namespace eave {

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const EaveModel<float>& model);
// Throws IntegrityError naming the path on any mismatch or truncation.
EaveModel<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace eave
