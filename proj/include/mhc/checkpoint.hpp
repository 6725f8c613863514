#pragma once

#include <string>

#include "mhc/model.hpp"

namespace mhc {

// MHCK container: "MHCK" magic, u32 LE format version, u64 LE JSON header
// length, JSON header (model config + tensor manifest with name/shape/offset),
// then raw little-endian float32 payloads in manifest order. Offsets are bytes
// from the start of the payload section.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace mhc
