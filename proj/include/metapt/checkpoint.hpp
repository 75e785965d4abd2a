// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint format (all integers little-endian):
//
//   magic      8 bytes  "MPTCKPT\0"
//   version    u32      1
//   kind       u32      0 backbone, 1 prompt, 2 annotator
//   meta_len   u32      followed by meta_len bytes of JSON metadata
//   n_tensors  u32
//   per tensor: name_len u32, name bytes, rows u64, cols u64
//   payload    f64 little-endian, tensors in header order, row-major
//   digest     32 bytes SHA-256 of every preceding byte
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "metapt/autodiff.hpp"
#include "metapt/model.hpp"

namespace metapt {

enum class CheckpointKind : std::uint32_t { kBackbone = 0, kPrompt = 1, kAnnotator = 2 };

std::string to_string(CheckpointKind kind);

struct NamedMatrix {
  std::string name;
  Matrix value;
};

struct Checkpoint {
  CheckpointKind kind = CheckpointKind::kPrompt;
  nlohmann::json metadata = nlohmann::json::object();  // model config, config fingerprint
  std::vector<NamedMatrix> tensors;
  std::string content_hash;  // filled by save/load
};

/// Writes `ckpt` to `path` and returns the content hash.
std::string save_checkpoint(const std::filesystem::path& path, Checkpoint ckpt);
/// Reads and hash-verifies a checkpoint; throws ArtifactError on corruption.
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Content hash of a checkpoint file without parsing the payload.
std::string checkpoint_hash(const std::filesystem::path& path);

Checkpoint to_checkpoint(const BackboneParams& backbone, CheckpointKind kind = CheckpointKind::kBackbone,
                         const std::string& fingerprint = {});
/// Rebuilds a frozen backbone.
BackboneParams backbone_from_checkpoint(const Checkpoint& ckpt);

Checkpoint to_checkpoint(const SoftPrompt& prompt, const ModelConfig& config, const std::string& fingerprint = {});
/// Shape-checks the stored prompt against `expected`.
SoftPrompt prompt_from_checkpoint(const Checkpoint& ckpt, const ModelConfig& expected);

}  // namespace metapt
