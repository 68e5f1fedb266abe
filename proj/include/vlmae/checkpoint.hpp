// Copyright (c) 2026, The vlmae-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// On-disk checkpoint: a directory holding
//   manifest.json  format tag, step, config echo, RNG state, optimizer step,
//                  one entry per tensor {name, group, shape, offset, count},
//                  payload size and FNV-1a checksum
//   payload.bin    every tensor's values as little-endian IEEE-754 f64,
//                  concatenated in manifest order
// Groups are "online", "shadow", "adam_m" and "adam_v".

#pragma once

#include <cstddef>
#include <cstdint>
#include <json.hpp>
#include <string>
#include <vector>

#include "vlmae/tensor.hpp"

namespace vlmae {

struct CheckpointTensor {
  std::string name;
  std::string group;
  Shape shape;
  std::vector<double> values;
};

struct CheckpointData {
  nlohmann::json config;
  std::size_t step = 0;
  std::string rng_state;
  std::size_t optimizer_step = 0;
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& group, const std::string& name) const;
};

// IoError when the directory cannot be written.
void write_checkpoint(const std::string& dir, const CheckpointData& data);

// Validates everything before returning: CorruptionError on a malformed
// manifest, a payload of the wrong size, an entry outside the payload or a
// checksum mismatch.
CheckpointData read_checkpoint(const std::string& dir);

std::uint64_t fnv1a64(const void* bytes, std::size_t size);

// Human-readable differences between the echoed config of a checkpoint and
// the config it is being loaded under, one line per differing leaf. Output
// paths are ignored.
std::vector<std::string> config_echo_warnings(const nlohmann::json& saved, const nlohmann::json& current);

}  // namespace vlmae
