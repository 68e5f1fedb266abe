// Copyright (c) 2026, The vlmae-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmae/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "vlmae/errors.hpp"

namespace vlmae {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kFormat = "vlmae-checkpoint-1";

std::uint64_t to_little(std::uint64_t x) {
  if constexpr (std::endian::native == std::endian::little) {
    return x;
  } else {
    std::uint64_t y = 0;
    for (int i = 0; i < 8; ++i) y |= ((x >> (8 * i)) & 0xFF) << (8 * (7 - i));
    return y;
  }
}

std::string hex64(std::uint64_t v) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << v;
  return out.str();
}

void diff_leaves(const json& a, const json& b, const std::string& path, std::vector<std::string>& out) {
  static const std::set<std::string> ignored = {"train.metrics_path", "train.timing_path", "train.checkpoint_dir",
                                                "train.checkpoint_every", "train.epochs"};
  if (ignored.count(path)) return;
  if (a.is_object() && b.is_object()) {
    std::set<std::string> keys;
    for (const auto& [k, v] : a.items()) keys.insert(k);
    for (const auto& [k, v] : b.items()) keys.insert(k);
    for (const auto& k : keys) {
      const std::string sub = path.empty() ? k : path + "." + k;
      const json none;
      diff_leaves(a.contains(k) ? a.at(k) : none, b.contains(k) ? b.at(k) : none, sub, out);
    }
    return;
  }
  if (a != b) out.push_back(path + ": checkpoint has " + a.dump() + ", config has " + b.dump());
}

}  // namespace

const CheckpointTensor* CheckpointData::find(const std::string& group, const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.group == group && t.name == name) return &t;
  }
  return nullptr;
}

std::uint64_t fnv1a64(const void* bytes, std::size_t size) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

void write_checkpoint(const std::string& dir, const CheckpointData& data) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir + ": " + ec.message());

  std::vector<char> payload;
  json entries = json::array();
  for (const auto& t : data.tensors) {
    if (numel(t.shape) != t.values.size()) throw ContractError("checkpoint tensor " + t.name + " has inconsistent shape");
    entries.push_back({{"name", t.name},
                       {"group", t.group},
                       {"shape", t.shape},
                       {"offset", payload.size()},
                       {"count", t.values.size()}});
    const std::size_t start = payload.size();
    payload.resize(start + 8 * t.values.size());
    for (std::size_t i = 0; i < t.values.size(); ++i) {
      const std::uint64_t bits = to_little(std::bit_cast<std::uint64_t>(t.values[i]));
      std::memcpy(payload.data() + start + 8 * i, &bits, 8);
    }
  }
  json manifest = {{"format", kFormat},
                   {"step", data.step},
                   {"config", data.config},
                   {"rng_state", data.rng_state},
                   {"optimizer_step", data.optimizer_step},
                   {"tensors", std::move(entries)},
                   {"payload_bytes", payload.size()},
                   {"checksum", hex64(fnv1a64(payload.data(), payload.size()))}};

  const fs::path root(dir);
  {
    std::ofstream out(root / "payload.bin", std::ios::binary | std::ios::trunc);
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw IoError("failed writing " + (root / "payload.bin").string());
  }
  std::ofstream out(root / "manifest.json", std::ios::trunc);
  out << manifest.dump(1) << '\n';
  if (!out) throw IoError("failed writing " + (root / "manifest.json").string());
}

CheckpointData read_checkpoint(const std::string& dir) {
  const fs::path root(dir);
  std::ifstream mf(root / "manifest.json");
  if (!mf) throw IoError("no checkpoint manifest in " + dir);
  json manifest;
  try {
    manifest = json::parse(mf);
  } catch (const json::exception& e) {
    throw CorruptionError("checkpoint manifest unreadable: " + std::string(e.what()));
  }

  std::ifstream pf(root / "payload.bin", std::ios::binary);
  if (!pf) throw CorruptionError("checkpoint payload missing in " + dir);
  std::vector<char> payload((std::istreambuf_iterator<char>(pf)), std::istreambuf_iterator<char>());

  CheckpointData data;
  try {
    if (manifest.at("format").get<std::string>() != kFormat) throw CorruptionError("unknown checkpoint format");
    const auto expected = manifest.at("payload_bytes").get<std::size_t>();
    if (payload.size() != expected) {
      throw CorruptionError("checkpoint payload is " + std::to_string(payload.size()) + " bytes, manifest says " +
                            std::to_string(expected));
    }
    if (manifest.at("checksum").get<std::string>() != hex64(fnv1a64(payload.data(), payload.size()))) {
      throw CorruptionError("checkpoint payload checksum mismatch");
    }
    data.step = manifest.at("step").get<std::size_t>();
    data.config = manifest.at("config");
    data.rng_state = manifest.at("rng_state").get<std::string>();
    data.optimizer_step = manifest.at("optimizer_step").get<std::size_t>();
    for (const auto& e : manifest.at("tensors")) {
      CheckpointTensor t;
      t.name = e.at("name").get<std::string>();
      t.group = e.at("group").get<std::string>();
      t.shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto count = e.at("count").get<std::size_t>();
      if (count != numel(t.shape)) throw CorruptionError("checkpoint entry " + t.name + " count disagrees with shape");
      if (offset % 8 != 0 || offset > payload.size() || count > (payload.size() - offset) / 8) {
        throw CorruptionError("checkpoint entry " + t.name + " lies outside the payload");
      }
      t.values.resize(count);
      for (std::size_t i = 0; i < count; ++i) {
        std::uint64_t bits;
        std::memcpy(&bits, payload.data() + offset + 8 * i, 8);
        t.values[i] = std::bit_cast<double>(to_little(bits));
      }
      data.tensors.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    throw CorruptionError("checkpoint manifest malformed: " + std::string(e.what()));
  }
  return data;
}

std::vector<std::string> config_echo_warnings(const json& saved, const json& current) {
  std::vector<std::string> out;
  diff_leaves(saved, current, "", out);
  return out;
}

}  // namespace vlmae
