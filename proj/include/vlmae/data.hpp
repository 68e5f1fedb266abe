// Copyright (c) 2026, The vlmae-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic shapes-and-captions pairs.
//
// A scene is a grid of cells holding filled squares, circles and triangles in
// eight colours. Its caption names a subset of the objects, largest first, so
// captions routinely leave out the small ones ("information disparity"). The
// described objects' bounding boxes define the text-relevant region used by
// the regional reconstruction loss.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "vlmae/rng.hpp"
#include "vlmae/tensor.hpp"

namespace vlmae::data {

enum class ShapeKind : std::uint8_t { kSquare = 0, kCircle = 1, kTriangle = 2 };

inline constexpr std::array<std::string_view, 3> kShapeNames{"square", "circle", "triangle"};
inline constexpr std::array<std::string_view, 8> kColorNames{"red",  "green",   "blue",  "yellow",
                                                             "cyan", "magenta", "white", "orange"};

std::array<double, 3> color_rgb(std::size_t color);

// Half-open pixel rectangle [x0, x1) x [y0, y1).
struct Box {
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  std::size_t area() const { return (x1 - x0) * (y1 - y0); }
  bool intersects(const Box& o) const { return x0 < o.x1 && o.x0 < x1 && y0 < o.y1 && o.y0 < y1; }
  bool operator==(const Box&) const = default;
};

struct SceneObject {
  ShapeKind kind = ShapeKind::kSquare;
  std::size_t color = 0;
  std::size_t cell_row = 0;
  std::size_t cell_col = 0;
  Box box;
  bool operator==(const SceneObject&) const = default;
};

struct SceneImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 3;
  std::vector<double> pixels;  // H x W x C, row-major, values in [0, 1]
  std::vector<SceneObject> objects;

  double at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
};

class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kCls = 1;
  static constexpr std::size_t kMask = 2;

  Vocabulary();

  std::size_t size() const { return tokens_.size(); }
  // DataError for unknown tokens.
  std::size_t id(std::string_view token) const;
  std::string_view token(std::size_t id) const;
  // Every id that is not one of the reserved tokens; the pool MLM draws
  // random replacements from.
  const std::vector<std::size_t>& word_ids() const { return words_; }
  std::size_t color_id(std::size_t color) const;
  std::size_t shape_id(ShapeKind kind) const;

 private:
  std::vector<std::string> tokens_;
  std::vector<std::size_t> words_;
};

struct Caption {
  std::vector<std::size_t> token_ids;          // leading [CLS], no padding
  std::vector<std::size_t> described_objects;  // indices into SceneImage::objects
};

struct DataConfig {
  std::size_t image_size = 64;
  std::size_t channels = 3;
  std::size_t grid_cells = 4;  // grid_cells x grid_cells object slots
  std::size_t min_objects = 2;
  std::size_t max_objects = 4;
  double disparity_prob = 0.7;     // probability the caption is a strict subset
  double small_object_prob = 0.5;  // probability an object is drawn at half size
  std::size_t max_tokens = 16;
  // Resample scenes whose described region covers less than
  // relevance_min_fraction of the patches.
  bool relevance_filter = false;
  double relevance_min_fraction = 0.2;
  std::size_t train_pairs = 2048;
  std::size_t held_out_pairs = 128;

  // ConfigError on inconsistent settings; patch_size is the model's.
  void validate(std::size_t patch_size) const;
};

struct Pair {
  SceneImage image;
  Caption caption;
};

// Deterministic in (seed, config).
Pair generate_pair(std::uint64_t seed, const DataConfig& config, const Vocabulary& vocab);

// [N, P*P*C]; patches in row-major patch order, pixels inside a patch in
// (row, col, channel) order.
Tensor patchify(const SceneImage& image, std::size_t patch_size);
std::vector<double> patchify_values(const SceneImage& image, std::size_t patch_size);
std::vector<double> unpatchify(std::span<const double> patches, std::size_t height, std::size_t width,
                               std::size_t channels, std::size_t patch_size);

// True where a patch's pixel rectangle intersects a described object's box.
// All-true when nothing is described.
std::vector<std::uint8_t> make_region_mask(const SceneImage& image, const Caption& caption, std::size_t patch_size);

struct MlmCorruption {
  std::vector<std::size_t> corrupted;
  std::vector<std::size_t> positions;
  std::vector<std::size_t> targets;
};

struct MlmOptions {
  double select_prob = 0.15;
  double mask_prob = 0.8;    // of selected: replace with [MASK]
  double random_prob = 0.1;  // of selected: replace with a random word
};

// [PAD] and [CLS] positions are never selected.
MlmCorruption mlm_corrupt(std::span<const std::size_t> token_ids, const Vocabulary& vocab, Rng& rng,
                          const MlmOptions& options = {});

// Caption structure recovered from tokens: one clause per described object;
// relation[i] links clause i-1 to clause i ("left-of" or "above").
struct CaptionClause {
  std::size_t color = 0;
  ShapeKind kind = ShapeKind::kSquare;
  enum class Relation : std::uint8_t { kNone, kLeftOf, kAbove } relation = Relation::kNone;
};
std::vector<CaptionClause> parse_caption(std::span<const std::size_t> token_ids, const Vocabulary& vocab);
// Whether the scene contains distinct objects satisfying every clause and
// relation. This is the ground-truth matcher used as a retrieval oracle.
bool caption_matches(std::span<const CaptionClause> clauses, std::span<const SceneObject> objects);

enum class Split : std::uint8_t { kTrain, kHeldOut };
std::string_view split_name(Split split);

struct PairRecord {
  std::size_t pair_id = 0;
  std::uint64_t seed = 0;
  Split split = Split::kTrain;
  std::vector<SceneObject> objects;
  Caption caption;
};

// Train and held-out records. Held-out pairs are drawn so that every held-out
// caption matches its own image and no other held-out image.
struct Dataset {
  std::vector<PairRecord> train;
  std::vector<PairRecord> held_out;

  static Dataset generate(const DataConfig& config, std::size_t patch_size, std::uint64_t seed,
                          const Vocabulary& vocab);
};

SceneImage render(const PairRecord& record, const DataConfig& config, const Vocabulary& vocab);

struct Batch {
  std::size_t size = 0;
  std::size_t num_patches = 0;
  std::size_t patch_dim = 0;
  std::size_t seq_len = 0;                 // longest caption in the batch
  Tensor patches;                          // [B, N, P*P*C]
  std::vector<std::size_t> token_ids;      // B x seq_len, [PAD]-filled
  std::vector<std::uint8_t> token_valid;   // B x seq_len, 0 at [PAD]
  std::vector<std::uint8_t> region_mask;   // B x N
  std::vector<std::size_t> pair_ids;
};

Batch make_batch(std::span<const PairRecord> records, const DataConfig& config, std::size_t patch_size,
                 const Vocabulary& vocab);
Batch make_batch(std::span<const PairRecord* const> records, const DataConfig& config, std::size_t patch_size,
                 const Vocabulary& vocab);

// Line-delimited JSON manifest, one record per pair. Pixels are not stored;
// images are regenerated from the seed.
void write_manifest(const std::string& path, const Dataset& dataset, const Vocabulary& vocab);
Dataset read_manifest(const std::string& path);

}  // namespace vlmae::data
