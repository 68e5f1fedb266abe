// Copyright (c) 2026, The vlmae-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmae/data.hpp"

#include <algorithm>
#include <numeric>

#include "vlmae/errors.hpp"

namespace vlmae::data {

namespace {

constexpr std::array<std::array<double, 3>, 8> kRgb{{
    {1.0, 0.0, 0.0},
    {0.0, 1.0, 0.0},
    {0.0, 0.0, 1.0},
    {1.0, 1.0, 0.0},
    {0.0, 1.0, 1.0},
    {1.0, 0.0, 1.0},
    {1.0, 1.0, 1.0},
    {1.0, 0.5, 0.0},
}};

bool inside_shape(ShapeKind kind, const Box& box, std::size_t x, std::size_t y) {
  const double w = static_cast<double>(box.x1 - box.x0);
  const double h = static_cast<double>(box.y1 - box.y0);
  const double px = static_cast<double>(x - box.x0) + 0.5;
  const double py = static_cast<double>(y - box.y0) + 0.5;
  switch (kind) {
    case ShapeKind::kSquare:
      return true;
    case ShapeKind::kCircle: {
      const double dx = px - w / 2.0;
      const double dy = py - h / 2.0;
      return dx * dx + dy * dy <= (w / 2.0) * (w / 2.0);
    }
    case ShapeKind::kTriangle:
      // Apex at the top centre, base along the bottom edge.
      return std::abs(px - w / 2.0) <= (py / h) * (w / 2.0);
  }
  return false;
}

void draw(SceneImage& image, const SceneObject& obj) {
  const auto rgb = color_rgb(obj.color);
  for (std::size_t y = obj.box.y0; y < obj.box.y1; ++y) {
    for (std::size_t x = obj.box.x0; x < obj.box.x1; ++x) {
      if (!inside_shape(obj.kind, obj.box, x, y)) continue;
      for (std::size_t c = 0; c < image.channels; ++c) image.pixels[(y * image.width + x) * image.channels + c] = rgb[c];
    }
  }
}

Caption describe(const std::vector<SceneObject>& objects, std::size_t count, Rng& rng, const Vocabulary& vocab) {
  // Most salient (largest) objects first; ties broken by a random shuffle.
  std::vector<std::size_t> order(objects.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return objects[a].box.area() > objects[b].box.area(); });
  std::vector<std::size_t> chosen(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));
  // Reading order left to right, then top to bottom, so each consecutive pair
  // is related by "left-of" or "above".
  std::sort(chosen.begin(), chosen.end(), [&](std::size_t a, std::size_t b) {
    const auto& oa = objects[a];
    const auto& ob = objects[b];
    return oa.cell_col != ob.cell_col ? oa.cell_col < ob.cell_col : oa.cell_row < ob.cell_row;
  });
  Caption caption;
  caption.token_ids.push_back(Vocabulary::kCls);
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    const auto& obj = objects[chosen[i]];
    if (i > 0) {
      const auto& prev = objects[chosen[i - 1]];
      caption.token_ids.push_back(vocab.id(prev.cell_col < obj.cell_col ? "left-of" : "above"));
    }
    caption.token_ids.push_back(vocab.id("a"));
    caption.token_ids.push_back(vocab.color_id(obj.color));
    caption.token_ids.push_back(vocab.shape_id(obj.kind));
  }
  caption.described_objects = std::move(chosen);
  return caption;
}

Pair generate_unfiltered(std::uint64_t seed, const DataConfig& config, const Vocabulary& vocab) {
  Rng rng(seed);
  const std::size_t cell = config.image_size / config.grid_cells;
  const std::size_t n = config.min_objects + rng.below(config.max_objects - config.min_objects + 1);

  std::vector<std::size_t> cells(config.grid_cells * config.grid_cells);
  std::iota(cells.begin(), cells.end(), std::size_t{0});
  rng.shuffle(cells);

  Pair pair;
  SceneImage& image = pair.image;
  image.height = image.width = config.image_size;
  image.channels = config.channels;
  image.pixels.assign(image.height * image.width * image.channels, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    SceneObject obj;
    obj.cell_row = cells[i] / config.grid_cells;
    obj.cell_col = cells[i] % config.grid_cells;
    obj.kind = static_cast<ShapeKind>(rng.below(kShapeNames.size()));
    obj.color = rng.below(kColorNames.size());
    const std::size_t cx = obj.cell_col * cell;
    const std::size_t cy = obj.cell_row * cell;
    if (rng.bernoulli(config.small_object_prob)) {
      const std::size_t side = cell / 2;
      const std::size_t ox = rng.below(cell - side + 1);
      const std::size_t oy = rng.below(cell - side + 1);
      obj.box = Box{cx + ox, cy + oy, cx + ox + side, cy + oy + side};
    } else {
      const std::size_t margin = cell >= 8 ? 1 : 0;
      obj.box = Box{cx + margin, cy + margin, cx + cell - margin, cy + cell - margin};
    }
    image.objects.push_back(obj);
    draw(image, obj);
  }
  std::size_t count = n;
  if (n >= 2 && rng.bernoulli(config.disparity_prob)) count = 1 + rng.below(n - 1);
  pair.caption = describe(image.objects, count, rng, vocab);
  return pair;
}

double region_fraction(const Pair& pair, std::size_t patch_size) {
  const auto mask = make_region_mask(pair.image, pair.caption, patch_size);
  return static_cast<double>(std::count(mask.begin(), mask.end(), 1)) / static_cast<double>(mask.size());
}

// Scenes rejected by the relevance filter are replaced by the next candidate
// in a per-seed stream, so the accepted seed alone regenerates the pair.
std::uint64_t accepted_seed(std::uint64_t seed, const DataConfig& config, std::size_t patch_size,
                            const Vocabulary& vocab) {
  if (!config.relevance_filter) return seed;
  for (std::uint64_t attempt = 0; attempt < 10000; ++attempt) {
    const std::uint64_t s = attempt == 0 ? seed : derive_seed(seed, 7, attempt);
    if (region_fraction(generate_unfiltered(s, config, vocab), patch_size) >= config.relevance_min_fraction) return s;
  }
  throw ConfigError("relevance filter rejected 10000 consecutive scenes");
}

PairRecord make_record(std::size_t id, std::uint64_t seed, Split split, Pair pair) {
  PairRecord r;
  r.pair_id = id;
  r.seed = seed;
  r.split = split;
  r.objects = std::move(pair.image.objects);
  r.caption = std::move(pair.caption);
  return r;
}

}  // namespace

std::array<double, 3> color_rgb(std::size_t color) { return kRgb.at(color); }

Vocabulary::Vocabulary() {
  tokens_ = {"[PAD]", "[CLS]", "[MASK]", "a", "left-of", "above"};
  for (auto c : kColorNames) tokens_.emplace_back(c);
  for (auto s : kShapeNames) tokens_.emplace_back(s);
  for (std::size_t i = 3; i < tokens_.size(); ++i) words_.push_back(i);
}

std::size_t Vocabulary::id(std::string_view token) const {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i] == token) return i;
  }
  throw DataError("unknown token '" + std::string(token) + "'");
}

std::string_view Vocabulary::token(std::size_t id) const {
  if (id >= tokens_.size()) throw DataError("token id " + std::to_string(id) + " out of range");
  return tokens_[id];
}

std::size_t Vocabulary::color_id(std::size_t color) const { return id(kColorNames.at(color)); }
std::size_t Vocabulary::shape_id(ShapeKind kind) const { return id(kShapeNames.at(static_cast<std::size_t>(kind))); }

void DataConfig::validate(std::size_t patch_size) const {
  if (channels == 0) throw ConfigError("data.channels must be positive");
  if (patch_size == 0 || image_size % patch_size != 0) {
    throw ConfigError("image size " + std::to_string(image_size) + " is not divisible by patch size " +
                      std::to_string(patch_size));
  }
  if (grid_cells == 0 || image_size % grid_cells != 0 || image_size / grid_cells < 2) {
    throw ConfigError("image size " + std::to_string(image_size) + " cannot be split into " +
                      std::to_string(grid_cells) + " cells per side");
  }
  if (min_objects == 0 || min_objects > max_objects) throw ConfigError("need 1 <= min_objects <= max_objects");
  if (max_objects > grid_cells * grid_cells) {
    throw ConfigError("max_objects " + std::to_string(max_objects) + " exceeds the " +
                      std::to_string(grid_cells * grid_cells) + " grid cells");
  }
  if (4 * max_objects > max_tokens) {
    throw ConfigError("captions of " + std::to_string(max_objects) + " objects need " +
                      std::to_string(4 * max_objects) + " tokens, max_tokens is " + std::to_string(max_tokens));
  }
  if (!(disparity_prob >= 0.0 && disparity_prob <= 1.0)) throw ConfigError("disparity_prob must be in [0, 1]");
  if (!(small_object_prob >= 0.0 && small_object_prob <= 1.0)) throw ConfigError("small_object_prob must be in [0, 1]");
  if (!(relevance_min_fraction >= 0.0 && relevance_min_fraction <= 1.0)) {
    throw ConfigError("relevance_min_fraction must be in [0, 1]");
  }
  if (train_pairs == 0) throw ConfigError("train_pairs must be positive");
}

Pair generate_pair(std::uint64_t seed, const DataConfig& config, const Vocabulary& vocab) {
  if (config.min_objects == 0 || config.min_objects > config.max_objects ||
      config.max_objects > config.grid_cells * config.grid_cells) {
    throw ConfigError("object count range [" + std::to_string(config.min_objects) + ", " +
                      std::to_string(config.max_objects) + "] does not fit a " + std::to_string(config.grid_cells) +
                      "x" + std::to_string(config.grid_cells) + " grid");
  }
  if (config.grid_cells == 0 || config.image_size % config.grid_cells != 0) {
    throw ConfigError("image size not divisible into grid cells");
  }
  return generate_unfiltered(seed, config, vocab);
}

std::vector<double> patchify_values(const SceneImage& image, std::size_t p) {
  if (p == 0 || image.height % p != 0 || image.width % p != 0) {
    throw DimensionError("patchify: " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                         " image is not divisible by patch size " + std::to_string(p));
  }
  const std::size_t gh = image.height / p;
  const std::size_t gw = image.width / p;
  const std::size_t c = image.channels;
  std::vector<double> out;
  out.reserve(image.pixels.size());
  for (std::size_t pr = 0; pr < gh; ++pr) {
    for (std::size_t pc = 0; pc < gw; ++pc) {
      for (std::size_t y = 0; y < p; ++y) {
        const double* row = image.pixels.data() + ((pr * p + y) * image.width + pc * p) * c;
        out.insert(out.end(), row, row + p * c);
      }
    }
  }
  return out;
}

Tensor patchify(const SceneImage& image, std::size_t patch_size) {
  auto values = patchify_values(image, patch_size);
  const std::size_t n = (image.height / patch_size) * (image.width / patch_size);
  return Tensor::from({n, patch_size * patch_size * image.channels}, std::move(values));
}

std::vector<double> unpatchify(std::span<const double> patches, std::size_t height, std::size_t width,
                               std::size_t channels, std::size_t p) {
  if (p == 0 || height % p != 0 || width % p != 0) throw DimensionError("unpatchify: indivisible dimensions");
  if (patches.size() != height * width * channels) throw DimensionError("unpatchify: wrong number of values");
  const std::size_t gw = width / p;
  std::vector<double> pixels(patches.size());
  std::size_t i = 0;
  for (std::size_t pr = 0; pr < height / p; ++pr) {
    for (std::size_t pc = 0; pc < gw; ++pc) {
      for (std::size_t y = 0; y < p; ++y) {
        double* row = pixels.data() + ((pr * p + y) * width + pc * p) * channels;
        std::copy_n(patches.data() + i, p * channels, row);
        i += p * channels;
      }
    }
  }
  return pixels;
}

std::vector<std::uint8_t> make_region_mask(const SceneImage& image, const Caption& caption, std::size_t p) {
  const std::size_t gh = image.height / p;
  const std::size_t gw = image.width / p;
  std::vector<std::uint8_t> mask(gh * gw, 0);
  std::vector<Box> boxes;
  for (std::size_t idx : caption.described_objects) {
    if (idx < image.objects.size()) boxes.push_back(image.objects[idx].box);
  }
  if (boxes.empty()) {
    std::fill(mask.begin(), mask.end(), 1);
    return mask;
  }
  for (std::size_t pr = 0; pr < gh; ++pr) {
    for (std::size_t pc = 0; pc < gw; ++pc) {
      const Box patch{pc * p, pr * p, pc * p + p, pr * p + p};
      for (const Box& b : boxes) {
        if (patch.intersects(b)) {
          mask[pr * gw + pc] = 1;
          break;
        }
      }
    }
  }
  return mask;
}

MlmCorruption mlm_corrupt(std::span<const std::size_t> token_ids, const Vocabulary& vocab, Rng& rng,
                          const MlmOptions& options) {
  MlmCorruption out;
  out.corrupted.assign(token_ids.begin(), token_ids.end());
  const auto& words = vocab.word_ids();
  for (std::size_t i = 0; i < token_ids.size(); ++i) {
    const std::size_t id = token_ids[i];
    if (id == Vocabulary::kPad || id == Vocabulary::kCls) continue;
    if (!rng.bernoulli(options.select_prob)) continue;
    out.positions.push_back(i);
    out.targets.push_back(id);
    const double u = rng.uniform();
    if (u < options.mask_prob) {
      out.corrupted[i] = Vocabulary::kMask;
    } else if (u < options.mask_prob + options.random_prob) {
      out.corrupted[i] = words[rng.below(words.size())];
    }
  }
  return out;
}

std::vector<CaptionClause> parse_caption(std::span<const std::size_t> token_ids, const Vocabulary& vocab) {
  std::vector<CaptionClause> clauses;
  CaptionClause::Relation pending = CaptionClause::Relation::kNone;
  std::size_t i = token_ids.empty() || token_ids[0] != Vocabulary::kCls ? 0 : 1;
  while (i < token_ids.size() && token_ids[i] != Vocabulary::kPad) {
    const std::string_view tok = vocab.token(token_ids[i]);
    if (tok == "left-of" || tok == "above") {
      pending = tok == "left-of" ? CaptionClause::Relation::kLeftOf : CaptionClause::Relation::kAbove;
      ++i;
      continue;
    }
    if (tok != "a") throw DataError("malformed caption at token '" + std::string(tok) + "'");
    if (i + 2 >= token_ids.size()) throw DataError("truncated caption");
    CaptionClause clause;
    const std::string_view color = vocab.token(token_ids[i + 1]);
    const std::string_view shape = vocab.token(token_ids[i + 2]);
    auto c = std::find(kColorNames.begin(), kColorNames.end(), color);
    auto s = std::find(kShapeNames.begin(), kShapeNames.end(), shape);
    if (c == kColorNames.end() || s == kShapeNames.end()) throw DataError("malformed caption clause");
    clause.color = static_cast<std::size_t>(c - kColorNames.begin());
    clause.kind = static_cast<ShapeKind>(s - kShapeNames.begin());
    clause.relation = clauses.empty() ? CaptionClause::Relation::kNone : pending;
    clauses.push_back(clause);
    pending = CaptionClause::Relation::kNone;
    i += 3;
  }
  return clauses;
}

bool caption_matches(std::span<const CaptionClause> clauses, std::span<const SceneObject> objects) {
  std::vector<std::size_t> assigned;
  std::vector<bool> used(objects.size(), false);
  // Depth-first search over injective assignments clause -> object.
  auto search = [&](auto&& self, std::size_t ci) -> bool {
    if (ci == clauses.size()) return true;
    const auto& cl = clauses[ci];
    for (std::size_t oi = 0; oi < objects.size(); ++oi) {
      if (used[oi]) continue;
      const auto& o = objects[oi];
      if (o.color != cl.color || o.kind != cl.kind) continue;
      if (ci > 0) {
        const auto& prev = objects[assigned.back()];
        if (cl.relation == CaptionClause::Relation::kLeftOf && !(prev.cell_col < o.cell_col)) continue;
        if (cl.relation == CaptionClause::Relation::kAbove && !(prev.cell_row < o.cell_row)) continue;
      }
      used[oi] = true;
      assigned.push_back(oi);
      if (self(self, ci + 1)) return true;
      assigned.pop_back();
      used[oi] = false;
    }
    return false;
  };
  return !clauses.empty() && search(search, 0);
}

std::string_view split_name(Split split) { return split == Split::kTrain ? "train" : "held-out"; }

Dataset Dataset::generate(const DataConfig& config, std::size_t patch_size, std::uint64_t seed,
                          const Vocabulary& vocab) {
  config.validate(patch_size);
  Dataset ds;
  ds.train.reserve(config.train_pairs);
  for (std::size_t i = 0; i < config.train_pairs; ++i) {
    const std::uint64_t s = accepted_seed(derive_seed(seed, 1, i), config, patch_size, vocab);
    ds.train.push_back(make_record(i, s, Split::kTrain, generate_pair(s, config, vocab)));
  }
  std::vector<std::vector<CaptionClause>> held_clauses;
  std::uint64_t attempt = 0;
  const std::uint64_t max_attempts = 1000 * (config.held_out_pairs + 1);
  while (ds.held_out.size() < config.held_out_pairs) {
    if (attempt >= max_attempts) {
      throw ConfigError("could not draw " + std::to_string(config.held_out_pairs) +
                        " mutually distinguishable held-out pairs");
    }
    const std::uint64_t s = accepted_seed(derive_seed(seed, 2, attempt++), config, patch_size, vocab);
    Pair pair = generate_pair(s, config, vocab);
    auto clauses = parse_caption(pair.caption.token_ids, vocab);
    bool unique = true;
    for (std::size_t j = 0; unique && j < ds.held_out.size(); ++j) {
      unique = !caption_matches(clauses, ds.held_out[j].objects) && !caption_matches(held_clauses[j], pair.image.objects);
    }
    if (!unique) continue;
    held_clauses.push_back(std::move(clauses));
    ds.held_out.push_back(make_record(config.train_pairs + ds.held_out.size(), s, Split::kHeldOut, std::move(pair)));
  }
  return ds;
}

SceneImage render(const PairRecord& record, const DataConfig& config, const Vocabulary& vocab) {
  Pair pair = generate_pair(record.seed, config, vocab);
  if (pair.image.objects != record.objects) {
    throw DataError("pair " + std::to_string(record.pair_id) + " does not regenerate from its seed under this config");
  }
  return std::move(pair.image);
}

Batch make_batch(std::span<const PairRecord* const> records, const DataConfig& config, std::size_t patch_size,
                 const Vocabulary& vocab) {
  if (records.empty()) throw DataError("empty batch");
  Batch batch;
  batch.size = records.size();
  batch.num_patches = (config.image_size / patch_size) * (config.image_size / patch_size);
  batch.patch_dim = patch_size * patch_size * config.channels;
  for (const PairRecord* r : records) batch.seq_len = std::max(batch.seq_len, r->caption.token_ids.size());
  std::vector<double> patches;
  patches.reserve(batch.size * batch.num_patches * batch.patch_dim);
  batch.token_ids.assign(batch.size * batch.seq_len, Vocabulary::kPad);
  batch.token_valid.assign(batch.size * batch.seq_len, 0);
  for (std::size_t b = 0; b < batch.size; ++b) {
    const PairRecord& r = *records[b];
    SceneImage image = render(r, config, vocab);
    auto values = patchify_values(image, patch_size);
    patches.insert(patches.end(), values.begin(), values.end());
    for (std::size_t t = 0; t < r.caption.token_ids.size(); ++t) {
      batch.token_ids[b * batch.seq_len + t] = r.caption.token_ids[t];
      batch.token_valid[b * batch.seq_len + t] = 1;
    }
    auto region = make_region_mask(image, r.caption, patch_size);
    batch.region_mask.insert(batch.region_mask.end(), region.begin(), region.end());
    batch.pair_ids.push_back(r.pair_id);
  }
  batch.patches = Tensor::from({batch.size, batch.num_patches, batch.patch_dim}, std::move(patches));
  return batch;
}

Batch make_batch(std::span<const PairRecord> records, const DataConfig& config, std::size_t patch_size,
                 const Vocabulary& vocab) {
  std::vector<const PairRecord*> ptrs;
  for (const auto& r : records) ptrs.push_back(&r);
  return make_batch(std::span<const PairRecord* const>(ptrs), config, patch_size, vocab);
}

}  // namespace vlmae::data
