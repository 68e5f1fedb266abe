// Copyright (c) 2026, The vlmae-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <fstream>
#include <json.hpp>

#include "vlmae/data.hpp"
#include "vlmae/errors.hpp"

namespace vlmae::data {

namespace {

using nlohmann::json;

json to_json(const PairRecord& r) {
  json objects = json::array();
  for (const auto& o : r.objects) {
    objects.push_back({{"shape", kShapeNames[static_cast<std::size_t>(o.kind)]},
                       {"color", kColorNames[o.color]},
                       {"cell", {o.cell_row, o.cell_col}},
                       {"box", {o.box.x0, o.box.y0, o.box.x1, o.box.y1}}});
  }
  return {{"pair_id", r.pair_id},
          {"seed", r.seed},
          {"split", split_name(r.split)},
          {"objects", std::move(objects)},
          {"caption", r.caption.token_ids},
          {"described", r.caption.described_objects}};
}

template <std::size_t N>
std::size_t index_of(const std::array<std::string_view, N>& names, const std::string& value) {
  for (std::size_t i = 0; i < N; ++i) {
    if (names[i] == value) return i;
  }
  throw DataError("manifest: unknown name '" + value + "'");
}

PairRecord from_json(const json& j) {
  PairRecord r;
  r.pair_id = j.at("pair_id").get<std::size_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  const auto split = j.at("split").get<std::string>();
  if (split == "train") {
    r.split = Split::kTrain;
  } else if (split == "held-out") {
    r.split = Split::kHeldOut;
  } else {
    throw DataError("manifest: unknown split '" + split + "'");
  }
  for (const auto& o : j.at("objects")) {
    SceneObject obj;
    obj.kind = static_cast<ShapeKind>(index_of(kShapeNames, o.at("shape").get<std::string>()));
    obj.color = index_of(kColorNames, o.at("color").get<std::string>());
    obj.cell_row = o.at("cell").at(0).get<std::size_t>();
    obj.cell_col = o.at("cell").at(1).get<std::size_t>();
    const auto& b = o.at("box");
    obj.box = Box{b.at(0).get<std::size_t>(), b.at(1).get<std::size_t>(), b.at(2).get<std::size_t>(),
                  b.at(3).get<std::size_t>()};
    r.objects.push_back(obj);
  }
  r.caption.token_ids = j.at("caption").get<std::vector<std::size_t>>();
  r.caption.described_objects = j.at("described").get<std::vector<std::size_t>>();
  return r;
}

}  // namespace

void write_manifest(const std::string& path, const Dataset& dataset, const Vocabulary& vocab) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open manifest for writing: " + path);
  for (const auto* part : {&dataset.train, &dataset.held_out}) {
    for (const auto& r : *part) {
      json j = to_json(r);
      std::string text;
      for (std::size_t id : r.caption.token_ids) {
        if (!text.empty()) text += ' ';
        text += vocab.token(id);
      }
      j["text"] = text;
      out << j.dump() << '\n';
    }
  }
  if (!out) throw IoError("failed writing manifest: " + path);
}

Dataset read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path);
  Dataset ds;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      PairRecord r = from_json(json::parse(line));
      (r.split == Split::kTrain ? ds.train : ds.held_out).push_back(std::move(r));
    } catch (const json::exception& e) {
      throw DataError("manifest line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return ds;
}

}  // namespace vlmae::data
