// Copyright (c) 2026, The vlmae-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlmae/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "vlmae/errors.hpp"
#include "vlmae/ops.hpp"
#include "vlmae/trainer.hpp"

namespace vlmae::eval {

namespace {

// 1-based rank of candidate `truth` among scores; ties count against it.
std::size_t rank_of(const std::vector<double>& scores, std::size_t truth) {
  std::size_t rank = 1;
  for (std::size_t c = 0; c < scores.size(); ++c) {
    if (c != truth && scores[c] >= scores[truth]) ++rank;
  }
  return rank;
}

struct Recall {
  double r1 = 0, r5 = 0, r10 = 0;
};

// queries[q] holds the candidate scores for query q; its truth is index q.
Recall recall(const std::vector<std::vector<double>>& queries) {
  Recall r;
  if (queries.empty()) return r;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const std::size_t k = rank_of(queries[q], q);
    r.r1 += k <= 1;
    r.r5 += k <= 5;
    r.r10 += k <= 10;
  }
  const double n = static_cast<double>(queries.size());
  r.r1 /= n;
  r.r5 /= n;
  r.r10 /= n;
  return r;
}

std::vector<std::vector<double>> t2i_queries(std::span<const double> scores, std::size_t n) {
  std::vector<std::vector<double>> q(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) q[j][i] = scores[i * n + j];
  }
  return q;
}

std::vector<std::vector<double>> i2t_queries(std::span<const double> scores, std::size_t n) {
  std::vector<std::vector<double>> q(n);
  for (std::size_t i = 0; i < n; ++i) q[i].assign(scores.begin() + i * n, scores.begin() + (i + 1) * n);
  return q;
}

RetrievalReport make_report(const std::string& method, std::size_t n, const Recall& t2i, const Recall& i2t) {
  RetrievalReport r;
  r.method = method;
  r.gallery = n;
  r.t2i_r1 = t2i.r1;
  r.t2i_r5 = t2i.r5;
  r.t2i_r10 = t2i.r10;
  r.i2t_r1 = i2t.r1;
  r.i2t_r5 = i2t.r5;
  r.i2t_r10 = i2t.r10;
  return r;
}

Tensor first_tokens(const Tensor& seq) {
  const std::size_t b = seq.dim(0), s = seq.dim(1), d = seq.dim(2);
  std::vector<std::size_t> idx(b);
  for (std::size_t i = 0; i < b; ++i) idx[i] = i * s;
  return take_rows(reshape(seq, {b * s, d}), idx);
}

// Full-image and text sequences of the online encoders for every record.
struct Encoded {
  std::vector<Tensor> image_chunks;  // [chunk, 1 + N, d]
  std::size_t chunk = 0;
  Tensor text;                       // [n, L, d]
  std::vector<std::uint8_t> text_valid;
  std::size_t seq_len = 0;
};

Encoded encode_all(const VlmaeModel& model, std::span<const data::PairRecord> records, const data::DataConfig& dc,
                   const data::Vocabulary& vocab, std::size_t chunk) {
  NoGradGuard no_grad;
  Encoded e;
  e.chunk = chunk;
  const data::Batch all = data::make_batch(records, dc, model.config().patch_size, vocab);
  e.seq_len = all.seq_len;
  e.text_valid = all.token_valid;
  e.text = model.text(all.token_ids, all.token_valid, all.size, all.seq_len);
  for (std::size_t lo = 0; lo < records.size(); lo += chunk) {
    const std::size_t hi = std::min(records.size(), lo + chunk);
    std::vector<std::size_t> rows(hi - lo);
    std::iota(rows.begin(), rows.end(), lo);
    e.image_chunks.push_back(model.image(take_rows(all.patches, rows), nullptr));
  }
  return e;
}

Embeddings project(const VlmaeModel& model, const Encoded& enc) {
  NoGradGuard no_grad;
  Embeddings e;
  e.count = enc.text.dim(0);
  e.dim = model.config().proj_dim;
  for (const auto& img : enc.image_chunks) {
    const Tensor p = l2_normalize(model.proj_image(first_tokens(img)));
    e.image.insert(e.image.end(), p.data().begin(), p.data().end());
  }
  e.text = l2_normalize(model.proj_text(first_tokens(enc.text))).values();
  return e;
}

void check_unique_ids(std::span<const data::PairRecord> records) {
  std::set<std::size_t> seen;
  for (const auto& r : records) {
    if (!seen.insert(r.pair_id).second) {
      throw DataError("pair id " + std::to_string(r.pair_id) + " appears more than once in the retrieval set");
    }
  }
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw DataError("not a number: '" + s + "'");
  return v;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::stringstream in(line);
  std::string item;
  while (std::getline(in, item, sep)) out.push_back(item);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  return out;
}

}  // namespace

RetrievalReport recalls_from_scores(std::span<const double> scores, std::size_t n, const std::string& method) {
  if (scores.size() != n * n) throw DimensionError("score matrix must be n x n");
  return make_report(method, n, recall(t2i_queries(scores, n)), recall(i2t_queries(scores, n)));
}

Embeddings embed_pairs(const VlmaeModel& model, std::span<const data::PairRecord> records,
                       const data::DataConfig& dc, const data::Vocabulary& vocab, std::size_t chunk) {
  return project(model, encode_all(model, records, dc, vocab, chunk));
}

RetrievalReport retrieval_eval(const VlmaeModel& model, std::span<const data::PairRecord> records,
                               const data::DataConfig& dc, const data::Vocabulary& vocab, bool rerank,
                               std::size_t rerank_depth) {
  check_unique_ids(records);
  const std::size_t n = records.size();
  if (n == 0) throw DataError("empty retrieval set");
  NoGradGuard no_grad;
  const std::size_t chunk = 64;
  const Encoded enc = encode_all(model, records, dc, vocab, chunk);

  const Embeddings emb = project(model, enc);
  const std::size_t dim = emb.dim;
  std::vector<double> scores(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < dim; ++k) s += emb.image[i * dim + k] * emb.text[j * dim + k];
      scores[i * n + j] = s;
    }
  }
  auto t2i = t2i_queries(scores, n);
  auto i2t = i2t_queries(scores, n);
  if (!rerank) return make_report("itc", n, recall(t2i), recall(i2t));

  // Top candidates per query by similarity, then ITM matched probability.
  const std::size_t depth = std::min(rerank_depth, n);
  auto top = [&](const std::vector<double>& s) {
    std::vector<std::size_t> idx(s.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
    idx.resize(depth);
    return idx;
  };
  std::map<std::pair<std::size_t, std::size_t>, double> match;  // (image, caption) -> p(matched)
  std::vector<std::vector<std::size_t>> t2i_top(n), i2t_top(n);
  for (std::size_t q = 0; q < n; ++q) {
    t2i_top[q] = top(t2i[q]);
    for (std::size_t i : t2i_top[q]) match[{i, q}] = 0.0;
    i2t_top[q] = top(i2t[q]);
    for (std::size_t j : i2t_top[q]) match[{q, j}] = 0.0;
  }
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (const auto& [key, v] : match) pairs.push_back(key);
  const std::size_t len = enc.seq_len;
  const std::size_t d = model.config().d_model;
  for (std::size_t lo = 0; lo < pairs.size(); lo += chunk) {
    const std::size_t hi = std::min(pairs.size(), lo + chunk);
    std::vector<std::size_t> text_rows;
    std::vector<std::uint8_t> valid;
    std::vector<Tensor> images;
    for (std::size_t p = lo; p < hi; ++p) {
      const auto [i, j] = pairs[p];
      text_rows.push_back(j);
      valid.insert(valid.end(), enc.text_valid.begin() + j * len, enc.text_valid.begin() + (j + 1) * len);
      const std::size_t c = i / chunk;
      const std::size_t row = i % chunk;
      images.push_back(take_rows(enc.image_chunks[c], std::vector<std::size_t>{row}));
    }
    const Tensor fused = model.fusion(take_rows(enc.text, text_rows), valid, concat(images, 0));
    std::vector<std::size_t> cls(hi - lo);
    for (std::size_t r = 0; r < cls.size(); ++r) cls[r] = r * len;
    const Tensor prob = softmax(model.itm_head(take_rows(reshape(fused, {(hi - lo) * len, d}), cls)), 1);
    for (std::size_t r = 0; r < cls.size(); ++r) match[pairs[lo + r]] = prob[2 * r + 1];
  }
  for (std::size_t q = 0; q < n; ++q) {
    for (std::size_t i : t2i_top[q]) t2i[q][i] = 2.0 + match[{i, q}];
    for (std::size_t j : i2t_top[q]) i2t[q][j] = 2.0 + match[{q, j}];
  }
  return make_report("itc+itm", n, recall(t2i), recall(i2t));
}

std::vector<double> oracle_scores(std::span<const data::PairRecord> records, const data::Vocabulary& vocab) {
  const std::size_t n = records.size();
  std::vector<double> scores(n * n);
  for (std::size_t j = 0; j < n; ++j) {
    const auto clauses = data::parse_caption(records[j].caption.token_ids, vocab);
    for (std::size_t i = 0; i < n; ++i) scores[i * n + j] = data::caption_matches(clauses, records[i].objects) ? 1.0 : 0.0;
  }
  return scores;
}

AttentionStats attention_stats(std::vector<std::vector<double>> profiles, double threshold) {
  AttentionStats s;
  s.threshold = threshold;
  s.profiles = std::move(profiles);
  for (const auto& w : s.profiles) {
    const double cut = threshold / static_cast<double>(w.size());
    std::size_t low = 0;
    double h = 0.0;
    for (double v : w) {
      low += v < cut;
      if (v > 0.0) h -= v * std::log(v);
    }
    s.low_fraction.push_back(static_cast<double>(low) / static_cast<double>(w.size()));
    s.entropy.push_back(h);
  }
  auto moments = [](const std::vector<double>& v, double& mean, double& sd) {
    mean = sd = 0.0;
    if (v.empty()) return;
    mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double acc = 0.0;
    for (double x : v) acc += (x - mean) * (x - mean);
    sd = std::sqrt(acc / static_cast<double>(v.size()));
  };
  moments(s.low_fraction, s.mean_low, s.std_low);
  moments(s.entropy, s.mean_entropy, s.std_entropy);
  return s;
}

AttentionStats focal_bias_stats(const VlmaeModel& model, std::span<const data::PairRecord> records,
                                const data::DataConfig& dc, const data::Vocabulary& vocab, double threshold,
                                std::size_t chunk) {
  std::vector<std::vector<double>> profiles;
  for (std::size_t lo = 0; lo < records.size(); lo += chunk) {
    const auto part = records.subspan(lo, std::min(chunk, records.size() - lo));
    const data::Batch b = data::make_batch(part, dc, model.config().patch_size, vocab);
    for (auto& p : cls_attention_profile(model, b.patches)) profiles.push_back(std::move(p));
  }
  return attention_stats(std::move(profiles), threshold);
}

std::vector<std::size_t> attention_histogram(const AttentionStats& stats) {
  std::vector<std::size_t> bins(kHistogramBins, 0);
  for (const auto& w : stats.profiles) {
    const double width = 4.0 / static_cast<double>(w.size()) / static_cast<double>(kHistogramBins);
    for (double v : w) {
      const auto b = static_cast<std::size_t>(std::max(0.0, v) / width);
      ++bins[std::min(b, kHistogramBins - 1)];
    }
  }
  return bins;
}

void emit_plot_data(const AttentionStats& stats, const std::string& path) {
  std::ofstream out = open_out(path);
  out << "image,threshold,low_fraction,entropy,weights\n";
  for (std::size_t i = 0; i < stats.profiles.size(); ++i) {
    out << i << ',' << fmt(stats.threshold) << ',' << fmt(stats.low_fraction[i]) << ',' << fmt(stats.entropy[i]) << ',';
    for (std::size_t k = 0; k < stats.profiles[i].size(); ++k) out << (k ? " " : "") << fmt(stats.profiles[i][k]);
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + path);
}

void emit_plot_data(const RetrievalReport& report, const std::string& path) {
  std::ofstream out = open_out(path);
  out << "method,gallery,direction,k,recall\n";
  if (report.gallery > 0) {
    const std::pair<const char*, std::array<double, 3>> rows[] = {
        {"t2i", {report.t2i_r1, report.t2i_r5, report.t2i_r10}}, {"i2t", {report.i2t_r1, report.i2t_r5, report.i2t_r10}}};
    const std::size_t ks[] = {1, 5, 10};
    for (const auto& [dir, vals] : rows) {
      for (std::size_t k = 0; k < 3; ++k) {
        out << report.method << ',' << report.gallery << ',' << dir << ',' << ks[k] << ',' << fmt(vals[k]) << '\n';
      }
    }
  }
  if (!out) throw IoError("failed writing " + path);
}

void emit_histogram(const AttentionStats& stats, const std::string& path) {
  std::ofstream out = open_out(path);
  out << "bin_lo,bin_hi,count\n";
  if (!stats.profiles.empty()) {
    const double width = 4.0 / static_cast<double>(stats.profiles.front().size()) / kHistogramBins;
    const auto bins = attention_histogram(stats);
    for (std::size_t b = 0; b < bins.size(); ++b) {
      out << fmt(width * static_cast<double>(b)) << ',' << fmt(width * static_cast<double>(b + 1)) << ',' << bins[b]
          << '\n';
    }
  }
  if (!out) throw IoError("failed writing " + path);
}

AttentionStats read_attention_plot_data(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  std::string line;
  if (!std::getline(in, line) || line != "image,threshold,low_fraction,entropy,weights") {
    throw DataError(path + ": not an attention data file");
  }
  double threshold = 0.5;
  std::vector<std::vector<double>> profiles;
  std::vector<double> low, entropy;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cols = split(line, ',');
    if (cols.size() != 5) throw DataError(path + ": malformed row");
    threshold = parse_double(cols[1]);
    low.push_back(parse_double(cols[2]));
    entropy.push_back(parse_double(cols[3]));
    std::vector<double> w;
    for (const auto& tok : split(cols[4], ' ')) w.push_back(parse_double(tok));
    profiles.push_back(std::move(w));
  }
  AttentionStats s = attention_stats(std::move(profiles), threshold);
  if (s.low_fraction != low || s.entropy != entropy) throw DataError(path + ": stored statistics disagree with weights");
  return s;
}

RetrievalReport read_retrieval_plot_data(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  std::string line;
  if (!std::getline(in, line) || line != "method,gallery,direction,k,recall") {
    throw DataError(path + ": not a retrieval data file");
  }
  RetrievalReport r;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cols = split(line, ',');
    if (cols.size() != 5) throw DataError(path + ": malformed row");
    r.method = cols[0];
    r.gallery = static_cast<std::size_t>(std::stoull(cols[1]));
    const double v = parse_double(cols[4]);
    const bool t2i = cols[2] == "t2i";
    if (!t2i && cols[2] != "i2t") throw DataError(path + ": unknown direction " + cols[2]);
    const std::string& k = cols[3];
    double* slot = k == "1" ? (t2i ? &r.t2i_r1 : &r.i2t_r1)
                 : k == "5" ? (t2i ? &r.t2i_r5 : &r.i2t_r5)
                 : k == "10" ? (t2i ? &r.t2i_r10 : &r.i2t_r10)
                             : nullptr;
    if (!slot) throw DataError(path + ": unknown k " + k);
    *slot = v;
  }
  return r;
}

std::vector<data::PairRecord> attention_set(const RunConfig& config, std::size_t count) {
  data::DataConfig dc = config.data;
  dc.held_out_pairs = count;
  return data::Dataset::generate(dc, config.model.patch_size, config.train.seed, data::Vocabulary()).held_out;
}

AblationResult ablation_run(RunConfig config, const std::string& objectives, std::size_t attention_images) {
  config.train.objectives = objectives;
  Trainer trainer(config);
  double last = 0.0;
  trainer.run(static_cast<std::size_t>(-1), [&](const MetricsRecord& r) { last = r.total; });
  AblationResult res;
  res.objectives = losses::Objectives::parse(objectives).to_string();
  res.final_loss = last;
  const auto& held = trainer.dataset().held_out;
  res.retrieval = retrieval_eval(trainer.model(), held, config.data, trainer.vocab(), false);
  res.reranked = retrieval_eval(trainer.model(), held, config.data, trainer.vocab(), true);
  const auto images = attention_set(config, attention_images);
  res.attention = focal_bias_stats(trainer.model(), images, config.data, trainer.vocab());
  return res;
}

}  // namespace vlmae::eval
