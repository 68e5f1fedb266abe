// Copyright (c) 2026, The vlmae-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Held-out retrieval, [CLS] attention statistics and ablation runs.

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "vlmae/config.hpp"
#include "vlmae/data.hpp"
#include "vlmae/model.hpp"

namespace vlmae::eval {

struct RetrievalReport {
  std::string method;  // "itc" or "itc+itm"
  std::size_t gallery = 0;
  double t2i_r1 = 0, t2i_r5 = 0, t2i_r10 = 0;
  double i2t_r1 = 0, i2t_r5 = 0, i2t_r10 = 0;

  bool operator==(const RetrievalReport&) const = default;
};

// scores[i * n + j] scores image i against caption j; pair i is the ground
// truth for both. A query's rank counts every other candidate scoring at
// least as high as the true one, so ties never help.
RetrievalReport recalls_from_scores(std::span<const double> scores, std::size_t n, const std::string& method);

// Normalised projected [CLS] embeddings of full (unmasked) images and clean
// captions, [n, proj_dim] each, row-major.
struct Embeddings {
  std::size_t count = 0;
  std::size_t dim = 0;
  std::vector<double> image;
  std::vector<double> text;
};

Embeddings embed_pairs(const VlmaeModel& model, std::span<const data::PairRecord> records,
                       const data::DataConfig& data_config, const data::Vocabulary& vocab,
                       std::size_t chunk = 64);

// Cosine-similarity ranking; with rerank the top rerank_depth candidates of
// each query are reordered by ITM matched probability. DataError when pair ids
// repeat.
RetrievalReport retrieval_eval(const VlmaeModel& model, std::span<const data::PairRecord> records,
                               const data::DataConfig& data_config, const data::Vocabulary& vocab, bool rerank,
                               std::size_t rerank_depth = 8);

// Ground-truth scores: 1 where caption j's clauses are satisfiable in scene i.
std::vector<double> oracle_scores(std::span<const data::PairRecord> records, const data::Vocabulary& vocab);

struct AttentionStats {
  double threshold = 0.5;  // low-attention cutoff is threshold / N
  std::vector<std::vector<double>> profiles;
  std::vector<double> low_fraction;
  std::vector<double> entropy;
  double mean_low = 0, std_low = 0;
  double mean_entropy = 0, std_entropy = 0;

  bool operator==(const AttentionStats&) const = default;
};

AttentionStats attention_stats(std::vector<std::vector<double>> profiles, double threshold = 0.5);

AttentionStats focal_bias_stats(const VlmaeModel& model, std::span<const data::PairRecord> records,
                                const data::DataConfig& data_config, const data::Vocabulary& vocab,
                                double threshold = 0.5, std::size_t chunk = 64);

// Pooled histogram of every attention weight: 20 uniform bins over [0, 4/N],
// weights above 4/N counted in the last bin.
constexpr std::size_t kHistogramBins = 20;
std::vector<std::size_t> attention_histogram(const AttentionStats& stats);

// Comma-separated text with a header row. Attention files carry one row per
// image (weights space-separated); retrieval files one row per direction and
// k. Values are printed with round-trip precision. IoError on unwritable
// paths.
void emit_plot_data(const AttentionStats& stats, const std::string& path);
void emit_plot_data(const RetrievalReport& report, const std::string& path);
void emit_histogram(const AttentionStats& stats, const std::string& path);
AttentionStats read_attention_plot_data(const std::string& path);
RetrievalReport read_retrieval_plot_data(const std::string& path);

struct AblationResult {
  std::string objectives;
  RetrievalReport retrieval;
  RetrievalReport reranked;
  AttentionStats attention;
  double final_loss = 0.0;
};

// Trains config with the given objective subset, then evaluates retrieval on
// the held-out pairs and attention on attention_images held-out scenes.
AblationResult ablation_run(RunConfig config, const std::string& objectives, std::size_t attention_images = 256);

// attention_images held-out scenes for seed, drawn from the held-out stream.
std::vector<data::PairRecord> attention_set(const RunConfig& config, std::size_t count);

}  // namespace vlmae::eval
