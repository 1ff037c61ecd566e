#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "domix/corpus.hpp"
#include "domix/model.hpp"

namespace domix {

struct Hypothesis {
  std::vector<int> tokens;  // generated ids, BOS excluded, EOS included when finished
  double log_prob = 0.0;
  double score = 0.0;       // log_prob / len^alpha for finished hypotheses
  bool finished = false;
};

// Log-probabilities of the next token after each prefix (each starting with
// BOS), all decoded against the same single-sentence encoder state.
std::vector<std::vector<double>> next_token_log_probs(const Model& model, const EncoderState& enc,
                                                      std::span<const std::vector<int>> prefixes);

// Encodes one source sentence (ids without EOS) in inference mode.
EncoderState encode_source(const Model& model, std::span<const int> src);

// Argmax decoding; PAD and BOS are never emitted and ties go to the lower
// id. Stops after EOS or `max_len` generated tokens (capped by model.max_len).
std::vector<int> greedy_decode(const Model& model, std::span<const int> src, std::size_t max_len);

double length_normalized(double log_prob, std::size_t length, double alpha);

// Beam search over cumulative log-probability. Finished hypotheses are
// ranked by length_normalized(); with beam == 1 the result equals
// greedy_decode.
Hypothesis beam_search(const Model& model, std::span<const int> src, std::size_t beam,
                       std::size_t max_len, double alpha = 1.0);

// Drops the trailing EOS, if any.
std::vector<int> strip_eos(std::span<const int> ids);

// Corpus BLEU-4 on a 0..100 scale with clipped n-gram counts, uniform
// weights and the brevity penalty; no smoothing.
double corpus_bleu(std::span<const std::vector<std::string>> hypotheses,
                   std::span<const std::vector<std::string>> references);
// Add-one smoothed (for n > 1) sentence BLEU, for per-sentence diagnostics.
double sentence_bleu(std::span<const std::string> hypothesis, std::span<const std::string> reference);

struct NllStats {
  double nll_sum = 0.0;
  std::size_t tokens = 0;
  double mean() const { return tokens ? nll_sum / static_cast<double>(tokens) : 0.0; }
  double perplexity() const;
};

// Teacher-forced negative log-likelihood over every non-pad target token.
NllStats evaluate_nll(const Model& model, std::span<const BitextExample> data, std::size_t batch_size = 32);

// ---- proportion traces --------------------------------------------------

struct TraceRecord {
  std::string stack;
  int layer = 0;
  std::string sublayer;
  std::vector<std::vector<double>> proportions;  // one row per token of its side
};

struct ProportionTrace {
  std::size_t id = 0;
  int domain = 0;
  std::vector<int> source;  // encoder input ids, EOS included
  std::vector<int> target;  // decoder input ids, BOS first
  std::vector<TraceRecord> records;
};

ProportionTrace trace_proportions(const Model& model, const BitextExample& example, std::size_t id);

struct HistogramBin {
  std::string stack;
  int layer = 0;
  std::size_t bin = 0;
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
};

// Histogram of max_j p_j over every token of every proportion layer, per
// (stack, layer), with `bins` equal bins spanning [1/k, 1].
std::vector<HistogramBin> proportion_histogram(std::span<const ProportionTrace> traces,
                                               std::size_t domains, std::size_t bins = 20);

}  // namespace domix
