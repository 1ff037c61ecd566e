#include "domix/eval.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <tuple>

namespace domix {

namespace {

EncoderState tile(const EncoderState& enc, std::size_t copies) {
  if (enc.batch != 1) throw std::invalid_argument("tile: expected a single-sentence encoder state");
  if (copies == 1) return enc;
  const auto src = enc.states.data();
  std::vector<double> states;
  states.reserve(src.size() * copies);
  EncoderState out;
  out.batch = copies;
  out.length = enc.length;
  for (std::size_t c = 0; c < copies; ++c) {
    states.insert(states.end(), src.begin(), src.end());
    out.mask.insert(out.mask.end(), enc.mask.begin(), enc.mask.end());
  }
  out.states = ad::Tensor::from({copies * enc.length, enc.states.dim(1)}, std::move(states));
  return out;
}

bool emittable(int id) { return id != Vocab::kPad && id != Vocab::kBos; }

std::size_t generation_cap(const Model& model, std::size_t max_len) {
  if (max_len == 0) throw std::invalid_argument("decode: max_len must be positive");
  return std::min(max_len, model.config().max_len);
}

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts ngrams(std::span<const std::string> tokens, std::size_t n) {
  NgramCounts out;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++out[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                   tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return out;
}

// matches[n-1], totals[n-1] for n = 1..4.
void accumulate_ngrams(std::span<const std::string> hyp, std::span<const std::string> ref,
                       std::array<double, 4>& matches, std::array<double, 4>& totals) {
  for (std::size_t n = 1; n <= 4; ++n) {
    const NgramCounts h = ngrams(hyp, n);
    const NgramCounts r = ngrams(ref, n);
    for (const auto& [gram, count] : h) {
      const auto it = r.find(gram);
      if (it != r.end()) matches[n - 1] += static_cast<double>(std::min(count, it->second));
    }
    totals[n - 1] += hyp.size() >= n ? static_cast<double>(hyp.size() - n + 1) : 0.0;
  }
}

double brevity_penalty(double hyp_len, double ref_len) {
  if (hyp_len > ref_len) return 1.0;
  return std::exp(1.0 - ref_len / hyp_len);
}

}  // namespace

EncoderState encode_source(const Model& model, std::span<const int> src) {
  BitextExample ex;
  ex.src.assign(src.begin(), src.end());
  const std::vector<BitextExample> one{ex};
  const Batch batch = encode_batch(one, model.config().max_len).trimmed();
  ad::NoGradGuard no_grad;
  ForwardContext ctx;
  return model.encode(batch.src, 1, batch.src_len, batch.src_mask, ctx);
}

std::vector<std::vector<double>> next_token_log_probs(const Model& model, const EncoderState& enc,
                                                      std::span<const std::vector<int>> prefixes) {
  if (prefixes.empty()) return {};
  const std::size_t A = prefixes.size();
  const std::size_t t = prefixes.front().size();
  std::vector<int> ids;
  ids.reserve(A * t);
  for (const auto& p : prefixes) {
    if (p.size() != t) throw std::invalid_argument("next_token_log_probs: prefixes differ in length");
    ids.insert(ids.end(), p.begin(), p.end());
  }
  ad::NoGradGuard no_grad;
  ForwardContext ctx;
  const EncoderState tiled = tile(enc, A);
  const std::vector<std::uint8_t> mask(A * t, 1);
  const DecoderOutput dec = model.decode(ids, A, t, mask, tiled, ctx);
  const std::size_t V = dec.logits.dim(1);
  std::vector<double> last(A * V);
  const auto logits = dec.logits.data();
  for (std::size_t a = 0; a < A; ++a) {
    std::copy_n(logits.begin() + static_cast<std::ptrdiff_t>(((a + 1) * t - 1) * V), V,
                last.begin() + static_cast<std::ptrdiff_t>(a * V));
  }
  const ad::Tensor logp = ad::log_softmax(ad::Tensor::from({A, V}, std::move(last)));
  std::vector<std::vector<double>> out(A);
  const auto lp = logp.data();
  for (std::size_t a = 0; a < A; ++a) {
    out[a].assign(lp.begin() + static_cast<std::ptrdiff_t>(a * V),
                  lp.begin() + static_cast<std::ptrdiff_t>((a + 1) * V));
  }
  return out;
}

std::vector<int> greedy_decode(const Model& model, std::span<const int> src, std::size_t max_len) {
  const std::size_t cap = generation_cap(model, max_len);
  const EncoderState enc = encode_source(model, src);
  std::vector<int> prefix{Vocab::kBos};
  std::vector<int> out;
  while (out.size() < cap) {
    const std::vector<std::vector<int>> one{prefix};
    const auto lp = next_token_log_probs(model, enc, one).front();
    int best = -1;
    for (std::size_t v = 0; v < lp.size(); ++v) {
      if (!emittable(static_cast<int>(v))) continue;
      if (best < 0 || lp[v] > lp[static_cast<std::size_t>(best)]) best = static_cast<int>(v);
    }
    out.push_back(best);
    if (best == Vocab::kEos) break;
    prefix.push_back(best);
  }
  return out;
}

double length_normalized(double log_prob, std::size_t length, double alpha) {
  if (length == 0) return log_prob;
  return log_prob / std::pow(static_cast<double>(length), alpha);
}

Hypothesis beam_search(const Model& model, std::span<const int> src, std::size_t beam,
                       std::size_t max_len, double alpha) {
  if (beam == 0) throw std::invalid_argument("beam_search: beam must be positive");
  const std::size_t cap = generation_cap(model, max_len);
  const EncoderState enc = encode_source(model, src);

  std::vector<Hypothesis> alive{Hypothesis{}};
  std::vector<Hypothesis> finished;
  struct Candidate {
    double log_prob;
    std::size_t parent;
    int token;
  };

  for (std::size_t step = 0; step < cap && !alive.empty(); ++step) {
    std::vector<std::vector<int>> prefixes;
    prefixes.reserve(alive.size());
    for (const auto& h : alive) {
      std::vector<int> p{Vocab::kBos};
      p.insert(p.end(), h.tokens.begin(), h.tokens.end());
      prefixes.push_back(std::move(p));
    }
    const auto lp = next_token_log_probs(model, enc, prefixes);
    std::vector<Candidate> cands;
    for (std::size_t a = 0; a < alive.size(); ++a) {
      for (std::size_t v = 0; v < lp[a].size(); ++v) {
        if (emittable(static_cast<int>(v))) cands.push_back({alive[a].log_prob + lp[a][v], a, static_cast<int>(v)});
      }
    }
    std::sort(cands.begin(), cands.end(), [](const Candidate& x, const Candidate& y) {
      if (x.log_prob != y.log_prob) return x.log_prob > y.log_prob;
      return std::tie(x.parent, x.token) < std::tie(y.parent, y.token);
    });

    std::vector<Hypothesis> next;
    for (std::size_t r = 0; r < cands.size() && (next.size() < beam || r < beam); ++r) {
      const Candidate& c = cands[r];
      Hypothesis h;
      h.tokens = alive[c.parent].tokens;
      h.tokens.push_back(c.token);
      h.log_prob = c.log_prob;
      if (c.token == Vocab::kEos) {
        if (r < beam) {
          h.finished = true;
          h.score = length_normalized(h.log_prob, h.tokens.size(), alpha);
          finished.push_back(std::move(h));
        }
      } else if (next.size() < beam) {
        next.push_back(std::move(h));
      }
    }
    alive = std::move(next);
    if (finished.size() >= beam) break;
  }

  if (!finished.empty()) {
    const auto best = std::max_element(finished.begin(), finished.end(),
                                       [](const Hypothesis& a, const Hypothesis& b) { return a.score < b.score; });
    return *best;
  }
  Hypothesis h = alive.front();
  h.score = length_normalized(h.log_prob, h.tokens.size(), alpha);
  return h;
}

std::vector<int> strip_eos(std::span<const int> ids) {
  std::vector<int> out(ids.begin(), ids.end());
  if (!out.empty() && out.back() == Vocab::kEos) out.pop_back();
  return out;
}

double corpus_bleu(std::span<const std::vector<std::string>> hypotheses,
                   std::span<const std::vector<std::string>> references) {
  if (hypotheses.size() != references.size()) {
    throw std::invalid_argument("corpus_bleu: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                                std::to_string(references.size()) + " references");
  }
  if (hypotheses.empty()) throw std::invalid_argument("corpus_bleu: empty corpus");
  std::array<double, 4> matches{}, totals{};
  double hyp_len = 0.0, ref_len = 0.0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    accumulate_ngrams(hypotheses[i], references[i], matches, totals);
    hyp_len += static_cast<double>(hypotheses[i].size());
    ref_len += static_cast<double>(references[i].size());
  }
  if (hyp_len == 0.0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (matches[n] == 0.0 || totals[n] == 0.0) return 0.0;
    log_sum += std::log(matches[n] / totals[n]);
  }
  return 100.0 * brevity_penalty(hyp_len, ref_len) * std::exp(log_sum / 4.0);
}

double sentence_bleu(std::span<const std::string> hypothesis, std::span<const std::string> reference) {
  if (hypothesis.empty()) return 0.0;
  std::array<double, 4> matches{}, totals{};
  accumulate_ngrams(hypothesis, reference, matches, totals);
  if (matches[0] == 0.0) return 0.0;
  double log_sum = std::log(matches[0] / totals[0]);
  for (std::size_t n = 1; n < 4; ++n) log_sum += std::log((matches[n] + 1.0) / (totals[n] + 1.0));
  return 100.0 * brevity_penalty(static_cast<double>(hypothesis.size()), static_cast<double>(reference.size())) *
         std::exp(log_sum / 4.0);
}

double NllStats::perplexity() const {
  if (tokens == 0) throw std::invalid_argument("perplexity: no target tokens");
  return std::exp(mean());
}

NllStats evaluate_nll(const Model& model, std::span<const BitextExample> data, std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("evaluate_nll: batch_size must be positive");
  NllStats stats;
  ad::NoGradGuard no_grad;
  for (std::size_t lo = 0; lo < data.size(); lo += batch_size) {
    const auto chunk = data.subspan(lo, std::min(batch_size, data.size() - lo));
    const Batch batch = encode_batch(chunk, model.config().max_len).trimmed();
    ForwardContext ctx;
    const ModelOutput out = model.forward(batch, ctx);
    const ad::Tensor logp = ad::log_softmax(out.decoder.logits);
    const ad::Tensor picked_t = ad::pick(logp, out.labels);
    const auto picked = picked_t.data();
    for (std::size_t r = 0; r < picked.size(); ++r) {
      if (!out.label_mask[r]) continue;
      stats.nll_sum -= picked[r];
      ++stats.tokens;
    }
  }
  return stats;
}

ProportionTrace trace_proportions(const Model& model, const BitextExample& example, std::size_t id) {
  const std::vector<BitextExample> one{example};
  const Batch batch = encode_batch(one, model.config().max_len).trimmed();
  std::vector<ProportionRecord> records;
  ForwardContext ctx;
  ctx.records = &records;
  ad::NoGradGuard no_grad;
  model.forward(batch, ctx);

  ProportionTrace trace;
  trace.id = id;
  trace.domain = example.domain;
  for (std::size_t t = 0; t < batch.src_len; ++t) {
    if (batch.src_mask[t]) trace.source.push_back(batch.src[t]);
  }
  for (std::size_t t = 0; t + 1 < batch.tgt_len; ++t) {
    if (batch.tgt_mask[t]) trace.target.push_back(batch.tgt[t]);
  }
  for (const auto& rec : records) {
    TraceRecord tr{rec.stack, rec.layer, rec.sublayer, {}};
    const std::size_t k = rec.proportions.dim(1);
    const auto p = rec.proportions.data();
    for (std::size_t r = 0; r < rec.length; ++r) {
      if (!rec.mask[r]) continue;
      tr.proportions.emplace_back(p.begin() + static_cast<std::ptrdiff_t>(r * k),
                                  p.begin() + static_cast<std::ptrdiff_t>((r + 1) * k));
    }
    trace.records.push_back(std::move(tr));
  }
  return trace;
}

std::vector<HistogramBin> proportion_histogram(std::span<const ProportionTrace> traces,
                                               std::size_t domains, std::size_t bins) {
  if (domains == 0 || bins == 0) throw std::invalid_argument("proportion_histogram: domains and bins must be positive");
  const double lo = 1.0 / static_cast<double>(domains);
  const double width = (1.0 - lo) / static_cast<double>(bins);
  std::map<std::pair<std::string, int>, std::vector<std::size_t>> counts;
  for (const auto& trace : traces) {
    for (const auto& rec : trace.records) {
      auto& c = counts[{rec.stack, rec.layer}];
      c.resize(bins, 0);
      for (const auto& row : rec.proportions) {
        const double m = *std::max_element(row.begin(), row.end());
        std::size_t b = width > 0.0 ? static_cast<std::size_t>(std::max(0.0, (m - lo) / width)) : 0;
        ++c[std::min(b, bins - 1)];
      }
    }
  }
  std::vector<HistogramBin> out;
  // "encoder" sorts before "decoder" in output.
  for (const char* stack : {"encoder", "decoder"}) {
    for (const auto& [key, c] : counts) {
      if (key.first != stack) continue;
      for (std::size_t b = 0; b < bins; ++b) {
        out.push_back({key.first, key.second, b, lo + width * static_cast<double>(b),
                       lo + width * static_cast<double>(b + 1), c[b]});
      }
    }
  }
  return out;
}

}  // namespace domix
