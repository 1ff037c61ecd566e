#pragma once

// Subcommand implementations behind the domix binary. Each returns a process
// exit code and writes human-readable progress to `log`.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "domix/corpus.hpp"
#include "domix/model.hpp"
#include "domix/training.hpp"

namespace domix {

namespace fs = std::filesystem;

struct GenDataOptions {
  std::optional<fs::path> spec;  // JSON object of SyntheticTaskSpec fields
  fs::path out_dir = "data";
  std::optional<std::uint64_t> seed;
};
SyntheticTaskSpec load_synthetic_spec(const fs::path& path);
int cmd_gen_data(const GenDataOptions& options, std::ostream& log);

struct TrainOptions {
  fs::path config;
  std::optional<fs::path> resume;  // checkpoint to continue from
  std::optional<std::uint64_t> seed;
  std::optional<Precision> precision;
};
int cmd_train(const TrainOptions& options, std::ostream& log);

struct TranslateOptions {
  fs::path checkpoint;
  fs::path input;
  std::optional<fs::path> output;  // stdout when absent
  std::optional<fs::path> vocab;   // must match the checkpoint's vocabulary
  std::size_t beam = 5;
  bool greedy = false;
  std::size_t max_len = 0;
};
int cmd_translate(const TranslateOptions& options, std::ostream& log);

struct ScoreOptions {
  fs::path checkpoint;
  std::optional<fs::path> test;        // defaults to data.test of the stored config
  std::optional<fs::path> hypotheses;  // pre-computed outputs, one per line
  std::optional<fs::path> output;      // report file; stdout when absent
  std::size_t beam = 5;
  bool greedy = false;
};
int cmd_score(const ScoreOptions& options, std::ostream& log);

struct InspectOptions {
  fs::path checkpoint;
  fs::path input;  // TSV, or one source sentence per line
  fs::path output; // writes <output>.jsonl and <output>.hist.csv
};
int cmd_inspect(const InspectOptions& options, std::ostream& log);

struct GradcheckOptions {
  std::optional<fs::path> config;
  std::uint64_t seed = 1;
  std::string inject_fault;
  double fault_factor = 1.5;
};
int cmd_gradcheck(const GradcheckOptions& options, std::ostream& log);

// ---- shared helpers -------------------------------------------------------

std::vector<std::string> decode_tokens(const Vocab& vocab, std::span<const int> ids);

// {overall: {bleu, ppl, sentences, tokens}, per_domain: [{domain, ...}]}.
nlohmann::ordered_json score_report(const Model& model, const Vocab& vocab,
                                    std::span<const TextExample> references,
                                    std::span<const std::vector<std::string>> hypotheses);

// Source sentences from a TSV or plain one-sentence-per-line file.
std::vector<TextExample> read_sentences(const fs::path& path);

}  // namespace domix
