#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace domix {

// Token <-> id table. Ids 0..3 are reserved; everything else is assigned in
// insertion order starting at 4.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kNumReserved = 4;

  Vocab();

  // Returns the existing id if the token is already present.
  int add(const std::string& token);
  int id(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::string& token(int id) const;
  std::size_t size() const { return tokens_.size(); }

  std::vector<int> encode(std::span<const std::string> tokens) const;
  std::vector<std::string> decode(std::span<const int> ids) const;

  // FNV-1a over the token list; used to detect incompatible vocabularies.
  std::uint64_t hash() const;
  std::vector<std::string> non_reserved() const;

  // One token per line; line i holds id i + kNumReserved.
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);
  static Vocab from_tokens(std::span<const std::string> non_reserved);

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// Sentence pair at the token-string level, as read from a TSV corpus.
struct TextExample {
  int domain = 0;
  std::vector<std::string> src;
  std::vector<std::string> tgt;

  bool operator==(const TextExample&) const = default;
};

struct BitextExample {
  std::vector<int> src;
  std::vector<int> tgt;
  int domain = 0;
};

// Row-major [batch, length] id grids. Masks are 1 on real tokens.
struct Batch {
  std::size_t size = 0;
  std::size_t src_len = 0;
  std::size_t tgt_len = 0;
  std::vector<int> src;
  std::vector<int> tgt;
  std::vector<std::uint8_t> src_mask;
  std::vector<std::uint8_t> tgt_mask;
  std::vector<int> domains;

  // Drops trailing columns that are padding in every row.
  Batch trimmed() const;
};

std::vector<std::string> tokenize(std::string_view text);
std::string detokenize(std::span<const std::string> tokens);

// Frequency-descending ids, ties broken lexicographically. Throws on an
// empty corpus or min_freq < 1.
Vocab build_vocab(std::span<const std::string> sentences, int min_freq = 1);
Vocab build_vocab(std::span<const TextExample> corpus, int min_freq = 1);

BitextExample encode_example(const TextExample& example, const Vocab& vocab);

// Source gets a trailing EOS, target is wrapped as BOS ... EOS. Both are
// truncated to max_len (keeping the EOS) and padded to max_len.
Batch encode_batch(std::span<const TextExample> examples, const Vocab& vocab, std::size_t max_len);
Batch encode_batch(std::span<const BitextExample> examples, std::size_t max_len);

// domain<TAB>source<TAB>target per line.
std::vector<TextExample> read_tsv(const std::filesystem::path& path);
void write_tsv(const std::filesystem::path& path, std::span<const TextExample> examples);

// ---- synthetic multi-domain task ------------------------------------------

struct SyntheticTaskSpec {
  int domains = 2;
  int shared_words = 8;
  int exclusive_words = 24;  // per domain
  int ambiguous_words = 8;
  double marker_prob = 1.0;
  int min_len = 4;
  int max_len = 10;
  int train_size = 2000;
  int valid_size = 200;
  int test_size = 200;
  std::uint64_t seed = 1;

  void validate() const;
};

struct SyntheticCorpus {
  std::vector<TextExample> train;
  std::vector<TextExample> valid;
  std::vector<TextExample> test;
};

SyntheticCorpus generate_synthetic(const SyntheticTaskSpec& spec);

enum class WordClass { shared, exclusive, ambiguous, other };

struct SyntheticWord {
  WordClass cls = WordClass::other;
  int domain = -1;  // owning domain for exclusive words
};

// Classifies a synthetic source token by its naming scheme.
SyntheticWord classify_synthetic(std::string_view token);
std::string synthetic_shared(int i);
std::string synthetic_exclusive(int domain, int i);
std::string synthetic_ambiguous(int i);
// Target-side translation of a source word under a domain.
std::string synthetic_translation(std::string_view source, int domain);

}  // namespace domix
