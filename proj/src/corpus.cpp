#include "domix/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "domix/rng.hpp"

namespace domix {

namespace {

const std::vector<std::string> kReserved = {"<pad>", "<s>", "</s>", "<unk>"};

bool parse_digits(std::string_view s, int& out) {
  if (s.empty()) return false;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

}  // namespace

Vocab::Vocab() {
  for (const auto& t : kReserved) add(t);
}

int Vocab::add(const std::string& token) {
  if (auto it = index_.find(token); it != index_.end()) return it->second;
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

int Vocab::id(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

bool Vocab::contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }

const std::string& Vocab::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocab::encode(std::span<const std::string> tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> Vocab::decode(std::span<const int> ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int i : ids) out.push_back(token(i));
  return out;
}

std::uint64_t Vocab::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : tokens_) {
    for (unsigned char c : t) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    h ^= 0xff;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<std::string> Vocab::non_reserved() const {
  return {tokens_.begin() + kNumReserved, tokens_.end()};
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write vocab file " + path.string());
  for (std::size_t i = kNumReserved; i < tokens_.size(); ++i) out << tokens_[i] << '\n';
  if (!out) throw std::runtime_error("failed writing vocab file " + path.string());
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read vocab file " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return from_tokens(tokens);
}

Vocab Vocab::from_tokens(std::span<const std::string> non_reserved) {
  Vocab v;
  for (const auto& t : non_reserved) {
    if (v.contains(t)) throw std::runtime_error("duplicate vocabulary entry '" + t + "'");
    v.add(t);
  }
  return v;
}

Batch Batch::trimmed() const {
  auto used = [this](const std::vector<std::uint8_t>& mask, std::size_t len) {
    std::size_t keep = 0;
    for (std::size_t b = 0; b < size; ++b) {
      for (std::size_t t = len; t > keep; --t) {
        if (mask[b * len + t - 1]) {
          keep = t;
          break;
        }
      }
    }
    return keep;
  };
  const std::size_t s_keep = used(src_mask, src_len);
  const std::size_t t_keep = used(tgt_mask, tgt_len);
  Batch out;
  out.size = size;
  out.src_len = s_keep;
  out.tgt_len = t_keep;
  out.domains = domains;
  for (std::size_t b = 0; b < size; ++b) {
    for (std::size_t t = 0; t < s_keep; ++t) {
      out.src.push_back(src[b * src_len + t]);
      out.src_mask.push_back(src_mask[b * src_len + t]);
    }
    for (std::size_t t = 0; t < t_keep; ++t) {
      out.tgt.push_back(tgt[b * tgt_len + t]);
      out.tgt_mask.push_back(tgt_mask[b * tgt_len + t]);
    }
  }
  return out;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!current.empty()) tokens.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

std::string detokenize(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

Vocab build_vocab(std::span<const std::string> sentences, int min_freq) {
  if (min_freq < 1) throw std::invalid_argument("min_freq must be >= 1");
  if (sentences.empty()) throw std::invalid_argument("cannot build a vocabulary from an empty corpus");
  std::map<std::string, long> counts;
  for (const auto& s : sentences) {
    for (auto& t : tokenize(s)) ++counts[t];
  }
  std::vector<std::pair<std::string, long>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocab v;
  for (const auto& [tok, n] : ranked) {
    if (n >= min_freq && !v.contains(tok)) v.add(tok);
  }
  return v;
}

Vocab build_vocab(std::span<const TextExample> corpus, int min_freq) {
  std::vector<std::string> sentences;
  sentences.reserve(corpus.size() * 2);
  for (const auto& ex : corpus) {
    sentences.push_back(detokenize(ex.src));
    sentences.push_back(detokenize(ex.tgt));
  }
  return build_vocab(sentences, min_freq);
}

BitextExample encode_example(const TextExample& example, const Vocab& vocab) {
  return {vocab.encode(example.src), vocab.encode(example.tgt), example.domain};
}

Batch encode_batch(std::span<const BitextExample> examples, std::size_t max_len) {
  if (max_len < 2) throw std::invalid_argument("max_len must be >= 2");
  Batch batch;
  batch.size = examples.size();
  batch.src_len = max_len;
  batch.tgt_len = max_len;
  batch.src.assign(batch.size * max_len, Vocab::kPad);
  batch.tgt.assign(batch.size * max_len, Vocab::kPad);
  batch.src_mask.assign(batch.size * max_len, 0);
  batch.tgt_mask.assign(batch.size * max_len, 0);
  for (std::size_t b = 0; b < examples.size(); ++b) {
    const auto& ex = examples[b];
    const std::size_t n_src = std::min(ex.src.size(), max_len - 1);
    for (std::size_t t = 0; t < n_src; ++t) batch.src[b * max_len + t] = ex.src[t];
    batch.src[b * max_len + n_src] = Vocab::kEos;
    for (std::size_t t = 0; t <= n_src; ++t) batch.src_mask[b * max_len + t] = 1;

    const std::size_t n_tgt = std::min(ex.tgt.size(), max_len - 2);
    batch.tgt[b * max_len] = Vocab::kBos;
    for (std::size_t t = 0; t < n_tgt; ++t) batch.tgt[b * max_len + 1 + t] = ex.tgt[t];
    batch.tgt[b * max_len + 1 + n_tgt] = Vocab::kEos;
    for (std::size_t t = 0; t < n_tgt + 2; ++t) batch.tgt_mask[b * max_len + t] = 1;
    batch.domains.push_back(ex.domain);
  }
  return batch;
}

Batch encode_batch(std::span<const TextExample> examples, const Vocab& vocab, std::size_t max_len) {
  std::vector<BitextExample> encoded;
  encoded.reserve(examples.size());
  for (const auto& ex : examples) encoded.push_back(encode_example(ex, vocab));
  return encode_batch(encoded, max_len);
}

std::vector<TextExample> read_tsv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read corpus file " + path.string());
  std::vector<TextExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab1 = line.find('\t');
    const auto tab2 = tab1 == std::string::npos ? tab1 : line.find('\t', tab1 + 1);
    if (tab2 == std::string::npos) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                               ": expected domain<TAB>source<TAB>target");
    }
    TextExample ex;
    if (!parse_digits(std::string_view(line).substr(0, tab1), ex.domain)) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": bad domain label");
    }
    ex.src = tokenize(std::string_view(line).substr(tab1 + 1, tab2 - tab1 - 1));
    ex.tgt = tokenize(std::string_view(line).substr(tab2 + 1));
    out.push_back(std::move(ex));
  }
  return out;
}

void write_tsv(const std::filesystem::path& path, std::span<const TextExample> examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write corpus file " + path.string());
  for (const auto& ex : examples) {
    out << ex.domain << '\t' << detokenize(ex.src) << '\t' << detokenize(ex.tgt) << '\n';
  }
  if (!out) throw std::runtime_error("failed writing corpus file " + path.string());
}

// ---- synthetic task ---------------------------------------------------------

void SyntheticTaskSpec::validate() const {
  if (domains < 1) throw std::invalid_argument("synthetic spec: domains must be >= 1");
  if (shared_words < 0 || exclusive_words < 0 || ambiguous_words < 0) {
    throw std::invalid_argument("synthetic spec: word counts must be >= 0");
  }
  if (shared_words + exclusive_words + ambiguous_words == 0) {
    throw std::invalid_argument("synthetic spec: no words to generate sentences from");
  }
  if (!(marker_prob >= 0.0 && marker_prob <= 1.0)) {
    throw std::invalid_argument("synthetic spec: marker_prob must lie in [0, 1]");
  }
  if (min_len < 1 || max_len < min_len) {
    throw std::invalid_argument("synthetic spec: need 1 <= min_len <= max_len");
  }
  if (train_size < 0 || valid_size < 0 || test_size < 0) {
    throw std::invalid_argument("synthetic spec: split sizes must be >= 0");
  }
}

std::string synthetic_shared(int i) { return "sh" + std::to_string(i); }

std::string synthetic_exclusive(int domain, int i) {
  return "d" + std::to_string(domain) + "w" + std::to_string(i);
}

std::string synthetic_ambiguous(int i) { return "am" + std::to_string(i); }

SyntheticWord classify_synthetic(std::string_view token) {
  int n = 0;
  if (token.starts_with("sh") && parse_digits(token.substr(2), n)) return {WordClass::shared, -1};
  if (token.starts_with("am") && parse_digits(token.substr(2), n)) return {WordClass::ambiguous, -1};
  if (token.starts_with("d")) {
    const auto w = token.find('w');
    int domain = 0;
    if (w != std::string_view::npos && parse_digits(token.substr(1, w - 1), domain) &&
        parse_digits(token.substr(w + 1), n)) {
      return {WordClass::exclusive, domain};
    }
  }
  return {WordClass::other, -1};
}

std::string synthetic_translation(std::string_view source, int domain) {
  const auto cls = classify_synthetic(source).cls;
  if (cls == WordClass::ambiguous) return "t" + std::string(source) + "d" + std::to_string(domain);
  return "t" + std::string(source);
}

SyntheticCorpus generate_synthetic(const SyntheticTaskSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);

  std::vector<std::string> shared, ambiguous;
  for (int i = 0; i < spec.shared_words; ++i) shared.push_back(synthetic_shared(i));
  for (int i = 0; i < spec.ambiguous_words; ++i) ambiguous.push_back(synthetic_ambiguous(i));
  std::vector<std::vector<std::string>> exclusive(static_cast<std::size_t>(spec.domains));
  for (int j = 0; j < spec.domains; ++j) {
    for (int i = 0; i < spec.exclusive_words; ++i) {
      exclusive[static_cast<std::size_t>(j)].push_back(synthetic_exclusive(j, i));
    }
  }

  std::vector<std::string> unmarked = shared;
  unmarked.insert(unmarked.end(), ambiguous.begin(), ambiguous.end());

  std::unordered_set<std::string> seen;
  auto make_sentence = [&](int domain) {
    const auto& own = exclusive[static_cast<std::size_t>(domain)];
    std::vector<std::string> pool = unmarked;
    pool.insert(pool.end(), own.begin(), own.end());
    const bool marked = !own.empty() && rng.bernoulli(spec.marker_prob);
    const std::vector<std::string>& draw_from = (marked || unmarked.empty()) ? pool : unmarked;
    const auto len = static_cast<std::size_t>(
        spec.min_len + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.max_len - spec.min_len + 1))));
    TextExample ex;
    ex.domain = domain;
    for (std::size_t t = 0; t < len; ++t) ex.src.push_back(draw_from[rng.below(draw_from.size())]);
    if (marked) {
      const bool has_marker = std::any_of(ex.src.begin(), ex.src.end(), [&](const std::string& w) {
        return classify_synthetic(w).cls == WordClass::exclusive;
      });
      if (!has_marker) ex.src[rng.below(len)] = own[rng.below(own.size())];
    }
    for (const auto& w : ex.src) ex.tgt.push_back(synthetic_translation(w, domain));
    return ex;
  };

  auto fill = [&](int count) {
    std::vector<TextExample> out;
    std::size_t attempts = 0;
    const std::size_t budget = 100 * static_cast<std::size_t>(count) + 1000;
    while (static_cast<int>(out.size()) < count) {
      if (++attempts > budget) {
        throw std::runtime_error("synthetic spec admits too few distinct sentences for the requested splits");
      }
      const int domain = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.domains)));
      TextExample ex = make_sentence(domain);
      if (seen.insert(detokenize(ex.src)).second) out.push_back(std::move(ex));
    }
    return out;
  };

  SyntheticCorpus corpus;
  corpus.train = fill(spec.train_size);
  corpus.valid = fill(spec.valid_size);
  corpus.test = fill(spec.test_size);
  return corpus;
}

}  // namespace domix
