#include "domix/commands.hpp"

#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

#include "domix/checkpoint.hpp"
#include "domix/config.hpp"
#include "domix/eval.hpp"
#include "domix/rng.hpp"

namespace domix {

namespace {

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

std::ofstream open_output(const fs::path& path, std::ios::openmode mode = std::ios::trunc) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | mode);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

void check_labels(const std::vector<TextExample>& data, const ModelConfig& mc, const fs::path& source) {
  const bool labelled = mc.mixes_encoder() || mc.baseline != Baseline::none || mc.wl_head;
  if (!labelled) return;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].domain < 0 || static_cast<std::size_t>(data[i].domain) >= mc.domains) {
      throw std::invalid_argument(source.string() + ": sentence " + std::to_string(i + 1) + " has domain " +
                                  std::to_string(data[i].domain) + " but mixing.domains = " +
                                  std::to_string(mc.domains));
    }
  }
}

std::vector<BitextExample> encode_all(std::span<const TextExample> data, const Vocab& vocab) {
  std::vector<BitextExample> out;
  out.reserve(data.size());
  for (const auto& ex : data) out.push_back(encode_example(ex, vocab));
  return out;
}

std::size_t decode_limit(const RunConfig& config, std::size_t override_len) {
  if (override_len) return override_len;
  if (config.decode.max_len) return config.decode.max_len;
  return config.model.max_len;
}

std::vector<int> translate_ids(const Model& model, std::span<const int> src, std::size_t beam, bool greedy,
                               std::size_t max_len, double alpha) {
  if (greedy) return strip_eos(greedy_decode(model, src, max_len));
  return strip_eos(beam_search(model, src, beam, max_len, alpha).tokens);
}

// Architecture-defining keys of the config snapshot.
bool architecture_key(const std::string& key) {
  return key.rfind("model.", 0) == 0 || key.rfind("mixing.", 0) == 0 || key == "train.baseline" ||
         key == "train.wl";
}

}  // namespace

std::vector<std::string> decode_tokens(const Vocab& vocab, std::span<const int> ids) {
  return vocab.decode(ids);
}

std::vector<TextExample> read_sentences(const fs::path& path) {
  std::vector<TextExample> out;
  for (const auto& line : read_lines(path)) {
    if (std::count(line.begin(), line.end(), '\t') >= 2) {
      const auto tab1 = line.find('\t');
      const auto tab2 = line.find('\t', tab1 + 1);
      TextExample ex;
      try {
        ex.domain = std::stoi(line.substr(0, tab1));
      } catch (const std::exception&) {
        throw std::runtime_error(path.string() + ": bad domain label in '" + line + "'");
      }
      ex.src = tokenize(std::string_view(line).substr(tab1 + 1, tab2 - tab1 - 1));
      ex.tgt = tokenize(std::string_view(line).substr(tab2 + 1));
      out.push_back(std::move(ex));
    } else if (!line.empty()) {
      out.push_back({0, tokenize(line), {}});
    }
  }
  return out;
}

// ---- gen-data -------------------------------------------------------------

SyntheticTaskSpec load_synthetic_spec(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open spec file " + path.string());
  const auto doc = nlohmann::json::parse(in);
  if (!doc.is_object()) throw std::invalid_argument("spec file must hold a JSON object");
  SyntheticTaskSpec spec;
  const std::map<std::string, int*> ints{{"domains", &spec.domains},
                                         {"shared_words", &spec.shared_words},
                                         {"exclusive_words", &spec.exclusive_words},
                                         {"ambiguous_words", &spec.ambiguous_words},
                                         {"min_len", &spec.min_len},
                                         {"max_len", &spec.max_len},
                                         {"train_size", &spec.train_size},
                                         {"valid_size", &spec.valid_size},
                                         {"test_size", &spec.test_size}};
  for (const auto& [key, value] : doc.items()) {
    if (auto it = ints.find(key); it != ints.end()) {
      if (!value.is_number_integer()) throw ConfigError(key, "expected an integer");
      *it->second = value.get<int>();
    } else if (key == "marker_prob") {
      if (!value.is_number()) throw ConfigError(key, "expected a number");
      spec.marker_prob = value.get<double>();
    } else if (key == "seed") {
      if (!value.is_number_unsigned()) throw ConfigError(key, "expected a non-negative integer");
      spec.seed = value.get<std::uint64_t>();
    } else {
      throw ConfigError(key, "unknown key");
    }
  }
  spec.validate();
  return spec;
}

int cmd_gen_data(const GenDataOptions& options, std::ostream& log) {
  SyntheticTaskSpec spec = options.spec ? load_synthetic_spec(*options.spec) : SyntheticTaskSpec{};
  if (options.seed) spec.seed = *options.seed;
  spec.validate();
  const SyntheticCorpus corpus = generate_synthetic(spec);
  fs::create_directories(options.out_dir);
  write_tsv(options.out_dir / "train.tsv", corpus.train);
  write_tsv(options.out_dir / "valid.tsv", corpus.valid);
  write_tsv(options.out_dir / "test.tsv", corpus.test);
  build_vocab(corpus.train).save(options.out_dir / "vocab.txt");
  auto report = [&](const char* name, const std::vector<TextExample>& split) {
    std::vector<std::size_t> counts(static_cast<std::size_t>(spec.domains), 0);
    for (const auto& ex : split) ++counts[static_cast<std::size_t>(ex.domain)];
    log << name << ": " << split.size() << " sentences";
    for (std::size_t j = 0; j < counts.size(); ++j) log << ", domain " << j << " = " << counts[j];
    log << '\n';
  };
  report("train", corpus.train);
  report("valid", corpus.valid);
  report("test", corpus.test);
  return 0;
}

// ---- train ----------------------------------------------------------------

int cmd_train(const TrainOptions& options, std::ostream& log) {
  RunConfig config = load_run_config(options.config);
  if (options.seed) {
    config.model.seed = *options.seed;
    config.train.seed = *options.seed;
  }
  if (options.precision) config.train.precision = *options.precision;
  if (config.paths.train.empty()) throw ConfigError("data.train", "is required for training");
  if (!fs::exists(config.paths.train)) throw ConfigError("data.train", "file not found: " + config.paths.train.string());
  if (!config.paths.vocab.empty() && !fs::exists(config.paths.vocab)) {
    throw ConfigError("data.vocab", "file not found: " + config.paths.vocab.string());
  }
  if (!config.paths.valid.empty() && !fs::exists(config.paths.valid)) {
    throw ConfigError("data.valid", "file not found: " + config.paths.valid.string());
  }

  const auto train_text = read_tsv(config.paths.train);
  if (train_text.empty()) throw std::invalid_argument("training corpus " + config.paths.train.string() + " is empty");
  check_labels(train_text, config.model, config.paths.train);
  fs::create_directories(config.paths.out_dir);

  Vocab vocab;
  if (!config.paths.vocab.empty()) {
    vocab = Vocab::load(config.paths.vocab);
  } else {
    vocab = build_vocab(train_text, config.min_freq);
    vocab.save(config.paths.out_dir / "vocab.txt");
  }
  if (config.model.vocab_size != 0 && config.model.vocab_size != vocab.size()) {
    throw ConfigError("model.vocab_size", std::to_string(config.model.vocab_size) + " disagrees with the vocabulary (" +
                                               std::to_string(vocab.size()) + " entries)");
  }
  config.model.vocab_size = vocab.size();

  std::optional<Model> model;
  TrainState state;
  if (options.resume) {
    LoadedCheckpoint ck = load_checkpoint(*options.resume);
    const auto stored = to_json(ck.config);
    const auto wanted = to_json(config);
    for (const auto& [key, value] : wanted.items()) {
      if (architecture_key(key) && stored.at(key) != value) {
        throw ConfigError(key, "differs from the checkpoint being resumed (" + stored.at(key).dump() + " vs " +
                                   value.dump() + ")");
      }
    }
    if (!(ck.vocab == vocab)) {
      throw std::invalid_argument("vocabulary mismatch: checkpoint " + hex64(ck.vocab.hash()) + ", config " +
                                  hex64(vocab.hash()));
    }
    model = std::move(ck.model);
    state = std::move(ck.state);
    log << "resuming from step " << state.step << '\n';
  } else {
    model.emplace(config.model);
  }

  const auto data = encode_all(train_text, vocab);
  const fs::path metrics_path = config.paths.out_dir / "metrics.jsonl";
  std::ofstream metrics = open_output(metrics_path, options.resume ? std::ios::app : std::ios::trunc);
  TrainHooks hooks;
  hooks.metrics = &metrics;
  const fs::path final_path = config.paths.out_dir / "checkpoint.bin";
  hooks.checkpoint = [&](const Model& m, const TrainState& s) {
    save_checkpoint(final_path, m, vocab, config, &s);
    if (config.train.checkpoint_every && s.step % config.train.checkpoint_every == 0) {
      save_checkpoint(config.paths.out_dir / ("checkpoint-step" + std::to_string(s.step) + ".bin"), m, vocab,
                      config, &s);
    }
  };

  log << "training " << model->parameter_count() << " parameters on " << data.size() << " sentences\n";
  const TrainResult result = train(*model, data, config.train, state, hooks);
  if (result.steps == 0) save_checkpoint(final_path, *model, vocab, config, &state);
  log << "steps " << state.step << ", L_gen " << result.last.gen << ", L_mix " << result.last.mix << ", L_total "
      << result.last.total << '\n';
  if (!config.paths.valid.empty()) {
    const auto valid = encode_all(read_tsv(config.paths.valid), vocab);
    if (!valid.empty()) log << "valid ppl " << evaluate_nll(*model, valid).perplexity() << '\n';
  }
  log << "checkpoint " << final_path.string() << '\n';
  return 0;
}

// ---- translate ------------------------------------------------------------

int cmd_translate(const TranslateOptions& options, std::ostream& log) {
  const LoadedCheckpoint ck = load_checkpoint(options.checkpoint);
  if (options.vocab) {
    const Vocab given = Vocab::load(*options.vocab);
    if (given.hash() != ck.vocab.hash()) {
      throw std::invalid_argument("vocabulary mismatch: " + options.vocab->string() + " has hash " +
                                  hex64(given.hash()) + ", checkpoint has hash " + hex64(ck.vocab.hash()));
    }
  }
  const std::size_t max_len = decode_limit(ck.config, options.max_len);
  const auto lines = read_lines(options.input);
  std::ostringstream buffer;
  for (const auto& line : lines) {
    const auto tokens = tokenize(line);
    if (tokens.empty()) {
      buffer << '\n';
      continue;
    }
    const auto ids = ck.vocab.encode(tokens);
    const auto out = translate_ids(*ck.model, ids, options.beam, options.greedy, max_len, ck.config.decode.alpha);
    buffer << detokenize(ck.vocab.decode(out)) << '\n';
  }
  if (options.output) {
    auto out = open_output(*options.output);
    out << buffer.str();
  } else {
    std::cout << buffer.str();
  }
  log << "translated " << lines.size() << " lines\n";
  return 0;
}

// ---- score ----------------------------------------------------------------

nlohmann::ordered_json score_report(const Model& model, const Vocab& vocab,
                                    std::span<const TextExample> references,
                                    std::span<const std::vector<std::string>> hypotheses) {
  if (references.size() != hypotheses.size()) {
    throw std::invalid_argument(std::to_string(hypotheses.size()) + " hypotheses for " +
                                std::to_string(references.size()) + " references");
  }
  std::map<int, std::vector<std::size_t>> by_domain;
  for (std::size_t i = 0; i < references.size(); ++i) by_domain[references[i].domain].push_back(i);

  auto summarize = [&](const std::vector<std::size_t>& rows) {
    std::vector<std::vector<std::string>> hyp, ref;
    std::vector<BitextExample> data;
    for (std::size_t i : rows) {
      hyp.push_back(hypotheses[i]);
      ref.push_back(references[i].tgt);
      data.push_back(encode_example(references[i], vocab));
    }
    const NllStats nll = evaluate_nll(model, data);
    nlohmann::ordered_json j;
    j["sentences"] = rows.size();
    j["tokens"] = nll.tokens;
    j["bleu"] = corpus_bleu(hyp, ref);
    j["nll"] = nll.nll_sum;
    j["ppl"] = nll.perplexity();
    return j;
  };

  std::vector<std::size_t> all(references.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  nlohmann::ordered_json report;
  report["overall"] = summarize(all);
  report["per_domain"] = nlohmann::ordered_json::array();
  for (const auto& [domain, rows] : by_domain) {
    nlohmann::ordered_json j;
    j["domain"] = domain;
    const auto summary = summarize(rows);
    for (const auto& [key, value] : summary.items()) j[key] = value;
    report["per_domain"].push_back(j);
  }
  return report;
}

int cmd_score(const ScoreOptions& options, std::ostream& log) {
  const LoadedCheckpoint ck = load_checkpoint(options.checkpoint);
  const fs::path test = options.test ? *options.test : ck.config.paths.test;
  if (test.empty()) throw ConfigError("data.test", "no test set given");
  const auto refs = read_tsv(test);
  if (refs.empty()) throw std::invalid_argument("test set " + test.string() + " is empty");

  std::vector<std::vector<std::string>> hyps;
  if (options.hypotheses) {
    for (const auto& line : read_lines(*options.hypotheses)) hyps.push_back(tokenize(line));
    while (hyps.size() > refs.size() && hyps.back().empty()) hyps.pop_back();
  } else {
    const std::size_t max_len = decode_limit(ck.config, 0);
    for (const auto& ex : refs) {
      const auto ids = ck.vocab.encode(ex.src);
      hyps.push_back(ck.vocab.decode(
          translate_ids(*ck.model, ids, options.beam, options.greedy, max_len, ck.config.decode.alpha)));
    }
  }
  const auto report = score_report(*ck.model, ck.vocab, refs, hyps);
  if (options.output) {
    auto out = open_output(*options.output);
    out << report.dump(2) << '\n';
  } else {
    std::cout << report.dump(2) << '\n';
  }
  log << "BLEU " << report["overall"]["bleu"].get<double>() << ", ppl " << report["overall"]["ppl"].get<double>()
      << '\n';
  return 0;
}

// ---- inspect --------------------------------------------------------------

int cmd_inspect(const InspectOptions& options, std::ostream& log) {
  const LoadedCheckpoint ck = load_checkpoint(options.checkpoint);
  if (!ck.config.model.mixes_encoder()) throw std::invalid_argument("no proportion layers in this checkpoint");
  const auto sentences = read_sentences(options.input);
  std::vector<ProportionTrace> traces;
  const fs::path jsonl = options.output.string() + ".jsonl";
  const fs::path csv = options.output.string() + ".hist.csv";
  auto out = open_output(jsonl);
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    const ProportionTrace trace = trace_proportions(*ck.model, encode_example(sentences[i], ck.vocab), i);
    nlohmann::ordered_json j;
    j["id"] = trace.id;
    j["domain"] = trace.domain;
    j["tokens"] = ck.vocab.decode(trace.source);
    j["target_tokens"] = ck.vocab.decode(trace.target);
    j["records"] = nlohmann::ordered_json::array();
    for (const auto& rec : trace.records) {
      nlohmann::ordered_json r;
      r["stack"] = rec.stack;
      r["layer"] = rec.layer;
      r["sublayer"] = rec.sublayer;
      r["proportions"] = rec.proportions;
      j["records"].push_back(std::move(r));
    }
    out << j.dump() << '\n';
    traces.push_back(trace);
  }
  auto hist = open_output(csv);
  hist << "stack,layer,bin,lo,hi,count\n";
  hist << std::setprecision(17);
  for (const auto& b : proportion_histogram(traces, ck.config.model.domains)) {
    hist << b.stack << ',' << b.layer << ',' << b.bin << ',' << b.lo << ',' << b.hi << ',' << b.count << '\n';
  }
  log << "wrote " << jsonl.string() << " and " << csv.string() << '\n';
  return 0;
}

// ---- gradcheck ------------------------------------------------------------

int cmd_gradcheck(const GradcheckOptions& options, std::ostream& log) {
  RunConfig config = options.config ? load_run_config(*options.config) : RunConfig{};
  ModelConfig& mc = config.model;
  mc.d_model = 8;
  mc.heads = 2;
  mc.domains = 3;
  mc.enc_layers = 2;
  mc.dec_layers = 2;
  mc.d_ff = 16;
  mc.max_len = 5;
  mc.dropout = 0.0;
  mc.seed = options.seed;
  if (!options.config) {
    mc.scope = MixingScope::enc_dec;
    mc.baseline = Baseline::mtl;
    mc.wl_head = true;
  }
  std::vector<std::string> words;
  for (int i = 0; i < 8; ++i) words.push_back("w" + std::to_string(i));
  const Vocab vocab = Vocab::from_tokens(words);
  mc.vocab_size = vocab.size();
  config.train.precision = Precision::f64;
  const Model model(mc);

  Rng rng = Rng::derive(options.seed, 0x6772616463686bULL);
  std::vector<BitextExample> examples;
  for (int b = 0; b < 3; ++b) {
    BitextExample ex;
    const std::size_t ls = 1 + rng.below(4), lt = 1 + rng.below(3);
    for (std::size_t t = 0; t < ls; ++t) ex.src.push_back(Vocab::kNumReserved + static_cast<int>(rng.below(words.size())));
    for (std::size_t t = 0; t < lt; ++t) ex.tgt.push_back(Vocab::kNumReserved + static_cast<int>(rng.below(words.size())));
    ex.domain = static_cast<int>(rng.below(mc.domains));
    examples.push_back(std::move(ex));
  }
  const Batch batch = encode_batch(examples, mc.max_len).trimmed();

  if (!options.inject_fault.empty()) ad::debug::inject_fault(options.inject_fault, options.fault_factor);
  const GradCheckReport report = check_gradients(
      model.parameters(), [&] { return compute_losses(model, batch, config.train).total; }, 1e-5, 1e-5);
  const DetachReport detach = check_detach_contract(model, batch, config.train);
  ad::debug::inject_fault("", 1.0);

  log << std::left << std::setw(28) << "parameter" << std::right << std::setw(8) << "numel" << std::setw(14)
      << "max_rel_err" << std::setw(14) << "max_|grad|" << '\n';
  log << std::scientific << std::setprecision(3);
  for (const auto& e : report.entries) {
    log << std::left << std::setw(28) << e.name << std::right << std::setw(8) << e.numel << std::setw(14)
        << e.max_rel_error << std::setw(14) << e.max_abs_grad << '\n';
  }
  log << "max relative error " << report.max_rel_error << " (tolerance " << report.tolerance << ")\n";
  log << std::defaultfloat << std::setprecision(6);
  log << "dL_gen/dR max " << detach.max_gen_grad_on_gates << '\n';
  log << "dL_mix/dtheta max " << detach.max_mix_grad_on_transformer << " (detach mode "
      << to_string(config.train.detach) << ")\n";
  const bool pass = report.passed && detach.holds;
  log << (pass ? "PASS" : "FAIL") << '\n';
  return pass ? 0 : 1;
}

}  // namespace domix
