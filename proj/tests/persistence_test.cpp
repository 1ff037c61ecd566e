#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "domix/checkpoint.hpp"
#include "domix/commands.hpp"
#include "domix/config.hpp"
#include "test_support.hpp"

namespace domix {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("domix_persistence_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string key_of(const nlohmann::json& doc) {
  try {
    parse_run_config(doc);
  } catch (const ConfigError& e) {
    return e.key();
  }
  return "";
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// ---- config -------------------------------------------------------------

TEST(RunConfigParse, ErrorsNameTheKey) {
  EXPECT_EQ(key_of({{"model.d", "wide"}}), "model.d");
  EXPECT_EQ(key_of({{"model.d", -3}}), "model.d");
  EXPECT_EQ(key_of({{"model.d", 1.5}}), "model.d");
  EXPECT_EQ(key_of({{"train.lr_peak", "fast"}}), "train.lr_peak");
  EXPECT_EQ(key_of({{"train.lr_peak", 0.0}}), "train.lr_peak");
  EXPECT_EQ(key_of({{"mixing.scope", "everywhere"}}), "mixing.scope");
  EXPECT_EQ(key_of({{"train.detach", "sometimes"}}), "train.detach");
  EXPECT_EQ(key_of({{"model.positional", 1}}), "model.positional");
  EXPECT_EQ(key_of({{"model.d", 10}, {"model.heads", 4}}), "model.heads");
  EXPECT_EQ(key_of({{"mixing.epsilon", 1.0}}), "mixing.epsilon");
  EXPECT_EQ(key_of({{"train.wl", true}}), "train.wl");
  EXPECT_EQ(key_of({{"train.mix_loss_reduction", "max"}}), "train.mix_loss_reduction");
  EXPECT_EQ(key_of({{"data.min_freq", 0}}), "data.min_freq");
}

TEST(RunConfigParse, RejectsUnknownAndNestedKeys) {
  EXPECT_EQ(key_of({{"model.depth", 3}}), "model.depth");
  EXPECT_EQ(key_of({{"model", {{"d", 8}}}}), "model");
  try {
    parse_run_config({{"model", {{"d", 8}}}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("dotted"), std::string::npos);
  }
  EXPECT_THROW(parse_run_config(nlohmann::json::array()), std::invalid_argument);
}

TEST(RunConfigParse, DefaultsAndOverrides) {
  const RunConfig c = parse_run_config({{"model.d", 16},
                                        {"model.heads", 2},
                                        {"mixing.scope", "enc_dec"},
                                        {"mixing.domains", 3},
                                        {"train.detach", "padvl"},
                                        {"train.mix_loss_reduction", "sum"},
                                        {"data.train", "t.tsv"}},
                                       "/base");
  EXPECT_EQ(c.model.d_model, 16u);
  EXPECT_EQ(c.model.heads, 2u);
  EXPECT_EQ(c.model.scope, MixingScope::enc_dec);
  EXPECT_EQ(c.model.domains, 3u);
  EXPECT_EQ(c.train.detach, DetachMode::padvl);
  EXPECT_TRUE(c.train.mix_loss_sum);
  EXPECT_EQ(c.paths.train, fs::path("/base/t.tsv"));
  EXPECT_EQ(c.model.dec_layers, ModelConfig{}.dec_layers);
  EXPECT_EQ(c.train.lr_peak, TrainConfig{}.lr_peak);
}

TEST(RunConfigParse, SnapshotRoundTrips) {
  Rng rng(1);
  const char* scopes[] = {"none", "encoder", "enc_dec"};
  const char* detach[] = {"detached", "mtl", "advl", "padvl"};
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t heads = 1 + rng.below(4);
    nlohmann::json doc{{"model.d", heads * (1 + rng.below(8))},
                       {"model.heads", heads},
                       {"model.norm", rng.bernoulli(0.5) ? "pre" : "post"},
                       {"model.dropout", rng.uniform(0.0, 0.5)},
                       {"mixing.scope", scopes[rng.below(3)]},
                       {"mixing.domains", 2 + rng.below(3)},
                       {"mixing.epsilon", rng.uniform(0.01, 0.5)},
                       {"train.detach", detach[rng.below(4)]},
                       {"train.lr_peak", rng.uniform(1e-5, 1e-2)},
                       {"train.max_steps", rng.below(10000)},
                       {"train.seed", rng.next() >> 1},
                       {"decode.alpha", rng.uniform(0.0, 2.0)},
                       {"data.train", "/data/train.tsv"}};
    const RunConfig a = parse_run_config(doc);
    const auto snap = to_json(a);
    const RunConfig b = parse_run_config(nlohmann::json::parse(snap.dump()));
    EXPECT_EQ(to_json(b), snap);
  }
}

TEST(RunConfigLoad, ReportsMissingAndMalformedFiles) {
  const fs::path dir = scratch("load");
  EXPECT_THROW(load_run_config(dir / "absent.json"), std::runtime_error);
  std::ofstream(dir / "bad.json") << "{ not json";
  EXPECT_THROW(load_run_config(dir / "bad.json"), std::invalid_argument);
  std::ofstream(dir / "rel.json") << R"({"data.train": "x/train.tsv"})";
  EXPECT_EQ(load_run_config(dir / "rel.json").paths.train, dir / "x/train.tsv");
}

// ---- checkpoints ----------------------------------------------------------

struct Fixture {
  RunConfig config;
  Vocab vocab = testing::numbered_vocab(8);
};

Fixture mixed_fixture(Precision precision) {
  Fixture f;
  f.config.model = testing::tiny_config(f.vocab.size(), MixingScope::enc_dec, 2);
  f.config.model.wl_head = true;
  f.config.train.precision = precision;
  return f;
}

TEST(Checkpoint, F64RoundTripIsBitExact) {
  const fs::path dir = scratch("f64");
  Fixture f = mixed_fixture(Precision::f64);
  Model model(f.config.model);
  TrainState state;
  state.step = 17;
  state.optimizer.step = 17;
  Rng rng(2);
  for (const auto& p : model.parameters()) {
    state.optimizer.m.push_back(testing::random_values(rng, p.tensor.numel()));
    state.optimizer.v.push_back(testing::random_values(rng, p.tensor.numel(), 0.0, 1.0));
  }
  const CheckpointInfo info = save_checkpoint(dir / "c.bin", model, f.vocab, f.config, &state);
  EXPECT_EQ(info.dtype, Precision::f64);
  const LoadedCheckpoint ck = load_checkpoint(dir / "c.bin");
  EXPECT_EQ(ck.info.payload_hash, info.payload_hash);
  EXPECT_EQ(ck.vocab, f.vocab);
  EXPECT_EQ(to_json(ck.config), to_json(f.config));
  ASSERT_EQ(ck.model->parameters().size(), model.parameters().size());
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    const auto& a = model.parameters()[i];
    const auto& b = ck.model->parameters()[i];
    EXPECT_EQ(a.name, b.name);
    EXPECT_TRUE(std::equal(a.tensor.data().begin(), a.tensor.data().end(), b.tensor.data().begin())) << a.name;
  }
  EXPECT_EQ(ck.state.step, 17u);
  EXPECT_EQ(ck.state.optimizer.step, 17u);
  EXPECT_EQ(ck.state.optimizer.m, state.optimizer.m);
  EXPECT_EQ(ck.state.optimizer.v, state.optimizer.v);
}

TEST(Checkpoint, F32StoresRoundedValues) {
  const fs::path dir = scratch("f32");
  Fixture f = mixed_fixture(Precision::f32);
  Model model(f.config.model);
  save_checkpoint(dir / "c.bin", model, f.vocab, f.config, nullptr);
  const LoadedCheckpoint ck = load_checkpoint(dir / "c.bin");
  EXPECT_EQ(ck.info.dtype, Precision::f32);
  EXPECT_TRUE(ck.state.optimizer.m.empty());
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    const auto a = model.parameters()[i].tensor.data();
    const auto b = ck.model->parameters()[i].tensor.data();
    for (std::size_t j = 0; j < a.size(); ++j) ASSERT_EQ(b[j], static_cast<double>(static_cast<float>(a[j])));
  }
  // Saving the reloaded model reproduces the same payload.
  const CheckpointInfo again = save_checkpoint(dir / "d.bin", *ck.model, ck.vocab, ck.config, nullptr);
  EXPECT_EQ(again.payload_hash, ck.info.payload_hash);
}

TEST(Checkpoint, RebuildsFromSnapshotAlone) {
  const fs::path dir = scratch("snapshot");
  Fixture f = mixed_fixture(Precision::f64);
  f.config.model.norm = NormPosition::post;
  f.config.model.baseline = Baseline::advl;
  f.config.model.wl_head = false;
  f.config.model.seed = 99;
  Model model(f.config.model);
  save_checkpoint(dir / "c.bin", model, f.vocab, f.config, nullptr);
  const LoadedCheckpoint ck = load_checkpoint(dir / "c.bin");
  EXPECT_EQ(ck.config.model.norm, NormPosition::post);
  EXPECT_NE(ck.model->baseline_head(), nullptr);
  EXPECT_EQ(ck.model->wl_head(), nullptr);
  // Same logits as the original.
  Rng rng(3);
  const Batch batch = encode_batch(testing::random_examples(rng, 3, f.vocab.size(), 4, 4, 2), 6);
  ForwardContext c1, c2;
  const auto a = model.forward(batch, c1).decoder.logits;
  const auto b = ck.model->forward(batch, c2).decoder.logits;
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(Checkpoint, DetectsCorruption) {
  const fs::path dir = scratch("corrupt");
  Fixture f = mixed_fixture(Precision::f32);
  Model model(f.config.model);
  save_checkpoint(dir / "c.bin", model, f.vocab, f.config, nullptr);
  std::string bytes = read_file(dir / "c.bin");

  std::string flipped = bytes;
  flipped[flipped.size() - 5] = static_cast<char>(flipped[flipped.size() - 5] ^ 0x10);
  std::ofstream(dir / "flip.bin", std::ios::binary) << flipped;
  try {
    load_checkpoint(dir / "flip.bin");
    FAIL() << "corruption not detected";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("hash mismatch"), std::string::npos) << e.what();
  }

  std::ofstream(dir / "short.bin", std::ios::binary) << bytes.substr(0, bytes.size() - 3);
  EXPECT_THROW(load_checkpoint(dir / "short.bin"), std::runtime_error);
  std::ofstream(dir / "junk.bin", std::ios::binary) << "garbage!garbage!";
  EXPECT_THROW(load_checkpoint(dir / "junk.bin"), std::runtime_error);
  EXPECT_THROW(load_checkpoint(dir / "absent.bin"), std::runtime_error);
}

TEST(Checkpoint, Fnv1aKnownValues) {
  EXPECT_EQ(fnv1a({}), 0xcbf29ce484222325ULL);
  const std::string a = "a";
  EXPECT_EQ(fnv1a(std::span(reinterpret_cast<const std::uint8_t*>(a.data()), a.size())), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(hex64(0xabcULL), "0000000000000abc");
}

// ---- resume ---------------------------------------------------------------

fs::path write_config(const fs::path& root, std::size_t max_steps, const fs::path& data_dir) {
  const fs::path path = root / "config.json";
  nlohmann::json doc{{"model.d", 16},         {"model.heads", 2},          {"model.enc_layers", 1},
                     {"model.dec_layers", 1}, {"model.d_ff", 24},          {"model.max_len", 12},
                     {"model.dropout", 0.1},  {"mixing.scope", "enc_dec"}, {"mixing.domains", 2},
                     {"train.wl", true},      {"train.max_steps", max_steps}, {"train.batch_size", 8},
                     {"train.warmup_steps", 4}, {"train.lr_peak", 3e-3},   {"train.checkpoint_every", 3},
                     {"train.log_elapsed", false}, {"data.train", (data_dir / "train.tsv").string()},
                     {"out.dir", (root / "out").string()}};
  std::ofstream(path) << doc.dump(2);
  return path;
}

fs::path small_corpus() {
  const fs::path dir = scratch("corpus");
  SyntheticTaskSpec spec;
  spec.train_size = 30;
  spec.valid_size = 5;
  spec.test_size = 5;
  spec.max_len = 6;
  write_tsv(dir / "train.tsv", generate_synthetic(spec).train);
  return dir;
}

TEST(Resume, MatchesUninterruptedRun) {
  const fs::path data = small_corpus();
  std::ostringstream log;
  const fs::path full = scratch("full"), split = scratch("split");
  ASSERT_EQ(cmd_train({write_config(full, 7, data), {}, {}, {}}, log), 0);
  ASSERT_EQ(cmd_train({write_config(split, 3, data), {}, {}, {}}, log), 0);
  const TrainOptions resume{write_config(split, 7, data), split / "out" / "checkpoint.bin", {}, {}};
  ASSERT_EQ(cmd_train(resume, log), 0);
  EXPECT_NE(log.str().find("resuming from step 3"), std::string::npos);

  EXPECT_EQ(read_file(split / "out" / "metrics.jsonl"), read_file(full / "out" / "metrics.jsonl"));
  const LoadedCheckpoint a = load_checkpoint(full / "out" / "checkpoint.bin");
  const LoadedCheckpoint b = load_checkpoint(split / "out" / "checkpoint.bin");
  EXPECT_EQ(a.info.payload_hash, b.info.payload_hash);
  EXPECT_EQ(b.state.step, 7u);
  EXPECT_TRUE(fs::exists(full / "out" / "checkpoint-step3.bin"));
  EXPECT_TRUE(fs::exists(full / "out" / "checkpoint-step6.bin"));
}

TEST(Resume, RejectsArchitectureChange) {
  const fs::path data = small_corpus();
  std::ostringstream log;
  const fs::path first = scratch("arch_a"), second = scratch("arch_b");
  ASSERT_EQ(cmd_train({write_config(first, 2, data), {}, {}, {}}, log), 0);
  const fs::path cfg = write_config(second, 4, data);
  auto doc = nlohmann::json::parse(read_file(cfg));
  doc["model.d_ff"] = 32;
  std::ofstream(cfg) << doc.dump();
  try {
    cmd_train({cfg, first / "out" / "checkpoint.bin", {}, {}}, log);
    FAIL() << "architecture change accepted";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "model.d_ff");
  }
}

}  // namespace
}  // namespace domix
