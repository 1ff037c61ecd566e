#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "domix/autodiff.hpp"
#include "domix/commands.hpp"

namespace {

std::optional<domix::Precision> precision_flag(const std::string& text) {
  if (text.empty()) return std::nullopt;
  return domix::parse_precision(text);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Word-level domain mixing for Transformer translation"};
  app.require_subcommand(1);

  domix::GenDataOptions gen;
  std::string gen_spec;
  std::uint64_t gen_seed = 0;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic multi-domain corpus");
  gen_cmd->add_option("--config,--spec", gen_spec, "JSON task spec");
  gen_cmd->add_option("--out", gen.out_dir, "Output directory")->capture_default_str();
  auto* gen_seed_opt = gen_cmd->add_option("--seed", gen_seed, "Generator seed");

  domix::TrainOptions train;
  std::string train_resume, train_precision;
  std::uint64_t train_seed = 0;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a config file");
  train_cmd->add_option("--config", train.config, "Run config (JSON, dotted keys)")->required();
  train_cmd->add_option("--checkpoint,--resume", train_resume, "Checkpoint to resume from");
  auto* train_seed_opt = train_cmd->add_option("--seed", train_seed, "Overrides model.seed and train.seed");
  train_cmd->add_option("--precision", train_precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));

  domix::TranslateOptions tr;
  std::string tr_output, tr_vocab;
  auto* tr_cmd = app.add_subcommand("translate", "Translate one sentence per line");
  tr_cmd->add_option("--checkpoint", tr.checkpoint)->required();
  tr_cmd->add_option("--input", tr.input)->required();
  tr_cmd->add_option("--output", tr_output, "Defaults to stdout");
  tr_cmd->add_option("--vocab", tr_vocab, "Vocabulary that must match the checkpoint");
  tr_cmd->add_option("--beam", tr.beam, "Beam size")->capture_default_str();
  tr_cmd->add_flag("--greedy", tr.greedy, "Greedy decoding");
  tr_cmd->add_option("--max-len", tr.max_len, "Maximum generated tokens");

  domix::ScoreOptions sc;
  std::string sc_test, sc_hyp, sc_output;
  auto* sc_cmd = app.add_subcommand("score", "BLEU and perplexity, overall and per domain");
  sc_cmd->add_option("--checkpoint", sc.checkpoint)->required();
  sc_cmd->add_option("--test", sc_test, "Labelled TSV; defaults to data.test");
  sc_cmd->add_option("--hypotheses", sc_hyp, "Pre-computed translations");
  sc_cmd->add_option("--output", sc_output, "Report path; defaults to stdout");
  sc_cmd->add_option("--beam", sc.beam)->capture_default_str();
  sc_cmd->add_flag("--greedy", sc.greedy);

  domix::InspectOptions in;
  auto* in_cmd = app.add_subcommand("inspect", "Export per-token domain proportions");
  in_cmd->add_option("--checkpoint", in.checkpoint)->required();
  in_cmd->add_option("--input", in.input)->required();
  in_cmd->add_option("--output", in.output, "Prefix for .jsonl and .hist.csv")->required();

  domix::GradcheckOptions gc;
  std::string gc_config;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every gradient");
  gc_cmd->add_option("--config", gc_config);
  gc_cmd->add_option("--seed", gc.seed)->capture_default_str();
  gc_cmd->add_option("--inject-fault", gc.inject_fault)->group("");
  gc_cmd->add_option("--fault-factor", gc.fault_factor)->group("");

  CLI11_PARSE(app, argc, argv);

  if (const char* env = std::getenv("DOMIX_THREADS")) {
    try {
      domix::ad::set_intra_op_threads(std::max(1, std::stoi(env)));
    } catch (const std::exception&) {
      std::cerr << "error: DOMIX_THREADS must be a positive integer\n";
      return 2;
    }
  }

  try {
    if (*gen_cmd) {
      if (!gen_spec.empty()) gen.spec = gen_spec;
      if (*gen_seed_opt) gen.seed = gen_seed;
      return domix::cmd_gen_data(gen, std::cout);
    }
    if (*train_cmd) {
      if (!train_resume.empty()) train.resume = train_resume;
      if (*train_seed_opt) train.seed = train_seed;
      train.precision = precision_flag(train_precision);
      return domix::cmd_train(train, std::cout);
    }
    if (*tr_cmd) {
      if (!tr_output.empty()) tr.output = tr_output;
      if (!tr_vocab.empty()) tr.vocab = tr_vocab;
      return domix::cmd_translate(tr, std::cerr);
    }
    if (*sc_cmd) {
      if (!sc_test.empty()) sc.test = sc_test;
      if (!sc_hyp.empty()) sc.hypotheses = sc_hyp;
      if (!sc_output.empty()) sc.output = sc_output;
      return domix::cmd_score(sc, std::cerr);
    }
    if (*in_cmd) return domix::cmd_inspect(in, std::cout);
    if (*gc_cmd) {
      if (!gc_config.empty()) gc.config = gc_config;
      return domix::cmd_gradcheck(gc, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
