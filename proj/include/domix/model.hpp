#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "domix/autodiff.hpp"
#include "domix/corpus.hpp"
#include "domix/layers.hpp"
#include "domix/mixing.hpp"

namespace domix {

// Sentence-level domain classifier attached to the pooled encoder output.
enum class Baseline { none, mtl, advl, padvl };

std::string_view to_string(Baseline baseline);
Baseline parse_baseline(std::string_view text);
std::string_view to_string(NormPosition norm);
NormPosition parse_norm_position(std::string_view text);

struct ModelConfig {
  std::size_t d_model = 48;
  std::size_t heads = 4;
  std::size_t enc_layers = 2;
  std::size_t dec_layers = 2;
  std::size_t d_ff = 96;
  std::size_t vocab_size = 0;
  std::size_t max_len = 24;
  NormPosition norm = NormPosition::pre;
  double dropout = 0.0;
  bool positional = true;

  MixingScope scope = MixingScope::none;
  std::size_t domains = 1;
  double epsilon = 0.05;

  Baseline baseline = Baseline::none;
  bool wl_head = false;
  std::uint64_t seed = 1;

  void validate() const;
  bool mixes_encoder() const { return scope != MixingScope::none; }
  bool mixes_decoder() const { return scope == MixingScope::enc_dec; }
};

struct EncoderState {
  ad::Tensor states;  // [batch * length, d]
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::uint8_t> mask;
};

struct DecoderOutput {
  ad::Tensor logits;  // [batch * length, V]
  ad::Tensor hidden;  // [batch * length, d], input to the output projection
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::uint8_t> mask;
};

struct ModelOutput {
  EncoderState encoder;
  DecoderOutput decoder;
  std::vector<int> labels;   // next-token targets, aligned with decoder rows
  std::vector<std::uint8_t> label_mask;
};

struct ClassifierHead {
  ad::Tensor weight;  // [d, k]
  ad::Tensor bias;    // [k]
};

class Model {
 public:
  explicit Model(const ModelConfig& config);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return config_; }

  EncoderState encode(std::span<const int> src, std::size_t batch, std::size_t length,
                      std::span<const std::uint8_t> mask, ForwardContext& ctx) const;
  DecoderOutput decode(std::span<const int> tgt_in, std::size_t batch, std::size_t length,
                       std::span<const std::uint8_t> mask, const EncoderState& enc,
                       ForwardContext& ctx) const;
  // Teacher-forced pass: decoder reads tgt[:, :-1] and predicts tgt[:, 1:].
  ModelOutput forward(const Batch& batch, ForwardContext& ctx) const;

  // Parameters in a fixed order; names are stable across runs.
  const std::vector<NamedTensor>& parameters() const { return params_; }
  // Copies values of same-named, same-shaped tensors; returns how many.
  std::size_t assign_matching(std::span<const NamedTensor> source);
  std::size_t parameter_count() const;

  const ClassifierHead* baseline_head() const { return baseline_ ? &*baseline_ : nullptr; }
  const DomainProportionLayer* wl_head() const { return wl_ ? &*wl_ : nullptr; }

  ad::Tensor& embedding() { return embedding_; }

  struct EncoderLayer {
    LayerNorm ln1, ln2;
    MixedAttention self;
    MixedFfn ffn;
  };
  struct DecoderLayer {
    LayerNorm ln1, ln2, ln3;
    MixedAttention self;
    MixedAttention cross;
    MixedFfn ffn;
  };
  std::vector<EncoderLayer>& encoder_layers() { return encoder_; }
  std::vector<DecoderLayer>& decoder_layers() { return decoder_; }

 private:
  ad::Tensor embed(std::span<const int> ids, std::size_t batch, std::size_t length) const;
  void register_parameters();

  ModelConfig config_;
  ad::Tensor embedding_;  // [V, d], shared by source and target
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  LayerNorm enc_final_, dec_final_;
  ad::Tensor out_w_, out_b_;
  std::optional<ClassifierHead> baseline_;
  std::optional<DomainProportionLayer> wl_;
  std::vector<NamedTensor> params_;
};

}  // namespace domix
