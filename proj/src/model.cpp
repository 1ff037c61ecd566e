#include "domix/model.hpp"

#include <cmath>
#include <stdexcept>

#include "domix/rng.hpp"

namespace domix {

std::string_view to_string(Baseline baseline) {
  switch (baseline) {
    case Baseline::none: return "none";
    case Baseline::mtl: return "mtl";
    case Baseline::advl: return "advl";
    case Baseline::padvl: return "padvl";
  }
  return "none";
}

Baseline parse_baseline(std::string_view text) {
  if (text == "none") return Baseline::none;
  if (text == "mtl") return Baseline::mtl;
  if (text == "advl") return Baseline::advl;
  if (text == "padvl") return Baseline::padvl;
  throw std::invalid_argument("unknown baseline '" + std::string(text) + "'");
}

std::string_view to_string(NormPosition norm) { return norm == NormPosition::pre ? "pre" : "post"; }

NormPosition parse_norm_position(std::string_view text) {
  if (text == "pre") return NormPosition::pre;
  if (text == "post") return NormPosition::post;
  throw std::invalid_argument("unknown layer norm position '" + std::string(text) + "'");
}

void ModelConfig::validate() const {
  if (d_model < 1 || heads < 1 || d_ff < 1 || max_len < 2 || vocab_size < Vocab::kNumReserved) {
    throw std::invalid_argument("model dimensions must be positive and the vocabulary non-trivial");
  }
  if (d_model % heads != 0) {
    throw std::invalid_argument("model.d (" + std::to_string(d_model) +
                                ") must be divisible by model.heads (" + std::to_string(heads) + ")");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("model.dropout must lie in [0, 1)");
  if (domains < 1) throw std::invalid_argument("mixing.domains must be >= 1");
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw std::invalid_argument("mixing.epsilon must lie in (0, 1)");
}

Model::Model(const ModelConfig& config) : config_(config) {
  config_.validate();
  Rng rng(config_.seed);
  const std::size_t d = config_.d_model;
  const std::size_t k = config_.domains;
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));

  std::vector<double> table(config_.vocab_size * d);
  for (double& v : table) v = rng.uniform(-bound, bound);
  embedding_ = ad::Tensor::from({config_.vocab_size, d}, std::move(table), true);

  const bool mix_enc = config_.mixes_encoder();
  const bool mix_dec = config_.mixes_decoder();
  for (std::size_t i = 0; i < config_.enc_layers; ++i) {
    encoder_.push_back({LayerNorm(d), LayerNorm(d),
                        MixedAttention(k, mix_enc, d, config_.heads, config_.epsilon, rng),
                        MixedFfn(k, mix_enc, d, config_.d_ff, config_.epsilon, rng)});
  }
  for (std::size_t i = 0; i < config_.dec_layers; ++i) {
    decoder_.push_back({LayerNorm(d), LayerNorm(d), LayerNorm(d),
                        MixedAttention(k, mix_dec, d, config_.heads, config_.epsilon, rng),
                        MixedAttention(k, mix_dec, d, config_.heads, config_.epsilon, rng),
                        MixedFfn(k, mix_dec, d, config_.d_ff, config_.epsilon, rng)});
  }
  enc_final_ = LayerNorm(d);
  dec_final_ = LayerNorm(d);

  std::vector<double> w(d * config_.vocab_size);
  for (double& v : w) v = rng.uniform(-bound, bound);
  out_w_ = ad::Tensor::from({d, config_.vocab_size}, std::move(w), true);
  out_b_ = ad::Tensor::zeros({config_.vocab_size}, true);

  if (config_.baseline != Baseline::none) {
    std::vector<double> hw(d * k);
    for (double& v : hw) v = rng.uniform(-bound, bound);
    baseline_ = ClassifierHead{ad::Tensor::from({d, k}, std::move(hw), true),
                               ad::Tensor::zeros({k}, true)};
  }
  if (config_.wl_head) wl_.emplace(k, d, config_.epsilon, rng);
  register_parameters();
}

void Model::register_parameters() {
  params_.clear();
  params_.push_back({"embed", embedding_});
  auto add_ln = [this](const std::string& name, const LayerNorm& ln) {
    params_.push_back({name + ".gain", ln.gain});
    params_.push_back({name + ".bias", ln.bias});
  };
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    const std::string p = "enc." + std::to_string(i);
    add_ln(p + ".ln1", encoder_[i].ln1);
    add_ln(p + ".ln2", encoder_[i].ln2);
    encoder_[i].self.collect(p + ".self", params_);
    encoder_[i].ffn.collect(p + ".ffn", params_);
  }
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    const std::string p = "dec." + std::to_string(i);
    add_ln(p + ".ln1", decoder_[i].ln1);
    add_ln(p + ".ln2", decoder_[i].ln2);
    add_ln(p + ".ln3", decoder_[i].ln3);
    decoder_[i].self.collect(p + ".self", params_);
    decoder_[i].cross.collect(p + ".cross", params_);
    decoder_[i].ffn.collect(p + ".ffn", params_);
  }
  if (config_.norm == NormPosition::pre) {
    add_ln("enc.final_ln", enc_final_);
    add_ln("dec.final_ln", dec_final_);
  }
  params_.push_back({"out.w", out_w_});
  params_.push_back({"out.b", out_b_});
  if (baseline_) {
    params_.push_back({"head.baseline.w", baseline_->weight});
    params_.push_back({"head.baseline.b", baseline_->bias});
  }
  if (wl_) params_.push_back({"head.wl.r", wl_->weight()});
}

std::size_t Model::assign_matching(std::span<const NamedTensor> source) {
  std::size_t assigned = 0;
  for (auto& dst : params_) {
    for (const auto& src : source) {
      if (src.name == dst.name && src.tensor.shape() == dst.tensor.shape()) {
        auto out = dst.tensor.mutable_data();
        const auto in = src.tensor.data();
        std::copy(in.begin(), in.end(), out.begin());
        ++assigned;
        break;
      }
    }
  }
  return assigned;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

ad::Tensor Model::embed(std::span<const int> ids, std::size_t batch, std::size_t length) const {
  if (length > config_.max_len) {
    throw std::invalid_argument("sequence length " + std::to_string(length) +
                                " exceeds model.max_len " + std::to_string(config_.max_len));
  }
  const std::size_t d = config_.d_model;
  ad::Tensor x = ad::scale(ad::embedding_lookup(embedding_, ids), std::sqrt(static_cast<double>(d)));
  if (!config_.positional) return x;
  std::vector<double> pe(batch * length * d);
  for (std::size_t t = 0; t < length; ++t) {
    const auto row = positional_encoding(t, d);
    for (std::size_t b = 0; b < batch; ++b) std::copy(row.begin(), row.end(), pe.begin() + (b * length + t) * d);
  }
  return ad::add(x, ad::Tensor::from({batch * length, d}, std::move(pe)));
}

EncoderState Model::encode(std::span<const int> src, std::size_t batch, std::size_t length,
                           std::span<const std::uint8_t> mask, ForwardContext& ctx) const {
  if (src.size() != batch * length || mask.size() != src.size()) {
    throw ad::ShapeError("encode: ids/mask do not match batch " + std::to_string(batch) + " x " +
                         std::to_string(length));
  }
  std::vector<std::uint8_t> blocked(batch * length * length);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < length; ++i) {
      for (std::size_t j = 0; j < length; ++j) blocked[(b * length + i) * length + j] = mask[b * length + j] ? 0 : 1;
    }
  }
  const SeqLayout layout{batch, length, mask};
  const double p = config_.dropout;
  ad::Tensor x = embed(src, batch, length);
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    const auto& L = encoder_[i];
    const int li = static_cast<int>(i);
    if (config_.norm == NormPosition::pre) {
      ad::Tensor h = L.ln1(x);
      x = ad::add(x, L.self.forward(h, h, layout, layout, blocked, ctx, "encoder", li, "enc_self", p));
      h = L.ln2(x);
      x = ad::add(x, L.ffn.forward(h, layout, ctx, "encoder", li, "enc_ffn", p));
    } else {
      x = L.ln1(ad::add(x, L.self.forward(x, x, layout, layout, blocked, ctx, "encoder", li, "enc_self", p)));
      x = L.ln2(ad::add(x, L.ffn.forward(x, layout, ctx, "encoder", li, "enc_ffn", p)));
    }
  }
  if (config_.norm == NormPosition::pre) x = enc_final_(x);
  return {x, batch, length, std::vector<std::uint8_t>(mask.begin(), mask.end())};
}

DecoderOutput Model::decode(std::span<const int> tgt_in, std::size_t batch, std::size_t length,
                            std::span<const std::uint8_t> mask, const EncoderState& enc,
                            ForwardContext& ctx) const {
  if (tgt_in.size() != batch * length || mask.size() != tgt_in.size() || enc.batch != batch) {
    throw ad::ShapeError("decode: ids/mask do not match batch " + std::to_string(batch) + " x " +
                         std::to_string(length));
  }
  const std::size_t ls = enc.length;
  std::vector<std::uint8_t> self_blocked(batch * length * length);
  std::vector<std::uint8_t> cross_blocked(batch * length * ls);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < length; ++i) {
      for (std::size_t j = 0; j < length; ++j) {
        self_blocked[(b * length + i) * length + j] = (j > i || !mask[b * length + j]) ? 1 : 0;
      }
      for (std::size_t j = 0; j < ls; ++j) {
        cross_blocked[(b * length + i) * ls + j] = enc.mask[b * ls + j] ? 0 : 1;
      }
    }
  }
  const SeqLayout tgt_layout{batch, length, mask};
  const SeqLayout src_layout{batch, ls, enc.mask};
  const double p = config_.dropout;
  ad::Tensor x = embed(tgt_in, batch, length);
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    const auto& L = decoder_[i];
    const int li = static_cast<int>(i);
    if (config_.norm == NormPosition::pre) {
      ad::Tensor h = L.ln1(x);
      x = ad::add(x, L.self.forward(h, h, tgt_layout, tgt_layout, self_blocked, ctx, "decoder", li, "dec_self", p));
      h = L.ln2(x);
      x = ad::add(x, L.cross.forward(h, enc.states, tgt_layout, src_layout, cross_blocked, ctx, "decoder", li, "dec_cross", p));
      h = L.ln3(x);
      x = ad::add(x, L.ffn.forward(h, tgt_layout, ctx, "decoder", li, "dec_ffn", p));
    } else {
      x = L.ln1(ad::add(x, L.self.forward(x, x, tgt_layout, tgt_layout, self_blocked, ctx, "decoder", li, "dec_self", p)));
      x = L.ln2(ad::add(x, L.cross.forward(x, enc.states, tgt_layout, src_layout, cross_blocked, ctx, "decoder", li, "dec_cross", p)));
      x = L.ln3(ad::add(x, L.ffn.forward(x, tgt_layout, ctx, "decoder", li, "dec_ffn", p)));
    }
  }
  if (config_.norm == NormPosition::pre) x = dec_final_(x);
  ad::Tensor logits = ad::add_bias(ad::matmul(x, out_w_), out_b_);
  return {logits, x, batch, length, std::vector<std::uint8_t>(mask.begin(), mask.end())};
}

ModelOutput Model::forward(const Batch& batch, ForwardContext& ctx) const {
  if (batch.tgt_len < 2) throw std::invalid_argument("target must hold at least BOS and EOS");
  const std::size_t B = batch.size;
  const std::size_t T = batch.tgt_len - 1;
  std::vector<int> tgt_in, labels;
  std::vector<std::uint8_t> in_mask, label_mask;
  tgt_in.reserve(B * T);
  labels.reserve(B * T);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T; ++t) {
      tgt_in.push_back(batch.tgt[b * batch.tgt_len + t]);
      in_mask.push_back(batch.tgt_mask[b * batch.tgt_len + t]);
      labels.push_back(batch.tgt[b * batch.tgt_len + t + 1]);
      label_mask.push_back(batch.tgt_mask[b * batch.tgt_len + t + 1]);
    }
  }
  ModelOutput out;
  out.encoder = encode(batch.src, B, batch.src_len, batch.src_mask, ctx);
  out.decoder = decode(tgt_in, B, T, in_mask, out.encoder, ctx);
  out.labels = std::move(labels);
  out.label_mask = std::move(label_mask);
  return out;
}

}  // namespace domix
