#pragma once

// Word-level domain mixing: every point-wise projection keeps one weight set
// per domain, and each token blends them with its own domain proportion
// D(x) = (1 - eps) * softmax(R x) + eps / k, recomputed from the input of
// every projection at every layer.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "domix/autodiff.hpp"

namespace domix {

class Rng;

enum class MixingScope { none, encoder, enc_dec };

// How the proportion layers connect to the translation graph. In every mode
// the proportions used for mixing are detached, so L_gen never reaches R.
//   detached: L_mix trains R only.
//   mtl:      L_mix also flows into the proportion layer's input.
//   advl:     as mtl with the input gradient negated.
//   padvl:    first half of the input coordinates as mtl, second half as advl.
enum class DetachMode { detached, mtl, advl, padvl };

std::string_view to_string(MixingScope scope);
std::string_view to_string(DetachMode mode);
MixingScope parse_mixing_scope(std::string_view text);
DetachMode parse_detach_mode(std::string_view text);

struct NamedTensor {
  std::string name;
  ad::Tensor tensor;
};

class DomainProportionLayer {
 public:
  DomainProportionLayer(std::size_t domains, std::size_t dim, double epsilon, Rng& rng);

  // x: [N, d] -> [N, k].
  ad::Tensor apply(const ad::Tensor& x) const;

  std::size_t domains() const { return r_.dim(0); }
  std::size_t dim() const { return r_.dim(1); }
  double epsilon() const { return epsilon_; }
  ad::Tensor& weight() { return r_; }
  const ad::Tensor& weight() const { return r_; }

 private:
  ad::Tensor r_;  // [k, d]
  double epsilon_;
};

// Single-vector form of D(x); no graph is recorded.
std::vector<double> domain_proportion(std::span<const double> x, const DomainProportionLayer& layer);

// Gradient routing of a sublayer input into its proportion layer. `mixing`
// is what the projection consumes; `raw` carries the L_mix gradient path.
struct RoutedProportions {
  ad::Tensor mixing;
  ad::Tensor raw;
};

RoutedProportions proportion_detach_policy(const DomainProportionLayer& layer, const ad::Tensor& x,
                                           DetachMode mode);

class MixedLinear {
 public:
  MixedLinear(std::size_t domains, std::size_t in, std::size_t out, Rng& rng);

  // Output mixing: sum_j p[:, j] * (x W_j + b_j). `proportions` may be null
  // only for a single-domain layer, which then reduces to x W_0 + b_0.
  ad::Tensor forward(const ad::Tensor& x, const ad::Tensor* proportions) const;

  std::size_t domains() const { return weights_.size(); }
  std::size_t in_dim() const { return weights_.front().dim(0); }
  std::size_t out_dim() const { return weights_.front().dim(1); }
  std::vector<ad::Tensor>& weights() { return weights_; }
  std::vector<ad::Tensor>& biases() { return biases_; }
  const std::vector<ad::Tensor>& weights() const { return weights_; }
  const std::vector<ad::Tensor>& biases() const { return biases_; }

  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;

 private:
  std::vector<ad::Tensor> weights_;  // [in, out] each
  std::vector<ad::Tensor> biases_;   // [out] each
};

// sum_j p_j (x^T W_j + b_j). Throws when p is not a simplex vector within 1e-6.
std::vector<double> mixed_apply(std::span<const double> x, const MixedLinear& layer,
                                std::span<const double> p);
// (sum_j p_j W_j)^T x + sum_j p_j b_j; the weight-mixing evaluation order.
std::vector<double> mixed_apply_weight_order(std::span<const double> x, const MixedLinear& layer,
                                             std::span<const double> p);

// Proportions produced by one proportion layer during a forward pass, laid
// out as [batch * length, k] rows with a validity mask per row.
struct ProportionRecord {
  std::string stack;     // "encoder" or "decoder"
  int layer = 0;
  std::string sublayer;  // e.g. enc_self_Q, dec_cross_K, enc_ffn
  ad::Tensor proportions;
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::uint8_t> mask;
};

struct ForwardContext {
  DetachMode detach = DetachMode::detached;
  bool training = false;
  Rng* rng = nullptr;                               // dropout source when training
  std::vector<ProportionRecord>* records = nullptr;  // collect proportions if set
};

struct SeqLayout {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::span<const std::uint8_t> mask;
};

class MixedAttention {
 public:
  // gated=false gives a plain single-domain module regardless of `domains`.
  MixedAttention(std::size_t domains, bool gated, std::size_t d, std::size_t heads, double epsilon,
                 Rng& rng);

  // q_in: [Bq*Lq, d], kv_in: [B*Lk, d]; blocked: B*Lq*Lk flags.
  ad::Tensor forward(const ad::Tensor& q_in, const ad::Tensor& kv_in, const SeqLayout& q_side,
                     const SeqLayout& kv_side, std::span<const std::uint8_t> blocked,
                     ForwardContext& ctx, std::string_view stack, int layer,
                     std::string_view tag, double dropout) const;

  bool gated() const { return gate_q_.has_value(); }
  std::size_t heads() const { return heads_; }
  MixedLinear& q() { return q_; }
  MixedLinear& k() { return k_; }
  MixedLinear& v() { return v_; }
  MixedLinear& o() { return o_; }
  const MixedLinear& q() const { return q_; }
  const MixedLinear& k() const { return k_; }
  const MixedLinear& v() const { return v_; }
  const MixedLinear& o() const { return o_; }
  std::optional<DomainProportionLayer>& gate_q() { return gate_q_; }
  std::optional<DomainProportionLayer>& gate_k() { return gate_k_; }
  std::optional<DomainProportionLayer>& gate_v() { return gate_v_; }
  std::optional<DomainProportionLayer>& gate_o() { return gate_o_; }

  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;

 private:
  std::size_t heads_;
  MixedLinear q_, k_, v_, o_;
  std::optional<DomainProportionLayer> gate_q_, gate_k_, gate_v_, gate_o_;
};

// Two-layer point-wise network; both linears share one proportion computed
// from the FFN input.
class MixedFfn {
 public:
  MixedFfn(std::size_t domains, bool gated, std::size_t d, std::size_t d_ff, double epsilon,
           Rng& rng);

  ad::Tensor forward(const ad::Tensor& x, const SeqLayout& layout, ForwardContext& ctx,
                     std::string_view stack, int layer, std::string_view tag,
                     double dropout) const;

  bool gated() const { return gate_.has_value(); }
  MixedLinear& first() { return first_; }
  MixedLinear& second() { return second_; }
  const MixedLinear& first() const { return first_; }
  const MixedLinear& second() const { return second_; }
  std::optional<DomainProportionLayer>& gate() { return gate_; }

  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;

 private:
  MixedLinear first_, second_;
  std::optional<DomainProportionLayer> gate_;
};

}  // namespace domix
