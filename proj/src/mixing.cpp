#include "domix/mixing.hpp"

#include <cmath>
#include <stdexcept>

#include "domix/layers.hpp"
#include "domix/rng.hpp"

namespace domix {

namespace {

ad::Tensor uniform_matrix(std::size_t rows, std::size_t cols, double bound, Rng& rng) {
  std::vector<double> values(rows * cols);
  for (double& v : values) v = rng.uniform(-bound, bound);
  return ad::Tensor::from({rows, cols}, std::move(values), true);
}

void check_simplex(std::span<const double> p, std::size_t k) {
  if (p.size() != k) {
    throw std::invalid_argument("proportion vector has " + std::to_string(p.size()) +
                                " entries for " + std::to_string(k) + " domains");
  }
  double total = 0.0;
  for (double v : p) {
    if (v < -1e-6) throw std::invalid_argument("proportion vector has a negative entry");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-6) {
    throw std::invalid_argument("proportion vector sums to " + std::to_string(total) + ", not 1");
  }
}

}  // namespace

std::string_view to_string(MixingScope scope) {
  switch (scope) {
    case MixingScope::none: return "none";
    case MixingScope::encoder: return "encoder";
    case MixingScope::enc_dec: return "enc_dec";
  }
  return "none";
}

std::string_view to_string(DetachMode mode) {
  switch (mode) {
    case DetachMode::detached: return "detached";
    case DetachMode::mtl: return "mtl";
    case DetachMode::advl: return "advl";
    case DetachMode::padvl: return "padvl";
  }
  return "detached";
}

MixingScope parse_mixing_scope(std::string_view text) {
  if (text == "none") return MixingScope::none;
  if (text == "encoder") return MixingScope::encoder;
  if (text == "enc_dec") return MixingScope::enc_dec;
  throw std::invalid_argument("unknown mixing scope '" + std::string(text) + "'");
}

DetachMode parse_detach_mode(std::string_view text) {
  if (text == "detached") return DetachMode::detached;
  if (text == "mtl") return DetachMode::mtl;
  if (text == "advl") return DetachMode::advl;
  if (text == "padvl") return DetachMode::padvl;
  throw std::invalid_argument("unknown detach mode '" + std::string(text) + "'");
}

DomainProportionLayer::DomainProportionLayer(std::size_t domains, std::size_t dim, double epsilon,
                                             Rng& rng)
    : r_(uniform_matrix(domains, dim, 1.0 / std::sqrt(static_cast<double>(dim)), rng)),
      epsilon_(epsilon) {
  if (domains < 1) throw std::invalid_argument("proportion layer needs at least one domain");
  if (!(epsilon > 0.0 && epsilon < 1.0)) {
    throw std::invalid_argument("proportion smoothing must lie in (0, 1)");
  }
}

ad::Tensor DomainProportionLayer::apply(const ad::Tensor& x) const {
  const double k = static_cast<double>(domains());
  ad::Tensor probs = ad::softmax(ad::matmul(x, ad::transpose(r_)), -1);
  return ad::add_scalar(ad::scale(probs, 1.0 - epsilon_), epsilon_ / k);
}

std::vector<double> domain_proportion(std::span<const double> x, const DomainProportionLayer& layer) {
  if (x.size() != layer.dim()) {
    throw ad::ShapeError("domain_proportion: input of " + std::to_string(x.size()) +
                         " entries for layer of dim " + std::to_string(layer.dim()));
  }
  ad::NoGradGuard no_grad;
  ad::Tensor in = ad::Tensor::from({1, x.size()}, std::vector<double>(x.begin(), x.end()));
  const ad::Tensor result = layer.apply(in);
  const auto out = result.data();
  return {out.begin(), out.end()};
}

RoutedProportions proportion_detach_policy(const DomainProportionLayer& layer, const ad::Tensor& x,
                                           DetachMode mode) {
  ad::Tensor input;
  switch (mode) {
    case DetachMode::detached:
      input = ad::stop_gradient(x);
      break;
    case DetachMode::mtl:
      input = x;
      break;
    case DetachMode::advl:
      input = ad::scale_gradient(x, -1.0);
      break;
    case DetachMode::padvl: {
      const std::size_t d = x.shape().back();
      std::vector<double> factors(d, -1.0);
      for (std::size_t j = 0; j < d / 2; ++j) factors[j] = 1.0;
      input = ad::scale_gradient(x, factors);
      break;
    }
  }
  ad::Tensor raw = layer.apply(input);
  return {ad::stop_gradient(raw), raw};
}

MixedLinear::MixedLinear(std::size_t domains, std::size_t in, std::size_t out, Rng& rng) {
  if (domains < 1) throw std::invalid_argument("mixed linear needs at least one domain");
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  for (std::size_t j = 0; j < domains; ++j) {
    weights_.push_back(uniform_matrix(in, out, bound, rng));
    biases_.push_back(ad::Tensor::zeros({out}, true));
  }
}

ad::Tensor MixedLinear::forward(const ad::Tensor& x, const ad::Tensor* proportions) const {
  if (proportions == nullptr) {
    if (domains() != 1) {
      throw std::invalid_argument("mixed linear with " + std::to_string(domains()) +
                                  " domains needs proportions");
    }
    return ad::add_bias(ad::matmul(x, weights_[0]), biases_[0]);
  }
  if (proportions->rank() != 2 || proportions->dim(1) != domains() ||
      proportions->dim(0) != x.numel() / x.shape().back()) {
    throw ad::ShapeError("mixed linear: proportions " + ad::shape_str(proportions->shape()) +
                         " for input " + ad::shape_str(x.shape()) + " and " +
                         std::to_string(domains()) + " domains");
  }
  ad::Tensor total;
  for (std::size_t j = 0; j < domains(); ++j) {
    ad::Tensor term = ad::row_scale(ad::add_bias(ad::matmul(x, weights_[j]), biases_[j]),
                                    ad::slice(*proportions, 1, j, j + 1));
    total = j == 0 ? term : ad::add(total, term);
  }
  return total;
}

void MixedLinear::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  for (std::size_t j = 0; j < domains(); ++j) {
    out.push_back({prefix + ".w" + std::to_string(j), weights_[j]});
    out.push_back({prefix + ".b" + std::to_string(j), biases_[j]});
  }
}

std::vector<double> mixed_apply(std::span<const double> x, const MixedLinear& layer,
                                std::span<const double> p) {
  check_simplex(p, layer.domains());
  if (x.size() != layer.in_dim()) {
    throw ad::ShapeError("mixed_apply: input of " + std::to_string(x.size()) +
                         " entries for layer with input dim " + std::to_string(layer.in_dim()));
  }
  const std::size_t in = layer.in_dim(), out = layer.out_dim();
  std::vector<double> y(out, 0.0);
  for (std::size_t j = 0; j < layer.domains(); ++j) {
    const auto w = layer.weights()[j].data();
    const auto b = layer.biases()[j].data();
    for (std::size_t c = 0; c < out; ++c) {
      double acc = 0.0;
      for (std::size_t r = 0; r < in; ++r) acc += x[r] * w[r * out + c];
      y[c] += p[j] * (acc + b[c]);
    }
  }
  return y;
}

std::vector<double> mixed_apply_weight_order(std::span<const double> x, const MixedLinear& layer,
                                             std::span<const double> p) {
  check_simplex(p, layer.domains());
  if (x.size() != layer.in_dim()) {
    throw ad::ShapeError("mixed_apply: input of " + std::to_string(x.size()) +
                         " entries for layer with input dim " + std::to_string(layer.in_dim()));
  }
  const std::size_t in = layer.in_dim(), out = layer.out_dim();
  std::vector<double> w_mix(in * out, 0.0), b_mix(out, 0.0);
  for (std::size_t j = 0; j < layer.domains(); ++j) {
    const auto w = layer.weights()[j].data();
    const auto b = layer.biases()[j].data();
    for (std::size_t i = 0; i < in * out; ++i) w_mix[i] += p[j] * w[i];
    for (std::size_t c = 0; c < out; ++c) b_mix[c] += p[j] * b[c];
  }
  std::vector<double> y(b_mix);
  for (std::size_t r = 0; r < in; ++r) {
    for (std::size_t c = 0; c < out; ++c) y[c] += x[r] * w_mix[r * out + c];
  }
  return y;
}

namespace {

std::optional<ad::Tensor> route(const std::optional<DomainProportionLayer>& gate,
                                const ad::Tensor& input, const SeqLayout& layout,
                                ForwardContext& ctx, std::string_view stack, int layer,
                                std::string sublayer) {
  if (!gate) return std::nullopt;
  RoutedProportions rp = proportion_detach_policy(*gate, input, ctx.detach);
  if (ctx.records != nullptr) {
    ctx.records->push_back({std::string(stack), layer, std::move(sublayer), rp.raw, layout.batch,
                            layout.length,
                            std::vector<std::uint8_t>(layout.mask.begin(), layout.mask.end())});
  }
  return rp.mixing;
}

const ad::Tensor* ptr(const std::optional<ad::Tensor>& t) { return t ? &*t : nullptr; }

}  // namespace

MixedAttention::MixedAttention(std::size_t domains, bool gated, std::size_t d, std::size_t heads,
                               double epsilon, Rng& rng)
    : heads_(heads),
      q_(gated ? domains : 1, d, d, rng),
      k_(gated ? domains : 1, d, d, rng),
      v_(gated ? domains : 1, d, d, rng),
      o_(gated ? domains : 1, d, d, rng) {
  if (heads == 0 || d % heads != 0) {
    throw std::invalid_argument("model dim " + std::to_string(d) + " is not divisible by " +
                                std::to_string(heads) + " heads");
  }
  if (gated) {
    gate_q_.emplace(domains, d, epsilon, rng);
    gate_k_.emplace(domains, d, epsilon, rng);
    gate_v_.emplace(domains, d, epsilon, rng);
    gate_o_.emplace(domains, d, epsilon, rng);
  }
}

ad::Tensor MixedAttention::forward(const ad::Tensor& q_in, const ad::Tensor& kv_in,
                                   const SeqLayout& q_side, const SeqLayout& kv_side,
                                   std::span<const std::uint8_t> blocked, ForwardContext& ctx,
                                   std::string_view stack, int layer, std::string_view tag,
                                   double dropout) const {
  const std::string t(tag);
  const auto pq = route(gate_q_, q_in, q_side, ctx, stack, layer, t + "_Q");
  const auto pk = route(gate_k_, kv_in, kv_side, ctx, stack, layer, t + "_K");
  const auto pv = route(gate_v_, kv_in, kv_side, ctx, stack, layer, t + "_V");
  const ad::Tensor q = q_.forward(q_in, ptr(pq));
  const ad::Tensor k = k_.forward(kv_in, ptr(pk));
  const ad::Tensor v = v_.forward(kv_in, ptr(pv));

  const std::size_t d = q.dim(1);
  const std::size_t dh = d / heads_;
  Rng* rng = ctx.training ? ctx.rng : nullptr;
  std::vector<ad::Tensor> outputs;
  outputs.reserve(heads_);
  for (std::size_t h = 0; h < heads_; ++h) {
    const ad::Tensor qh = ad::reshape(ad::slice(q, 1, h * dh, (h + 1) * dh), {q_side.batch, q_side.length, dh});
    const ad::Tensor kh = ad::reshape(ad::slice(k, 1, h * dh, (h + 1) * dh), {kv_side.batch, kv_side.length, dh});
    const ad::Tensor vh = ad::reshape(ad::slice(v, 1, h * dh, (h + 1) * dh), {kv_side.batch, kv_side.length, dh});
    const ad::Tensor head = attention(qh, kh, vh, blocked, rng ? dropout : 0.0, rng);
    outputs.push_back(ad::reshape(head, {q_side.batch * q_side.length, dh}));
  }
  const ad::Tensor joined = heads_ == 1 ? outputs[0] : ad::concat(outputs, 1);
  const auto po = route(gate_o_, joined, q_side, ctx, stack, layer, t + "_O");
  return o_.forward(joined, ptr(po));
}

void MixedAttention::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  q_.collect(prefix + ".q", out);
  k_.collect(prefix + ".k", out);
  v_.collect(prefix + ".v", out);
  o_.collect(prefix + ".o", out);
  if (gate_q_) {
    out.push_back({prefix + ".gate_q.r", gate_q_->weight()});
    out.push_back({prefix + ".gate_k.r", gate_k_->weight()});
    out.push_back({prefix + ".gate_v.r", gate_v_->weight()});
    out.push_back({prefix + ".gate_o.r", gate_o_->weight()});
  }
}

MixedFfn::MixedFfn(std::size_t domains, bool gated, std::size_t d, std::size_t d_ff,
                   double epsilon, Rng& rng)
    : first_(gated ? domains : 1, d, d_ff, rng), second_(gated ? domains : 1, d_ff, d, rng) {
  if (gated) gate_.emplace(domains, d, epsilon, rng);
}

ad::Tensor MixedFfn::forward(const ad::Tensor& x, const SeqLayout& layout, ForwardContext& ctx,
                             std::string_view stack, int layer, std::string_view tag,
                             double dropout) const {
  const auto p = route(gate_, x, layout, ctx, stack, layer, std::string(tag));
  ad::Tensor hidden = ad::relu(first_.forward(x, ptr(p)));
  if (ctx.training && ctx.rng != nullptr) hidden = ad::dropout(hidden, dropout, *ctx.rng);
  return second_.forward(hidden, ptr(p));
}

void MixedFfn::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  first_.collect(prefix + ".ff1", out);
  second_.collect(prefix + ".ff2", out);
  if (gate_) out.push_back({prefix + ".gate.r", gate_->weight()});
}

}  // namespace domix
