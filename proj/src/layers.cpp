#include "domix/layers.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "domix/rng.hpp"

namespace domix {

std::vector<double> positional_encoding(std::size_t pos, std::size_t d) {
  std::vector<double> pe(d);
  for (std::size_t i = 0; 2 * i < d; ++i) {
    const double angle = static_cast<double>(pos) /
                         std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d));
    pe[2 * i] = std::sin(angle);
    if (2 * i + 1 < d) pe[2 * i + 1] = std::cos(angle);
  }
  return pe;
}

ad::Tensor attention(const ad::Tensor& q, const ad::Tensor& k, const ad::Tensor& v,
                     std::span<const std::uint8_t> blocked, double dropout, Rng* rng) {
  if (q.rank() == 2) {
    ad::Tensor out =
        attention(ad::reshape(q, {1, q.dim(0), q.dim(1)}), ad::reshape(k, {1, k.dim(0), k.dim(1)}),
                  ad::reshape(v, {1, v.dim(0), v.dim(1)}), blocked, dropout, rng);
    return ad::reshape(out, {out.dim(1), out.dim(2)});
  }
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || q.dim(0) != k.dim(0) ||
      k.dim(0) != v.dim(0) || q.dim(2) != k.dim(2) || k.dim(1) != v.dim(1)) {
    throw ad::ShapeError("attention: incompatible shapes q " + ad::shape_str(q.shape()) + ", k " +
                         ad::shape_str(k.shape()) + ", v " + ad::shape_str(v.shape()));
  }
  const std::size_t batch = q.dim(0), lq = q.dim(1), lk = k.dim(1);
  ad::Tensor scores = ad::scale(ad::matmul(q, ad::transpose(k)),
                                1.0 / std::sqrt(static_cast<double>(q.dim(2))));
  if (!blocked.empty()) {
    if (blocked.size() != batch * lq * lk) {
      throw ad::ShapeError("attention: mask has " + std::to_string(blocked.size()) +
                           " entries, expected " + std::to_string(batch * lq * lk));
    }
    for (std::size_t row = 0; row < batch * lq; ++row) {
      bool any_open = false;
      for (std::size_t j = 0; j < lk && !any_open; ++j) any_open = blocked[row * lk + j] == 0;
      if (!any_open) {
        throw std::invalid_argument("attention: query row " + std::to_string(row) +
                                    " has every key masked");
      }
    }
    scores = ad::masked_fill(scores, blocked, -std::numeric_limits<double>::infinity());
  }
  ad::Tensor weights = ad::softmax(scores, -1);
  if (dropout > 0.0 && rng != nullptr) weights = ad::dropout(weights, dropout, *rng);
  return ad::matmul(weights, v);
}

ad::Tensor multi_head(const ad::Tensor& q, const ad::Tensor& k, const ad::Tensor& v,
                      std::span<const HeadProjection> heads, const ad::Tensor& wo,
                      std::span<const std::uint8_t> blocked) {
  std::vector<ad::Tensor> outputs;
  outputs.reserve(heads.size());
  for (const auto& h : heads) {
    outputs.push_back(
        attention(ad::matmul(q, h.wq), ad::matmul(k, h.wk), ad::matmul(v, h.wv), blocked));
  }
  return ad::matmul(ad::concat(outputs, 1), wo);
}

ad::Tensor ffn(const ad::Tensor& x, const ad::Tensor& w1, const ad::Tensor& b1,
               const ad::Tensor& w2, const ad::Tensor& b2) {
  return ad::add_bias(ad::matmul(ad::relu(ad::add_bias(ad::matmul(x, w1), b1)), w2), b2);
}

LayerNorm::LayerNorm(std::size_t d)
    : gain(ad::Tensor::full({d}, 1.0, true)), bias(ad::Tensor::zeros({d}, true)) {}

}  // namespace domix
