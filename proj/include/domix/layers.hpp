#pragma once

// Vanilla Transformer building blocks operating on tape tensors. These are
// the single-domain reference path the mixed modules reduce to.

#include <cstdint>
#include <span>
#include <vector>

#include "domix/autodiff.hpp"

namespace domix {

class Rng;

enum class NormPosition { pre, post };

// PE[2i] = sin(pos / 10000^(2i/d)), PE[2i+1] = cos(pos / 10000^(2i/d)).
std::vector<double> positional_encoding(std::size_t pos, std::size_t d);

// Scaled dot-product attention. q: [B, lq, dk] (or [lq, dk]), k: [B, lk, dk],
// v: [B, lk, dv]. `blocked` holds B*lq*lk flags (1 = key hidden from the
// query); empty means nothing is blocked. A query row with every key blocked
// is rejected.
ad::Tensor attention(const ad::Tensor& q, const ad::Tensor& k, const ad::Tensor& v,
                     std::span<const std::uint8_t> blocked, double dropout = 0.0,
                     Rng* rng = nullptr);

struct HeadProjection {
  ad::Tensor wq;  // [d, d/m]
  ad::Tensor wk;
  ad::Tensor wv;
};

// Concat(H_1..H_m) W_O over a single sequence; q: [lq, d], k/v: [lk, d].
ad::Tensor multi_head(const ad::Tensor& q, const ad::Tensor& k, const ad::Tensor& v,
                      std::span<const HeadProjection> heads, const ad::Tensor& wo,
                      std::span<const std::uint8_t> blocked);

// max(0, x W1 + b1) W2 + b2, row by row.
ad::Tensor ffn(const ad::Tensor& x, const ad::Tensor& w1, const ad::Tensor& b1,
               const ad::Tensor& w2, const ad::Tensor& b2);

struct LayerNorm {
  ad::Tensor gain;
  ad::Tensor bias;

  explicit LayerNorm(std::size_t d = 1);
  ad::Tensor operator()(const ad::Tensor& x) const { return ad::layer_norm(x, gain, bias); }
};

}  // namespace domix
