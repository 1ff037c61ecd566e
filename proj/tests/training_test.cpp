#include <cmath>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "domix/eval.hpp"
#include "domix/rng.hpp"
#include "domix/training.hpp"
#include "test_support.hpp"

namespace domix {
namespace {

ad::Tensor rows_tensor(std::size_t n, std::size_t k, std::vector<double> values, bool grad = false) {
  return ad::Tensor::from({n, k}, std::move(values), grad);
}

ProportionRecord make_record(ad::Tensor p, std::size_t batch, std::size_t length,
                             std::vector<std::uint8_t> mask) {
  ProportionRecord r;
  r.stack = "encoder";
  r.sublayer = "enc_ffn";
  r.proportions = std::move(p);
  r.batch = batch;
  r.length = length;
  r.mask = std::move(mask);
  return r;
}

// ---- label smoothing ----------------------------------------------------

TEST(LabelSmoothing, TwoClassHandValue) {
  const auto logits = rows_tensor(1, 2, {std::log(3.0), 0.0});
  const std::vector<int> t{0};
  const std::vector<std::uint8_t> m{1};
  const double expected = 0.95 * std::log(4.0 / 3.0) + 0.05 * std::log(4.0);
  EXPECT_NEAR(label_smoothed_ce(logits, t, m, 0.1).item(), expected, 1e-12);
}

TEST(LabelSmoothing, UniformLogitsGiveLogV) {
  for (std::size_t V : {2u, 5u, 17u}) {
    const auto logits = rows_tensor(3, V, std::vector<double>(3 * V, 0.7));
    const std::vector<int> t{0, 1, 1};
    const std::vector<std::uint8_t> m{1, 1, 1};
    for (double s : {0.0, 0.1, 0.5}) {
      EXPECT_NEAR(label_smoothed_ce(logits, t, m, s).item(), std::log(static_cast<double>(V)), 1e-12);
    }
  }
}

TEST(LabelSmoothing, BoundedBelowByTargetEntropy) {
  Rng rng(3);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t V = 2 + rng.below(10);
    const double s = rng.uniform(0.0, 0.5);
    const auto logits = testing::random_tensor(rng, {1, V}, false, -8.0, 8.0);
    const std::vector<int> t{static_cast<int>(rng.below(V))};
    const std::vector<std::uint8_t> m{1};
    const double hi = 1.0 - s + s / static_cast<double>(V), lo = s / static_cast<double>(V);
    double entropy = -hi * std::log(hi);
    if (lo > 0.0) entropy -= static_cast<double>(V - 1) * lo * std::log(lo);
    EXPECT_GE(label_smoothed_ce(logits, t, m, s).item(), entropy - 1e-12);
  }
}

TEST(LabelSmoothing, InvariantToRowShift) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(5), V = 2 + rng.below(8);
    auto values = testing::random_values(rng, n * V, -3.0, 3.0);
    auto shifted = values;
    for (std::size_t r = 0; r < n; ++r) {
      const double c = rng.uniform(-50.0, 50.0);
      for (std::size_t j = 0; j < V; ++j) shifted[r * V + j] += c;
    }
    std::vector<int> t(n);
    for (int& x : t) x = static_cast<int>(rng.below(V));
    const std::vector<std::uint8_t> m(n, 1);
    EXPECT_NEAR(label_smoothed_ce(rows_tensor(n, V, values), t, m, 0.1).item(),
                label_smoothed_ce(rows_tensor(n, V, shifted), t, m, 0.1).item(), 1e-10);
  }
}

TEST(LabelSmoothing, PadRowsIgnoredAndAllPadThrows) {
  const auto logits = rows_tensor(2, 2, {std::log(3.0), 0.0, 40.0, -40.0});
  const std::vector<int> t{0, 1};
  EXPECT_NEAR(label_smoothed_ce(logits, t, std::vector<std::uint8_t>{1, 0}, 0.0).item(), std::log(4.0 / 3.0),
              1e-12);
  EXPECT_THROW(label_smoothed_ce(logits, t, std::vector<std::uint8_t>{0, 0}, 0.1), std::invalid_argument);
}

// ---- mixing loss --------------------------------------------------------

TEST(MixLoss, UniformProportionsGiveLog2) {
  const auto rec = make_record(rows_tensor(3, 2, {0.5, 0.5, 0.5, 0.5, 0.5, 0.5}), 1, 3, {1, 1, 1});
  const std::vector<ProportionRecord> recs{rec};
  const MixLoss m = mix_loss(recs, std::vector<int>{1}, 2);
  EXPECT_NEAR(m.loss.item(), std::log(2.0), 1e-12);
  EXPECT_EQ(m.count, 3u);
  EXPECT_NEAR(m.per_domain[1], std::log(2.0), 1e-12);
}

TEST(MixLoss, SaturatedWrongDomainHitsFloor) {
  // eps = 0.05 over k = 2: the losing domain keeps eps / k.
  const auto rec = make_record(rows_tensor(1, 2, {0.975, 0.025}), 1, 1, {1});
  const std::vector<ProportionRecord> recs{rec};
  EXPECT_NEAR(mix_loss(recs, std::vector<int>{1}, 2).loss.item(), -std::log(0.025), 1e-12);
}

TEST(MixLoss, MeanOverRecordsAndLabelsPerBatchRow) {
  // Two sentences of length 2, second token of the first is padding.
  const auto a = make_record(rows_tensor(4, 2, {0.9, 0.1, 0.2, 0.8, 0.3, 0.7, 0.6, 0.4}), 2, 2, {1, 0, 1, 1});
  const auto b = make_record(rows_tensor(4, 2, {0.5, 0.5, 0.5, 0.5, 0.1, 0.9, 0.5, 0.5}), 2, 2, {1, 1, 1, 0});
  const std::vector<ProportionRecord> recs{a, b};
  const std::vector<int> dom{0, 1};
  const double sum = -(std::log(0.9) + std::log(0.7) + std::log(0.4) + std::log(0.5) + std::log(0.5) +
                       std::log(0.9));
  const MixLoss mean = mix_loss(recs, dom, 2);
  EXPECT_EQ(mean.count, 6u);
  EXPECT_NEAR(mean.loss.item(), sum / 6.0, 1e-12);
  EXPECT_NEAR(mix_loss(recs, dom, 2, true).loss.item(), sum, 1e-12);
  EXPECT_NEAR(mean.per_domain[0], -(std::log(0.9) + std::log(0.5) + std::log(0.5)) / 3.0, 1e-12);
}

TEST(MixLoss, RejectsBadLabelsAndShapes) {
  const auto rec = make_record(rows_tensor(1, 2, {0.5, 0.5}), 1, 1, {1});
  const std::vector<ProportionRecord> recs{rec};
  EXPECT_THROW(mix_loss(recs, std::vector<int>{2}, 2), std::invalid_argument);
  EXPECT_THROW(mix_loss(recs, std::vector<int>{-1}, 2), std::invalid_argument);
  EXPECT_THROW(mix_loss(recs, std::vector<int>{0, 1}, 2), std::invalid_argument);
  EXPECT_THROW(mix_loss(recs, std::vector<int>{0}, 3), ad::ShapeError);
  const auto pads = make_record(rows_tensor(1, 2, {0.5, 0.5}), 1, 1, {0});
  const std::vector<ProportionRecord> empty{pads};
  EXPECT_THROW(mix_loss(empty, std::vector<int>{0}, 2), std::invalid_argument);
}

TEST(MixLoss, GradientMatchesDifferences) {
  Rng rng(8);
  auto raw = testing::random_tensor(rng, {6, 3}, true, 0.1, 1.0);
  testing::expect_gradient(raw, [&] {
    const auto rec = make_record(raw, 2, 3, {1, 1, 0, 1, 1, 1});
    const std::vector<ProportionRecord> recs{rec};
    return mix_loss(recs, std::vector<int>{2, 0}, 3).loss;
  });
}

// ---- word-level weighting -----------------------------------------------

TEST(WlWeighting, ZeroBetaIsPlainLoss) {
  Rng rng(5);
  const auto logits = testing::random_tensor(rng, {4, 6}, false);
  const std::vector<int> t{1, 2, 3, 0};
  const std::vector<std::uint8_t> m{1, 1, 0, 1};
  const std::vector<double> zero(4, 0.0), one(4, 1.0);
  const double plain = label_smoothed_ce(logits, t, m, 0.1).item();
  EXPECT_NEAR(wl_weighted_gen_loss(logits, t, m, zero, 0.1).item(), plain, 1e-12);
  EXPECT_NEAR(wl_weighted_gen_loss(logits, t, m, one, 0.1).item(), 2.0 * plain, 1e-12);
}

TEST(WlWeighting, MixedBetaTwoTokens) {
  // CE of token 0 is ln 4/3 and of token 1 is ln 4 (no smoothing).
  const auto logits = rows_tensor(2, 2, {std::log(3.0), 0.0, std::log(3.0), 0.0});
  const std::vector<int> t{0, 1};
  const std::vector<std::uint8_t> m{1, 1};
  const std::vector<double> beta{0.5, 0.2};
  const double expected = (1.5 * std::log(4.0 / 3.0) + 1.2 * std::log(4.0)) / 2.0;
  EXPECT_NEAR(wl_weighted_gen_loss(logits, t, m, beta, 0.0).item(), expected, 1e-12);
  EXPECT_THROW(wl_weighted_gen_loss(logits, t, m, std::vector<double>{0.5}, 0.0), ad::ShapeError);
}

// ---- baseline heads -----------------------------------------------------

EncoderState toy_encoder(Rng& rng, std::size_t B, std::size_t L, std::size_t d) {
  EncoderState e;
  e.batch = B;
  e.length = L;
  e.states = testing::random_tensor(rng, {B * L, d});
  e.mask.assign(B * L, 1);
  e.mask[L - 1] = 0;
  return e;
}

TEST(BaselineHead, ZeroHeadGivesLogK) {
  Rng rng(6);
  const auto enc = toy_encoder(rng, 2, 3, 4);
  for (std::size_t k : {2u, 3u, 5u}) {
    ClassifierHead head{ad::Tensor::zeros({4, k}), ad::Tensor::zeros({k})};
    const std::vector<int> dom{0, 1};
    EXPECT_NEAR(baseline_head_loss(enc, dom, Baseline::mtl, head).item(), std::log(static_cast<double>(k)),
                1e-12);
  }
}

std::vector<double> encoder_grad(const EncoderState& enc, Baseline mode, const ClassifierHead& head) {
  ad::Tensor s = enc.states;
  s.zero_grad();
  ad::backward(baseline_head_loss(enc, std::vector<int>{1, 0}, mode, head));
  return {s.grad().begin(), s.grad().end()};
}

TEST(BaselineHead, GradientRoutingPerMode) {
  Rng rng(7);
  const std::size_t d = 6;
  const auto enc = toy_encoder(rng, 2, 3, d);
  ClassifierHead head{testing::random_tensor(rng, {d, 2}), testing::random_tensor(rng, {2})};
  const auto mtl = encoder_grad(enc, Baseline::mtl, head);
  const auto advl = encoder_grad(enc, Baseline::advl, head);
  const auto padvl = encoder_grad(enc, Baseline::padvl, head);
  double mag = 0.0;
  for (std::size_t i = 0; i < mtl.size(); ++i) {
    mag = std::max(mag, std::abs(mtl[i]));
    EXPECT_DOUBLE_EQ(advl[i], -mtl[i]);
    const bool first_half = i % d < d / 2;
    EXPECT_DOUBLE_EQ(padvl[i], first_half ? mtl[i] : -mtl[i]);
  }
  EXPECT_GT(mag, 0.0);
  // Padding positions take no part in the pooled vector.
  for (std::size_t c = 0; c < d; ++c) EXPECT_EQ(mtl[2 * d + c], 0.0);
  EXPECT_THROW(baseline_head_loss(enc, std::vector<int>{0, 1}, Baseline::none, head), std::invalid_argument);
}

TEST(BaselineHead, HeadGradientMatchesDifferences) {
  Rng rng(9);
  const auto enc = toy_encoder(rng, 2, 3, 4);
  ClassifierHead head{testing::random_tensor(rng, {4, 3}), testing::random_tensor(rng, {3})};
  testing::expect_gradient(head.weight, [&] {
    return baseline_head_loss(enc, std::vector<int>{2, 0}, Baseline::padvl, head);
  });
}

// ---- schedule -------------------------------------------------------------

TEST(LrSchedule, WarmupThenInverseSqrt) {
  TrainConfig c;
  c.lr_peak = 5e-4;
  c.warmup_steps = 4000;
  c.warmup_init_lr = 1e-7;
  EXPECT_NEAR(lr_schedule(4000, c), 5e-4, 1e-18);
  EXPECT_NEAR(lr_schedule(16000, c), 2.5e-4, 1e-18);
  EXPECT_NEAR(lr_schedule(1, c), 1e-7 + (5e-4 - 1e-7) / 4000.0, 1e-18);
  for (std::size_t s = 1; s < 4000; s += 37) EXPECT_LT(lr_schedule(s, c), lr_schedule(s + 1, c));
  for (std::size_t s = 4000; s < 40000; s += 911) EXPECT_GT(lr_schedule(s, c), lr_schedule(s + 1, c));
  EXPECT_THROW(lr_schedule(0, c), std::invalid_argument);
}

// ---- optimizer --------------------------------------------------------------

void set_gradient(ad::Tensor w, std::span<const double> g) {
  w.zero_grad();
  ad::backward(ad::sum(ad::mul(w, ad::Tensor::from(w.shape(), std::vector<double>(g.begin(), g.end())))));
}

TEST(Adam, MatchesScalarOracle) {
  Rng rng(10);
  const AdamConfig cfg{0.9, 0.98, 1e-8, 1e-4};
  auto w = ad::Tensor::from({3}, {0.3, -1.2, 2.0}, true);
  const std::vector<NamedTensor> params{{"w", w}};
  OptimizerState state;
  std::vector<double> x{0.3, -1.2, 2.0}, m(3, 0.0), v(3, 0.0);
  for (int t = 1; t <= 100; ++t) {
    const auto g = testing::random_values(rng, 3, -2.0, 2.0);
    const double lr = 1e-3 * (1.0 + 0.01 * t);
    set_gradient(w, g);
    adam_step(params, state, lr, cfg);
    for (std::size_t j = 0; j < 3; ++j) {
      const double gj = g[j] + cfg.weight_decay * x[j];
      m[j] = cfg.beta1 * m[j] + (1 - cfg.beta1) * gj;
      v[j] = cfg.beta2 * v[j] + (1 - cfg.beta2) * gj * gj;
      const double mh = m[j] / (1 - std::pow(cfg.beta1, t)), vh = v[j] / (1 - std::pow(cfg.beta2, t));
      x[j] -= lr * mh / (std::sqrt(vh) + cfg.eps);
    }
    for (std::size_t j = 0; j < 3; ++j) ASSERT_NEAR(w.data()[j], x[j], 1e-12) << "step " << t;
  }
  EXPECT_EQ(state.step, 100u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  auto w = ad::Tensor::from({2}, {1.0, 1.0}, true);
  const std::vector<NamedTensor> params{{"w", w}};
  OptimizerState state;
  set_gradient(w, std::vector<double>{0.5, -3.0});
  adam_step(params, state, 0.01, AdamConfig{0.9, 0.98, 1e-8, 0.0});
  // Bias correction makes the first update lr * g / (|g| + eps).
  EXPECT_NEAR(w.data()[0], 1.0 - 0.01 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_NEAR(w.data()[1], 1.0 + 0.01 * 3.0 / (3.0 + 1e-8), 1e-15);
}

TEST(Adam, DecayActsWithoutGradient) {
  auto w = ad::Tensor::from({2}, {2.0, -2.0}, true);
  const std::vector<NamedTensor> params{{"w", w}};
  OptimizerState state;
  adam_step(params, state, 0.1, AdamConfig{0.9, 0.98, 1e-8, 0.5});
  EXPECT_LT(w.data()[0], 2.0);
  EXPECT_GT(w.data()[1], -2.0);
  auto still = ad::Tensor::from({1}, {2.0}, true);
  OptimizerState fresh;
  const std::vector<NamedTensor> one{{"s", still}};
  adam_step(one, fresh, 0.1, AdamConfig{0.9, 0.98, 1e-8, 0.0});
  EXPECT_EQ(still.data()[0], 2.0);
}

TEST(Adam, RejectsMismatchedState) {
  auto w = ad::Tensor::from({2}, {1.0, 1.0}, true);
  OptimizerState state;
  state.m.assign(2, std::vector<double>(2, 0.0));
  state.v.assign(2, std::vector<double>(2, 0.0));
  const std::vector<NamedTensor> params{{"w", w}};
  EXPECT_THROW(adam_step(params, state, 0.1, AdamConfig{}), std::invalid_argument);
}

TEST(RoundToF32, RoundsParametersAndMoments) {
  auto w = ad::Tensor::from({1}, {0.1}, true);
  OptimizerState state;
  state.m = {{1.0 / 3.0}};
  state.v = {{2.0 / 3.0}};
  const std::vector<NamedTensor> params{{"w", w}};
  round_to_f32(params, &state);
  EXPECT_EQ(w.data()[0], static_cast<double>(0.1f));
  EXPECT_EQ(state.m[0][0], static_cast<double>(1.0f / 3.0f));
  EXPECT_EQ(state.v[0][0], static_cast<double>(2.0f / 3.0f));
}

// ---- full loss ----------------------------------------------------------

Batch small_batch(Rng& rng, std::size_t V, int domains, std::size_t n = 5) {
  return encode_batch(testing::random_examples(rng, n, V, 4, 4, domains), 6).trimmed();
}

TEST(ComputeLosses, TotalIsSumOfTerms) {
  Rng rng(11);
  for (bool wl : {false, true}) {
    for (Baseline base : {Baseline::none, Baseline::advl}) {
      ModelConfig c = testing::tiny_config(12, MixingScope::enc_dec, 2);
      c.wl_head = wl;
      c.baseline = base;
      Model model(c);
      const Batch batch = small_batch(rng, 12, 2);
      TrainConfig tc;
      const Losses L = compute_losses(model, batch, tc);
      const auto& v = L.values;
      EXPECT_NEAR(v.total, v.gen + v.mix + v.aux, 1e-12);
      EXPECT_GT(v.mix, 0.0);
      EXPECT_EQ(L.aux.defined(), wl || base != Baseline::none);
      if (wl) {
        EXPECT_GT(v.beta_mean, 0.0);
        EXPECT_LT(v.beta_mean, 1.0);
      }
    }
  }
}

TEST(ComputeLosses, MixLossCanBeDisabled) {
  Rng rng(12);
  Model model(testing::tiny_config(12, MixingScope::encoder, 2));
  const Batch batch = small_batch(rng, 12, 2);
  TrainConfig tc;
  tc.use_mix_loss = false;
  const Losses L = compute_losses(model, batch, tc);
  EXPECT_GT(L.values.mix, 0.0);
  EXPECT_DOUBLE_EQ(L.values.total, L.values.gen);
}

TEST(ComputeLosses, VanillaHasNoMixTerm) {
  Rng rng(13);
  Model model(testing::tiny_config(12, MixingScope::none, 1));
  const Losses L = compute_losses(model, small_batch(rng, 12, 1), TrainConfig{});
  EXPECT_FALSE(L.mix.defined());
  EXPECT_EQ(L.values.mix, 0.0);
  EXPECT_DOUBLE_EQ(L.values.total, L.values.gen);
}

struct GradCase {
  const char* name;
  MixingScope scope;
  DetachMode detach;
  Baseline baseline;
  bool wl;
  NormPosition norm;
};

class FullGradient : public ::testing::TestWithParam<GradCase> {};

TEST_P(FullGradient, MatchesCentralDifferences) {
  const GradCase& g = GetParam();
  ModelConfig c = testing::tiny_config(9, g.scope, 2, g.norm);
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.baseline = g.baseline;
  c.wl_head = g.wl;
  Model model(c);
  Rng rng(14);
  const Batch batch = encode_batch(testing::random_examples(rng, 3, 9, 3, 3, 2), 6).trimmed();
  TrainConfig tc;
  tc.detach = g.detach;
  tc.precision = Precision::f64;
  const auto report = check_gradients(model.parameters(), [&] { return compute_losses(model, batch, tc).total; });
  EXPECT_TRUE(report.passed) << report.max_rel_error;
  for (const auto& e : report.entries) EXPECT_LT(e.max_rel_error, 1e-5) << e.name;
}

INSTANTIATE_TEST_SUITE_P(
    Variants, FullGradient,
    ::testing::Values(GradCase{"enc_dec_detached", MixingScope::enc_dec, DetachMode::detached, Baseline::none, false,
                               NormPosition::pre},
                      GradCase{"encoder_mtl_post", MixingScope::encoder, DetachMode::mtl, Baseline::none, false,
                               NormPosition::post},
                      GradCase{"encoder_advl", MixingScope::encoder, DetachMode::advl, Baseline::none, false,
                               NormPosition::pre},
                      GradCase{"enc_dec_padvl", MixingScope::enc_dec, DetachMode::padvl, Baseline::none, false,
                               NormPosition::pre},
                      GradCase{"wl_head", MixingScope::encoder, DetachMode::detached, Baseline::none, true,
                               NormPosition::pre},
                      GradCase{"baseline_padvl", MixingScope::none, DetachMode::detached, Baseline::padvl, false,
                               NormPosition::pre}),
    [](const auto& info) { return std::string(info.param.name); });

TEST(GradCheck, DetectsWrongGradient) {
  auto w = ad::Tensor::from({2}, {0.4, -0.3}, true);
  const std::vector<NamedTensor> params{{"w", w}};
  // scale_gradient is replayed, so the surrogate still checks out.
  const auto loss = [&] { return ad::sum(ad::mul(ad::scale_gradient(w, 2.0), w)); };
  EXPECT_TRUE(check_gradients(params, loss).passed);
  // A broken backward rule does not.
  ad::debug::inject_fault("mul", 2.0);
  const auto report = check_gradients(params, loss);
  ad::debug::inject_fault("", 1.0);
  EXPECT_FALSE(report.passed);
  EXPECT_GT(report.max_rel_error, 0.1);
}

TEST(DetachContract, HoldsForEveryMode) {
  Rng rng(15);
  Model model(testing::tiny_config(12, MixingScope::enc_dec, 2));
  const Batch batch = small_batch(rng, 12, 2);
  for (DetachMode mode : {DetachMode::detached, DetachMode::mtl, DetachMode::advl, DetachMode::padvl}) {
    TrainConfig tc;
    tc.detach = mode;
    const DetachReport r = check_detach_contract(model, batch, tc);
    EXPECT_TRUE(r.holds) << to_string(mode);
    EXPECT_EQ(r.max_gen_grad_on_gates, 0.0);
    if (mode == DetachMode::detached) {
      EXPECT_EQ(r.max_mix_grad_on_transformer, 0.0);
    } else {
      EXPECT_GT(r.max_mix_grad_on_transformer, 0.0) << to_string(mode);
    }
  }
}

TEST(GateNames, Recognized) {
  EXPECT_TRUE(is_gate_parameter("enc.0.self.gate_q.r"));
  EXPECT_TRUE(is_gate_parameter("dec.1.ffn.gate.r"));
  EXPECT_FALSE(is_gate_parameter("head.wl.r"));
  EXPECT_FALSE(is_gate_parameter("enc.0.self.q.w1"));
  EXPECT_FALSE(is_gate_parameter("embed"));
}

// ---- loop -----------------------------------------------------------------

std::vector<BitextExample> copy_data(std::size_t n, std::size_t V, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<BitextExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    BitextExample ex;
    const std::size_t len = 2 + rng.below(3);
    for (std::size_t t = 0; t < len; ++t) ex.src.push_back(Vocab::kNumReserved + static_cast<int>(rng.below(V - 4)));
    ex.tgt = ex.src;
    out.push_back(std::move(ex));
  }
  return out;
}

TEST(Train, LearnsCopyTask) {
  ModelConfig c = testing::tiny_config(10, MixingScope::none, 1);
  c.d_model = 16;
  c.d_ff = 32;
  c.enc_layers = 1;
  c.dec_layers = 1;
  Model model(c);
  const auto data = copy_data(50, 10, 21);
  TrainConfig tc;
  tc.lr_peak = 1e-2;
  tc.warmup_steps = 20;
  tc.label_smoothing = 0.0;
  tc.weight_decay = 0.0;
  tc.max_steps = 200;
  tc.batch_size = 10;
  TrainState state;
  const double before = evaluate_nll(model, data).perplexity();
  const TrainResult r = train(model, data, tc, state);
  EXPECT_EQ(r.steps, 200u);
  EXPECT_EQ(state.step, 200u);
  const double after = evaluate_nll(model, data).perplexity();
  EXPECT_LT(after, 1.5) << "before " << before;
}

std::string metrics_of(const TrainConfig& tc, std::size_t* checkpoints = nullptr) {
  ModelConfig c = testing::tiny_config(12, MixingScope::enc_dec, 2);
  c.dropout = 0.1;
  Model model(c);
  Rng rng(16);
  const auto data = testing::random_examples(rng, 20, 12, 4, 4, 2);
  std::ostringstream out;
  TrainHooks hooks;
  hooks.metrics = &out;
  hooks.checkpoint = [&](const Model&, const TrainState&) {
    if (checkpoints) ++*checkpoints;
  };
  TrainState state;
  train(model, data, tc, state, hooks);
  return out.str();
}

TEST(Train, MetricsAreDeterministic) {
  TrainConfig tc;
  tc.max_steps = 7;
  tc.batch_size = 6;
  tc.warmup_steps = 3;
  tc.checkpoint_every = 3;
  tc.log_elapsed = false;
  std::size_t saved = 0;
  const std::string a = metrics_of(tc, &saved);
  EXPECT_EQ(a, metrics_of(tc));
  EXPECT_EQ(saved, 3u);  // steps 3, 6 and the last one
  std::istringstream lines(a);
  std::string line;
  std::size_t count = 0;
  while (std::getline(lines, line)) {
    ++count;
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("step").get<std::size_t>(), count);
    EXPECT_NEAR(j.at("L_total").get<double>(), j.at("L_gen").get<double>() + j.at("L_mix").get<double>(), 1e-9);
    EXPECT_EQ(j.at("elapsed_ms").get<long>(), 0);
  }
  EXPECT_EQ(count, 7u);
  tc.seed = 2;
  EXPECT_NE(a, metrics_of(tc));
}

TEST(Train, AbortsOnNonFiniteLoss) {
  Model model(testing::tiny_config(12, MixingScope::encoder, 2));
  for (double& x : model.embedding().mutable_data()) x = std::nan("");
  Rng rng(17);
  const auto data = testing::random_examples(rng, 4, 12, 3, 3, 2);
  TrainConfig tc;
  tc.max_steps = 3;
  TrainState state;
  try {
    train(model, data, tc, state);
    FAIL() << "expected an abort";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite loss at step 1"), std::string::npos) << e.what();
  }
  EXPECT_EQ(state.step, 0u);
}

TEST(TrainConfig, RejectsInvalidValues) {
  auto bad = [](auto edit) {
    TrainConfig c;
    edit(c);
    return c;
  };
  EXPECT_THROW(bad([](TrainConfig& c) { c.lr_peak = 0.0; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](TrainConfig& c) { c.warmup_steps = 0; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](TrainConfig& c) { c.beta2 = 1.0; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](TrainConfig& c) { c.label_smoothing = 1.0; }).validate(), std::invalid_argument);
  EXPECT_THROW(bad([](TrainConfig& c) { c.batch_size = 0; }).validate(), std::invalid_argument);
  EXPECT_NO_THROW(TrainConfig{}.validate());
  EXPECT_EQ(parse_precision("f32"), Precision::f32);
  EXPECT_THROW(parse_precision("bf16"), std::invalid_argument);
}

}  // namespace
}  // namespace domix
