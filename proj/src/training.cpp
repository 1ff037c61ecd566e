#include "domix/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "domix/rng.hpp"

namespace domix {

namespace {

constexpr std::uint64_t kDropoutStream = 1ULL << 62;

ad::Tensor mask_tensor(std::span<const std::uint8_t> mask) {
  std::vector<double> w(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) w[i] = mask[i] ? 1.0 : 0.0;
  return ad::Tensor::from({mask.size()}, std::move(w));
}

std::size_t count_valid(std::span<const std::uint8_t> mask) {
  return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](auto m) { return m != 0; }));
}

std::vector<int> row_domains(std::span<const int> domains, std::size_t length, std::size_t rows) {
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) out[r] = domains[r / length];
  return out;
}

ad::Tensor accumulate(const ad::Tensor& acc, const ad::Tensor& term) {
  return acc.defined() ? ad::add(acc, term) : term;
}

}  // namespace

std::string_view to_string(Precision precision) {
  return precision == Precision::f32 ? "f32" : "f64";
}

Precision parse_precision(std::string_view text) {
  if (text == "f32") return Precision::f32;
  if (text == "f64") return Precision::f64;
  throw std::invalid_argument("unknown precision '" + std::string(text) + "' (expected f32 or f64)");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("train config: " + what); };
  if (!(lr_peak > 0.0)) fail("lr_peak must be positive");
  if (warmup_steps < 1) fail("warmup_steps must be >= 1");
  if (warmup_init_lr < 0.0) fail("warmup_init_lr must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (weight_decay < 0.0) fail("weight_decay must be non-negative");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) fail("label_smoothing must lie in [0, 1)");
  if (batch_size == 0) fail("batch_size must be positive");
}

double lr_schedule(std::size_t step, const TrainConfig& config) {
  if (step < 1) throw std::invalid_argument("lr_schedule: step must be >= 1");
  const double warmup = static_cast<double>(config.warmup_steps);
  const double s = static_cast<double>(step);
  if (step < config.warmup_steps) {
    return config.warmup_init_lr + (config.lr_peak - config.warmup_init_lr) * s / warmup;
  }
  return config.lr_peak * std::sqrt(warmup / s);
}

// ---- losses -----------------------------------------------------------------

ad::Tensor smoothed_ce_rows(const ad::Tensor& logits, std::span<const int> targets, double smoothing) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw ad::ShapeError("smoothed_ce_rows: logits " + ad::shape_str(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  const ad::Tensor logp = ad::log_softmax(logits);
  ad::Tensor nll = ad::scale(ad::pick(logp, targets), -1.0);
  if (smoothing == 0.0) return nll;
  ad::Tensor uniform = ad::scale(ad::mean_last(logp), -1.0);
  return ad::add(ad::scale(nll, 1.0 - smoothing), ad::scale(uniform, smoothing));
}

ad::Tensor label_smoothed_ce(const ad::Tensor& logits, std::span<const int> targets,
                             std::span<const std::uint8_t> mask, double smoothing) {
  if (mask.size() != targets.size()) throw ad::ShapeError("label_smoothed_ce: mask size mismatch");
  const std::size_t n = count_valid(mask);
  if (n == 0) throw std::invalid_argument("label_smoothed_ce: every row is padding");
  ad::Tensor rows = smoothed_ce_rows(logits, targets, smoothing);
  return ad::scale(ad::sum(ad::mul(rows, mask_tensor(mask))), 1.0 / static_cast<double>(n));
}

ad::Tensor wl_weighted_gen_loss(const ad::Tensor& logits, std::span<const int> targets,
                                std::span<const std::uint8_t> mask, std::span<const double> beta,
                                double smoothing) {
  if (mask.size() != targets.size() || beta.size() != targets.size()) {
    throw ad::ShapeError("wl_weighted_gen_loss: mask/beta size mismatch");
  }
  const std::size_t n = count_valid(mask);
  if (n == 0) throw std::invalid_argument("wl_weighted_gen_loss: every row is padding");
  std::vector<double> w(mask.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = mask[i] ? 1.0 + beta[i] : 0.0;
  ad::Tensor rows = smoothed_ce_rows(logits, targets, smoothing);
  const std::size_t rows_n = w.size();
  ad::Tensor weights = ad::Tensor::from({rows_n}, std::move(w));
  return ad::scale(ad::sum(ad::mul(rows, weights)), 1.0 / static_cast<double>(n));
}

MixLoss mix_loss(std::span<const ProportionRecord> records, std::span<const int> domains,
                 std::size_t num_domains, bool sum) {
  MixLoss out;
  std::vector<double> dom_sum(num_domains, 0.0);
  std::vector<std::size_t> dom_count(num_domains, 0);
  ad::Tensor acc;
  for (const auto& rec : records) {
    if (rec.batch != domains.size()) {
      throw std::invalid_argument("mix_loss: record " + rec.sublayer + " has batch " +
                                  std::to_string(rec.batch) + ", labels cover " +
                                  std::to_string(domains.size()));
    }
    if (rec.proportions.dim(1) != num_domains) {
      throw ad::ShapeError("mix_loss: record " + rec.sublayer + " has " +
                           std::to_string(rec.proportions.dim(1)) + " domains, expected " +
                           std::to_string(num_domains));
    }
    const std::size_t rows = rec.batch * rec.length;
    std::vector<int> idx = row_domains(domains, rec.length, rows);
    for (int j : idx) {
      if (j < 0 || static_cast<std::size_t>(j) >= num_domains) {
        throw std::invalid_argument("mix_loss: domain label " + std::to_string(j) +
                                    " outside [0, " + std::to_string(num_domains) + ")");
      }
    }
    ad::Tensor picked = ad::pick(ad::log(rec.proportions), idx);
    acc = accumulate(acc, ad::sum(ad::mul(picked, mask_tensor(rec.mask))));
    const auto vals = picked.data();
    for (std::size_t r = 0; r < rows; ++r) {
      if (!rec.mask[r]) continue;
      dom_sum[idx[r]] -= vals[r];
      ++dom_count[idx[r]];
      ++out.count;
    }
  }
  if (out.count == 0) throw std::invalid_argument("mix_loss: no valid proportion rows");
  out.loss = ad::scale(acc, sum ? -1.0 : -1.0 / static_cast<double>(out.count));
  out.per_domain.resize(num_domains);
  for (std::size_t j = 0; j < num_domains; ++j) {
    out.per_domain[j] = dom_count[j] ? dom_sum[j] / static_cast<double>(dom_count[j]) : 0.0;
  }
  return out;
}

ad::Tensor baseline_head_loss(const EncoderState& encoder, std::span<const int> domains,
                              Baseline mode, const ClassifierHead& head) {
  if (mode == Baseline::none) throw std::invalid_argument("baseline_head_loss: no baseline mode");
  const std::size_t B = encoder.batch, L = encoder.length;
  if (domains.size() != B) throw std::invalid_argument("baseline_head_loss: label count mismatch");
  std::vector<double> pool(B * B * L, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t n = 0;
    for (std::size_t t = 0; t < L; ++t) n += encoder.mask[b * L + t] ? 1 : 0;
    if (n == 0) throw std::invalid_argument("baseline_head_loss: empty source sentence");
    for (std::size_t t = 0; t < L; ++t) {
      if (encoder.mask[b * L + t]) pool[b * B * L + b * L + t] = 1.0 / static_cast<double>(n);
    }
  }
  ad::Tensor pooled = ad::matmul(ad::Tensor::from({B, B * L}, std::move(pool)), encoder.states);
  const std::size_t d = pooled.dim(1);
  switch (mode) {
    case Baseline::mtl:
      break;
    case Baseline::advl:
      pooled = ad::scale_gradient(pooled, -1.0);
      break;
    case Baseline::padvl: {
      std::vector<double> factors(d, -1.0);
      std::fill(factors.begin(), factors.begin() + static_cast<std::ptrdiff_t>(d / 2), 1.0);
      pooled = ad::scale_gradient(pooled, std::span<const double>(factors));
      break;
    }
    case Baseline::none:
      break;
  }
  ad::Tensor logits = ad::add_bias(ad::matmul(pooled, head.weight), head.bias);
  const std::vector<int> labels(domains.begin(), domains.end());
  return ad::scale(ad::mean(ad::pick(ad::log_softmax(logits), labels)), -1.0);
}

Losses compute_losses(const Model& model, const Batch& batch, const TrainConfig& config,
                      Rng* dropout_rng) {
  const ModelConfig& mc = model.config();
  std::vector<ProportionRecord> records;
  ForwardContext ctx;
  ctx.detach = config.detach;
  ctx.training = dropout_rng != nullptr && mc.dropout > 0.0;
  ctx.rng = dropout_rng;
  ctx.records = mc.mixes_encoder() ? &records : nullptr;

  ModelOutput out = model.forward(batch, ctx);
  const DecoderOutput& dec = out.decoder;
  Losses L;
  ad::Tensor aux;

  if (const DomainProportionLayer* head = model.wl_head()) {
    const std::vector<int> idx = row_domains(batch.domains, dec.length, dec.batch * dec.length);
    ad::Tensor raw = head->apply(ad::stop_gradient(dec.hidden));
    ad::Tensor picked = ad::pick(raw, idx);
    const ad::Tensor beta_t = ad::stop_gradient(picked);
    std::vector<double> beta(beta_t.data().begin(), beta_t.data().end());
    double beta_sum = 0.0;
    const std::size_t n = count_valid(out.label_mask);
    for (std::size_t i = 0; i < beta.size(); ++i) {
      if (out.label_mask[i]) beta_sum += beta[i];
    }
    L.values.beta_mean = n ? beta_sum / static_cast<double>(n) : 0.0;
    L.gen = wl_weighted_gen_loss(dec.logits, out.labels, out.label_mask, beta, config.label_smoothing);
    ad::Tensor head_ce = ad::scale(ad::sum(ad::mul(ad::log(picked), mask_tensor(out.label_mask))),
                                   -1.0 / static_cast<double>(n));
    aux = accumulate(aux, head_ce);
  } else {
    L.gen = label_smoothed_ce(dec.logits, out.labels, out.label_mask, config.label_smoothing);
  }

  if (const ClassifierHead* head = model.baseline_head()) {
    aux = accumulate(aux, baseline_head_loss(out.encoder, batch.domains, mc.baseline, *head));
  }

  L.total = L.gen;
  if (!records.empty()) {
    MixLoss mix = mix_loss(records, batch.domains, mc.domains, config.mix_loss_sum);
    L.mix = mix.loss;
    L.values.mix = mix.loss.item();
    L.values.mix_per_domain = std::move(mix.per_domain);
    if (config.use_mix_loss) L.total = ad::add(L.total, L.mix);
  }
  if (aux.defined()) {
    L.aux = aux;
    L.values.aux = aux.item();
    L.total = ad::add(L.total, aux);
  }
  L.values.gen = L.gen.item();
  L.values.total = L.total.item();
  return L;
}

// ---- optimizer ----------------------------------------------------------

void adam_step(std::span<const NamedTensor> params, OptimizerState& state, double lr,
               const AdamConfig& config) {
  if (state.m.empty() && state.v.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.numel(), 0.0);
      state.v.emplace_back(p.tensor.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::invalid_argument("adam_step: optimizer state holds " + std::to_string(state.m.size()) +
                                " tensors for " + std::to_string(params.size()) + " parameters");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    ad::Tensor w = params[i].tensor;
    auto value = w.mutable_data();
    const auto grad = w.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != value.size() || v.size() != value.size()) {
      throw std::invalid_argument("adam_step: moment size mismatch for " + params[i].name);
    }
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = (grad.empty() ? 0.0 : grad[j]) + config.weight_decay * value[j];
      m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g;
      v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g * g;
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      value[j] -= lr * mhat / (std::sqrt(vhat) + config.eps);
    }
  }
}

void round_to_f32(std::span<const NamedTensor> params, OptimizerState* state) {
  auto round = [](double& x) { x = static_cast<double>(static_cast<float>(x)); };
  for (const auto& p : params) {
    ad::Tensor t = p.tensor;
    for (double& x : t.mutable_data()) round(x);
  }
  if (state == nullptr) return;
  for (auto& m : state->m) std::for_each(m.begin(), m.end(), round);
  for (auto& v : state->v) std::for_each(v.begin(), v.end(), round);
}

// ---- loop -----------------------------------------------------------------

TrainResult train(Model& model, std::span<const BitextExample> data, const TrainConfig& config,
                  TrainState& state, const TrainHooks& hooks) {
  config.validate();
  if (data.empty()) throw std::invalid_argument("train: empty training set");
  const auto& params = model.parameters();
  const AdamConfig adam{config.beta1, config.beta2, config.adam_eps, config.weight_decay};
  if (config.precision == Precision::f32) round_to_f32(params, &state.optimizer);

  const std::size_t n = data.size();
  const std::size_t per_epoch = (n + config.batch_size - 1) / config.batch_size;
  std::size_t cached_epoch = SIZE_MAX;
  std::vector<std::size_t> order(n);

  const auto start = std::chrono::steady_clock::now();
  TrainResult result;
  for (std::size_t step = state.step + 1; step <= config.max_steps; ++step) {
    const std::size_t epoch = (step - 1) / per_epoch;
    const std::size_t slot = (step - 1) % per_epoch;
    if (epoch != cached_epoch) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng shuffle = Rng::derive(config.seed, epoch);
      shuffle.shuffle(std::span<std::size_t>(order));
      cached_epoch = epoch;
    }
    const std::size_t lo = slot * config.batch_size;
    const std::size_t hi = std::min(n, lo + config.batch_size);
    std::vector<BitextExample> picked;
    picked.reserve(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) picked.push_back(data[order[i]]);
    const Batch batch = encode_batch(picked, model.config().max_len).trimmed();

    for (const auto& p : params) {
      ad::Tensor t = p.tensor;
      t.zero_grad();
    }
    Rng dropout = Rng::derive(config.seed, kDropoutStream | step);
    Losses losses = compute_losses(model, batch, config, &dropout);
    const LossBreakdown& v = losses.values;
    if (!std::isfinite(v.total)) {
      std::ostringstream msg;
      msg << "non-finite loss at step " << step << " (L_gen=" << v.gen << ", L_mix=" << v.mix
          << ", L_aux=" << v.aux << ")";
      throw std::runtime_error(msg.str());
    }
    ad::backward(losses.total);
    const double lr = lr_schedule(step, config);
    adam_step(params, state.optimizer, lr, adam);
    if (config.precision == Precision::f32) round_to_f32(params, &state.optimizer);
    state.step = step;

    if (hooks.metrics != nullptr) {
      nlohmann::ordered_json line;
      line["step"] = step;
      line["lr"] = lr;
      line["L_gen"] = v.gen;
      line["L_mix"] = v.mix;
      if (losses.aux.defined()) line["L_aux"] = v.aux;
      line["L_total"] = v.total;
      const auto elapsed = std::chrono::duration_cast<std::chrono::milliseconds>(
          std::chrono::steady_clock::now() - start);
      line["elapsed_ms"] = config.log_elapsed ? elapsed.count() : 0;
      *hooks.metrics << line.dump() << '\n';
      hooks.metrics->flush();
    }
    if (hooks.on_step) hooks.on_step(step, v);
    const bool last = step == config.max_steps;
    if (hooks.checkpoint && (last || (config.checkpoint_every && step % config.checkpoint_every == 0))) {
      hooks.checkpoint(model, state);
    }
    ++result.steps;
    result.last = v;
  }
  return result;
}

// ---- gradient verification ----------------------------------------------

GradCheckReport check_gradients(std::span<const NamedTensor> params,
                                const std::function<ad::Tensor()>& loss_fn, double step,
                                double tolerance, double abs_floor) {
  for (const auto& p : params) {
    ad::Tensor t = p.tensor;
    t.zero_grad();
  }
  ad::FrozenValues frozen(ad::FrozenValues::Mode::record);
  {
    ad::FreezeScope scope(frozen);
    ad::backward(loss_fn());
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) {
    const auto g = p.tensor.grad();
    analytic.emplace_back(p.tensor.numel(), 0.0);
    std::copy(g.begin(), g.end(), analytic.back().begin());
  }

  auto evaluate = [&] {
    frozen.set_mode(ad::FrozenValues::Mode::replay);
    ad::FreezeScope scope(frozen);
    ad::NoGradGuard no_grad;
    return loss_fn().item();
  };

  GradCheckReport report;
  report.tolerance = tolerance;
  for (std::size_t i = 0; i < params.size(); ++i) {
    ad::Tensor t = params[i].tensor;
    auto value = t.mutable_data();
    GradCheckEntry entry{params[i].name, value.size(), 0.0, 0.0};
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double orig = value[j];
      value[j] = orig + step;
      const double up = evaluate();
      value[j] = orig - step;
      const double down = evaluate();
      value[j] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[i][j];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), abs_floor});
      entry.max_rel_error = std::max(entry.max_rel_error, err);
      entry.max_abs_grad = std::max(entry.max_abs_grad, std::abs(a));
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  }
  report.passed = report.max_rel_error <= tolerance;
  return report;
}

bool is_gate_parameter(std::string_view name) {
  const auto pos = name.rfind(".gate");
  return pos != std::string_view::npos && name.size() >= 2 && name.substr(name.size() - 2) == ".r";
}

DetachReport check_detach_contract(const Model& model, const Batch& batch, const TrainConfig& config) {
  const auto& params = model.parameters();
  auto zero = [&] {
    for (const auto& p : params) {
      ad::Tensor t = p.tensor;
      t.zero_grad();
    }
  };
  auto max_grad = [&](bool gates) {
    double m = 0.0;
    for (const auto& p : params) {
      if (is_gate_parameter(p.name) != gates) continue;
      for (double g : p.tensor.grad()) m = std::max(m, std::abs(g));
    }
    return m;
  };
  DetachReport report;
  Losses losses = compute_losses(model, batch, config, nullptr);
  zero();
  ad::backward(losses.gen);
  report.max_gen_grad_on_gates = max_grad(true);
  if (losses.mix.defined()) {
    zero();
    ad::backward(losses.mix);
    report.max_mix_grad_on_transformer = max_grad(false);
  }
  zero();
  report.holds = report.max_gen_grad_on_gates == 0.0 &&
                 (config.detach != DetachMode::detached || report.max_mix_grad_on_transformer == 0.0);
  return report;
}

}  // namespace domix
