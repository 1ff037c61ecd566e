#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "domix/autodiff.hpp"
#include "domix/corpus.hpp"
#include "domix/model.hpp"

namespace domix {

class Rng;

enum class Precision { f32, f64 };
std::string_view to_string(Precision precision);
Precision parse_precision(std::string_view text);

struct TrainConfig {
  double lr_peak = 5e-4;
  std::size_t warmup_steps = 4000;
  double warmup_init_lr = 1e-7;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  double weight_decay = 1e-4;
  double label_smoothing = 0.1;
  std::size_t max_steps = 1000;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
  bool use_mix_loss = true;
  bool mix_loss_sum = false;  // unnormalized sum instead of the per-record mean
  DetachMode detach = DetachMode::detached;
  Precision precision = Precision::f32;
  std::size_t checkpoint_every = 0;  // 0: only at the end
  bool log_elapsed = true;           // false writes elapsed_ms as 0

  void validate() const;
};

// Linear warm-up from warmup_init_lr to lr_peak, then lr_peak * sqrt(warmup / step).
double lr_schedule(std::size_t step, const TrainConfig& config);

// ---- losses -----------------------------------------------------------------

// Per-row cross entropy against (1 - s) * onehot + s / V, as an [N] tensor.
ad::Tensor smoothed_ce_rows(const ad::Tensor& logits, std::span<const int> targets, double smoothing);

// Mean over non-pad rows. Throws if every row is padding.
ad::Tensor label_smoothed_ce(const ad::Tensor& logits, std::span<const int> targets,
                             std::span<const std::uint8_t> mask, double smoothing);

// -(1/n) sum_j (1 + beta_j) CE_j over the n non-pad rows.
ad::Tensor wl_weighted_gen_loss(const ad::Tensor& logits, std::span<const int> targets,
                                std::span<const std::uint8_t> mask, std::span<const double> beta,
                                double smoothing);

struct MixLoss {
  ad::Tensor loss;
  std::vector<double> per_domain;  // mean -log p_J per domain over its records
  std::size_t count = 0;           // number of (token, proportion layer) records
};

// Sum over every valid record row of -log p_J, divided by the record count
// unless `sum` is set. `domains` holds the label of each batch row.
MixLoss mix_loss(std::span<const ProportionRecord> records, std::span<const int> domains,
                 std::size_t num_domains, bool sum = false);

// Sentence-level domain classifier on the mean-pooled encoder output, with
// the gradient into the encoder routed per the baseline mode.
ad::Tensor baseline_head_loss(const EncoderState& encoder, std::span<const int> domains,
                              Baseline mode, const ClassifierHead& head);

struct LossBreakdown {
  double gen = 0.0;
  double mix = 0.0;
  double aux = 0.0;  // baseline head + WL head classifier terms
  double total = 0.0;
  std::vector<double> mix_per_domain;
  double beta_mean = 0.0;
};

struct Losses {
  ad::Tensor total;
  ad::Tensor gen;
  ad::Tensor mix;  // undefined when the model has no proportion layers
  ad::Tensor aux;  // undefined without auxiliary heads
  LossBreakdown values;
};

// Teacher-forced forward pass plus every loss term. Auxiliary heads are
// taken from the model: a baseline head adds its classifier loss, a WL head
// reweights L_gen by (1 + beta) and adds its own classifier loss.
Losses compute_losses(const Model& model, const Batch& batch, const TrainConfig& config,
                      Rng* dropout_rng = nullptr);

// ---- optimizer ----------------------------------------------------------

struct OptimizerState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Bias-corrected Adam with coupled L2 decay (added to the gradient). Uses
// each parameter's accumulated gradient; missing gradients count as zero.
void adam_step(std::span<const NamedTensor> params, OptimizerState& state, double lr,
               const AdamConfig& config);

// Rounds every parameter and moment to the nearest float.
void round_to_f32(std::span<const NamedTensor> params, OptimizerState* state);

// ---- loop -----------------------------------------------------------------

struct TrainState {
  OptimizerState optimizer;
  std::size_t step = 0;
};

struct TrainHooks {
  std::ostream* metrics = nullptr;
  // Called every checkpoint_every steps and after the last step.
  std::function<void(const Model&, const TrainState&)> checkpoint;
  std::function<void(std::size_t step, const LossBreakdown&)> on_step;
};

struct TrainResult {
  std::size_t steps = 0;
  LossBreakdown last;
};

// Runs steps state.step + 1 .. config.max_steps. Batches and dropout masks
// depend only on (seed, step), so a resumed run replays the same stream.
TrainResult train(Model& model, std::span<const BitextExample> data, const TrainConfig& config,
                  TrainState& state, const TrainHooks& hooks = {});

// ---- gradient verification ----------------------------------------------

struct GradCheckEntry {
  std::string name;
  std::size_t numel = 0;
  double max_rel_error = 0.0;
  double max_abs_grad = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

// Central differences with step h against backward(), with detached values
// frozen during the perturbed evaluations. Error per entry is
// |a - n| / max(|a|, |n|, abs_floor).
GradCheckReport check_gradients(std::span<const NamedTensor> params,
                                const std::function<ad::Tensor()>& loss_fn, double step = 1e-5,
                                double tolerance = 1e-5, double abs_floor = 1e-3);

struct DetachReport {
  double max_gen_grad_on_gates = 0.0;         // |dL_gen/dR|
  double max_mix_grad_on_transformer = 0.0;   // |dL_mix/dtheta|, non-gate parameters
  bool holds = false;
};

// True gate parameters are the proportion-layer matrices (names ending in
// ".gate*.r").
bool is_gate_parameter(std::string_view name);
DetachReport check_detach_contract(const Model& model, const Batch& batch, const TrainConfig& config);

}  // namespace domix
