#pragma once

// Teacher-forced training and evaluation for both tasks, with Adam.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ood/tasks.hpp"
#include "ood/transformer.hpp"

namespace ood {

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t n_steps = 1000;
  std::size_t n_samples = 20000;  // size of the fixed training pool
  double learning_rate = 3e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;  // global gradient norm; 0 disables
  std::size_t log_every = 1;
  std::uint64_t seed = 0;

  /// Throws ConfigError.
  void validate() const;
};

struct OptimizerState {
  std::vector<std::vector<double>> m, v;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update from the gradients stored on each tensor.
/// A non-finite gradient throws TrainingError before anything is modified.
void adam_step(std::span<Tensor* const> params, OptimizerState& state, const TrainConfig& cfg);

/// Euclidean norm over every gradient buffer.
double global_grad_norm(std::span<Tensor* const> params);
/// Rescales gradients so their global norm is at most max_norm; returns the
/// norm before clipping.
double clip_grad_norm(std::span<Tensor* const> params, double max_norm);

struct LossPoint {
  std::size_t step;
  std::string split;
  double loss;
};

struct TrainResult {
  std::vector<LossPoint> curve;
  double final_loss = 0.0;  // mean batch loss over the last min(100, n_steps) steps
};

/// "step,split,loss" with full precision.
std::string loss_curve_csv(std::span<const LossPoint> curve);

// ---- mean-square task ---------------------------------------------------------

/// Sequence x0 x1 x2 x3 y0 y1.
std::vector<double> meancalc_sequence(const MeanCalcSample& s);

/// Squared error predicting y0 from x plus squared error predicting y1 from
/// (x, y0), both taken from one forward pass over the first five scalars.
double meancalc_sample_loss(const ModelParams& params, const MeanCalcSample& s);

/// The fixed training pool that train_meancalc draws its batches from.
std::vector<MeanCalcSample> meancalc_pool(const TrainConfig& cfg);

TrainResult train_meancalc(ModelParams& params, const TrainConfig& cfg);

/// Maps a prompt to one prediction per position, as forward() does.
using Predictor = std::function<std::vector<double>(std::span<const double>)>;

/// Two autoregressive steps from x0 … x3; MSE of the second generated scalar
/// against y1.
double eval_meancalc(const Predictor& model, std::span<const MeanCalcSample> samples);
double eval_meancalc(const ModelParams& params, std::span<const MeanCalcSample> samples);

// ---- CoT task -----------------------------------------------------------------

struct CotTask {
  LatentSpace space;
  std::vector<LatentTask> theta;  // training task set, sampled uniformly
  std::size_t n_demos = 20;
};

/// Mean squared next-scalar error over every position of a flattened instance.
double cot_sample_loss(const ModelParams& params, std::span<const double> flat);

/// The fixed training pool that train_cot draws its batches from.
std::vector<CotInstance> cot_pool(const CotTask& task, const TrainConfig& cfg);

TrainResult train_cot(ModelParams& params, const CotTask& task, const TrainConfig& cfg);

/// L_test(h), h = 1..H, over the test chain of each instance with
/// ground-truth z_0 … z_{h−1} in context.
std::vector<double> eval_stepwise(const Predictor& model, std::span<const CotInstance> instances);
std::vector<double> eval_stepwise(const ModelParams& params,
                                  std::span<const CotInstance> instances);

/// Draws instances with task chosen uniformly from `theta`.
std::vector<CotInstance> gen_cot_instances(std::span<const LatentTask> theta,
                                           std::size_t n_demos, std::size_t count, Rng& rng);

struct EvalRecord {
  double x_param;
  std::size_t h;
  double loss;
  std::size_t n_samples;
  std::uint64_t seed;
};

/// "x_param,h,loss,n_samples,seed".
std::string eval_csv(std::span<const EvalRecord> rows);

}  // namespace ood
