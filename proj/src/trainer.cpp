#include "ood/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "ood/errors.hpp"

namespace ood {

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (n_steps == 0) throw ConfigError("n_steps must be at least 1");
  if (n_samples == 0) throw ConfigError("n_samples must be at least 1");
  if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be nonnegative");
  if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0)) throw ConfigError("adam_beta1 must lie in (0, 1)");
  if (!(adam_beta2 > 0.0 && adam_beta2 < 1.0)) throw ConfigError("adam_beta2 must lie in (0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (!(clip_norm >= 0.0)) throw ConfigError("clip_norm must be nonnegative");
  if (log_every == 0) throw ConfigError("log_every must be at least 1");
}

void adam_step(std::span<Tensor* const> params, OptimizerState& state, const TrainConfig& cfg) {
  if (state.m.empty()) {
    for (const Tensor* t : params) {
      state.m.emplace_back(t->size(), 0.0);
      state.v.emplace_back(t->size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("optimizer state does not match params");
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Tensor* t = params[k];
    if (state.m[k].size() != t->size()) throw ShapeError("optimizer buffer size mismatch");
    if (t->grad.empty()) continue;
    for (std::size_t i = 0; i < t->grad.size(); ++i)
      if (!std::isfinite(t->grad[i]))
        throw TrainingError("non-finite gradient in parameter tensor " + std::to_string(k) +
                            " at element " + std::to_string(i) + " (step " +
                            std::to_string(state.step + 1) + ")");
  }

  ++state.step;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor* t = params[k];
    auto& m = state.m[k];
    auto& v = state.v[k];
    const bool has_grad = !t->grad.empty();
    for (std::size_t i = 0; i < t->data.size(); ++i) {
      const double g = has_grad ? t->grad[i] : 0.0;
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      const double mh = m[i] / c1, vh = v[i] / c2;
      t->data[i] -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.adam_eps);
    }
  }
}

double global_grad_norm(std::span<Tensor* const> params) {
  double acc = 0.0;
  for (const Tensor* t : params)
    for (double g : t->grad) acc += g * g;
  return std::sqrt(acc);
}

double clip_grad_norm(std::span<Tensor* const> params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (Tensor* t : params)
      for (double& g : t->grad) g *= f;
  }
  return norm;
}

std::string loss_curve_csv(std::span<const LossPoint> curve) {
  std::string out = "step,split,loss\n";
  char buf[96];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%.17g\n", p.step, p.split.c_str(), p.loss);
    out += buf;
  }
  return out;
}

namespace {

// Shared minibatch loop. `sample_loss(tape, params, idx)` records one sample's
// loss; the batch objective is their mean.
template <class SampleLoss>
TrainResult run_training(ModelParams& params, const TrainConfig& cfg, std::size_t pool_size,
                         SampleLoss sample_loss) {
  cfg.validate();
  auto tensors = params.tensors();
  OptimizerState opt;
  Rng order_rng(child_seed(cfg.seed, "order"));
  std::vector<std::size_t> order(pool_size);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = pool_size;

  TrainResult result;
  double tail_sum = 0.0;
  const std::size_t tail = std::min<std::size_t>(100, cfg.n_steps);
  const double inv_b = 1.0 / static_cast<double>(cfg.batch_size);
  for (std::size_t step = 1; step <= cfg.n_steps; ++step) {
    params.zero_grad();
    double batch_loss = 0.0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      if (cursor == pool_size) {
        order_rng.shuffle(order.begin(), order.end());
        cursor = 0;
      }
      const std::size_t idx = order[cursor++];
      Tape tape;
      Var loss = sample_loss(tape, params, idx);
      batch_loss += loss.value()[0];
      tape.backward(scale(loss, inv_b));
    }
    batch_loss *= inv_b;
    if (!std::isfinite(batch_loss))
      throw TrainingError("loss diverged at step " + std::to_string(step));
    if (cfg.clip_norm > 0.0) clip_grad_norm(tensors, cfg.clip_norm);
    adam_step(tensors, opt, cfg);
    if (step % cfg.log_every == 0 || step == cfg.n_steps)
      result.curve.push_back({step, "train", batch_loss});
    if (step + tail > cfg.n_steps) tail_sum += batch_loss;
  }
  if (!params.all_finite()) throw TrainingError("parameters became non-finite");
  result.final_loss = tail_sum / static_cast<double>(tail);
  return result;
}

constexpr std::size_t kMeanCalcTargets[] = {3, 4};

}  // namespace

// ---- mean-square ----------------------------------------------------------------

std::vector<double> meancalc_sequence(const MeanCalcSample& s) {
  return {s.x[0], s.x[1], s.x[2], s.x[3], s.y0, s.y1};
}

double meancalc_sample_loss(const ModelParams& params, const MeanCalcSample& s) {
  const auto seq = meancalc_sequence(s);
  const auto out = forward(params, std::span(seq).first(5));
  const double e0 = out[3] - s.y0, e1 = out[4] - s.y1;
  return e0 * e0 + e1 * e1;
}

std::vector<MeanCalcSample> meancalc_pool(const TrainConfig& cfg) {
  Rng data_rng(child_seed(cfg.seed, "data"));
  std::vector<MeanCalcSample> pool;
  pool.reserve(cfg.n_samples);
  for (std::size_t k = 0; k < cfg.n_samples; ++k)
    pool.push_back(gen_mean_calc(0, Split::kTrain, data_rng));
  return pool;
}

TrainResult train_meancalc(ModelParams& params, const TrainConfig& cfg) {
  cfg.validate();
  const auto pool = meancalc_pool(cfg);

  return run_training(params, cfg, pool.size(), [&](Tape& tape, ModelParams& p, std::size_t i) {
    const auto seq = meancalc_sequence(pool[i]);
    auto out = forward_on_tape(tape, p, std::span(seq).first(5));
    auto picked = gather(out, kMeanCalcTargets);
    // Two squared errors summed is twice their mean.
    return scale(mse(picked, Tensor({2}, {pool[i].y0, pool[i].y1})), 2.0);
  });
}

double eval_meancalc(const Predictor& model, std::span<const MeanCalcSample> samples) {
  if (samples.empty()) throw ContractError("no samples to evaluate");
  double acc = 0.0;
  for (const auto& s : samples) {
    std::vector<double> seq(s.x.begin(), s.x.end());
    seq.push_back(model(seq).back());
    const double y1_hat = model(seq).back();
    acc += (y1_hat - s.y1) * (y1_hat - s.y1);
  }
  return acc / static_cast<double>(samples.size());
}

double eval_meancalc(const ModelParams& params, std::span<const MeanCalcSample> samples) {
  return eval_meancalc([&](std::span<const double> p) { return forward(params, p); }, samples);
}

// ---- CoT ----------------------------------------------------------------------

double cot_sample_loss(const ModelParams& params, std::span<const double> flat) {
  if (flat.size() < 2) throw ContractError("instance too short");
  const auto out = forward(params, flat.first(flat.size() - 1));
  double acc = 0.0;
  for (std::size_t t = 0; t < out.size(); ++t) {
    const double e = out[t] - flat[t + 1];
    acc += e * e;
  }
  return acc / static_cast<double>(out.size());
}

std::vector<CotInstance> gen_cot_instances(std::span<const LatentTask> theta,
                                           std::size_t n_demos, std::size_t count, Rng& rng) {
  if (theta.empty()) throw ContractError("empty task set");
  std::vector<CotInstance> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k)
    out.push_back(gen_cot_instance(theta[rng.uniform_int(theta.size())], n_demos, rng));
  return out;
}

std::vector<CotInstance> cot_pool(const CotTask& task, const TrainConfig& cfg) {
  Rng data_rng(child_seed(cfg.seed, "data"));
  return gen_cot_instances(task.theta, task.n_demos, cfg.n_samples, data_rng);
}

TrainResult train_cot(ModelParams& params, const CotTask& task, const TrainConfig& cfg) {
  cfg.validate();
  if (task.theta.empty()) throw ContractError("empty training task set");
  const std::size_t len = (task.n_demos + 1) * (task.space.H + 1);
  if (len - 1 > params.config.max_seq_len)
    throw ConfigError("instances of " + std::to_string(len) + " scalars need max_seq_len >= " +
                      std::to_string(len - 1));
  std::vector<std::vector<double>> pool;
  pool.reserve(cfg.n_samples);
  for (const auto& inst : cot_pool(task, cfg)) pool.push_back(inst.flat());

  return run_training(params, cfg, pool.size(), [&](Tape& tape, ModelParams& p, std::size_t i) {
    std::span<const double> flat(pool[i]);
    auto out = forward_on_tape(tape, p, flat.first(flat.size() - 1));
    return mse(out, Tensor({flat.size() - 1, 1},
                           std::vector<double>(flat.begin() + 1, flat.end())));
  });
}

std::vector<double> eval_stepwise(const Predictor& model, std::span<const CotInstance> instances) {
  if (instances.empty()) throw ContractError("no instances to evaluate");
  const std::size_t H = instances[0].chains.back().z.size() - 1;
  std::vector<double> loss(H, 0.0);
  for (const auto& inst : instances) {
    const auto flat = inst.flat();
    // Context ends at z_{H−1} of the test chain; output at z_{h−1} predicts z_h.
    const auto out = model(std::span(flat).first(flat.size() - 1));
    const std::size_t z0 = flat.size() - (H + 1);
    for (std::size_t h = 1; h <= H; ++h) {
      const double e = out[z0 + h - 1] - flat[z0 + h];
      loss[h - 1] += e * e;
    }
  }
  for (double& l : loss) l /= static_cast<double>(instances.size());
  return loss;
}

std::vector<double> eval_stepwise(const ModelParams& params,
                                  std::span<const CotInstance> instances) {
  return eval_stepwise([&](std::span<const double> p) { return forward(params, p); },
                       instances);
}

std::string eval_csv(std::span<const EvalRecord> rows) {
  std::string out = "x_param,h,loss,n_samples,seed\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.17g,%zu,%.17g,%zu,%llu\n", r.x_param, r.h, r.loss,
                  r.n_samples, static_cast<unsigned long long>(r.seed));
    out += buf;
  }
  return out;
}

}  // namespace ood
