#pragma once

// Decoder-only transformer over scalar tokens.
//
// Each scalar z becomes z·w_emb + b_emb plus a learned position row; the
// stack is pre-norm (LN → causal multi-head attention → residual, LN → GeLU
// MLP → residual) and a linear head maps every position back to one scalar.
// Output t is the prediction for the scalar at position t+1.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ood/autodiff.hpp"

namespace ood {

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 32;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t max_seq_len = 64;
  double ln_eps = 1e-5;
  double init_std = 0.02;
  std::uint64_t seed = 0;

  /// Throws ConfigError when a field is out of range.
  void validate() const;
  std::size_t head_dim() const { return d_model / n_heads; }
  bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
  Tensor ln1_gamma, ln1_beta;
  Tensor w_q, w_k, w_v, w_o;  // [d_model × d_model]
  Tensor ln2_gamma, ln2_beta;
  Tensor w_ff1, b_ff1;  // [d_model × d_ff], [d_ff]
  Tensor w_ff2, b_ff2;  // [d_ff × d_model], [d_model]
};

struct ModelParams {
  ModelConfig config;
  Tensor w_emb, b_emb;  // [1 × d_model], [d_model]
  Tensor pos_table;     // [max_seq_len × d_model]
  std::vector<LayerParams> layers;
  Tensor w_head, b_head;  // [d_model × 1], [1]

  /// Every parameter buffer in declared order (checkpoint order).
  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;
  std::size_t parameter_count() const;
  void zero_grad();
  bool all_finite() const;
};

/// Closed-form parameter count for a configuration.
std::size_t parameter_count(const ModelConfig& config);

ModelParams init_params(const ModelConfig& config);

/// Records the forward pass on `tape` with parameters bound as leaves; the
/// result is a [T × 1] node.
Var forward_on_tape(Tape& tape, ModelParams& params, std::span<const double> prompt);

/// One prediction per input position.
std::vector<double> forward(const ModelParams& params, std::span<const double> prompt);

/// Feeds each prediction back as the next input; returns the generated values.
std::vector<double> predict_autoregressive(const ModelParams& params,
                                           std::span<const double> prompt, std::size_t n_steps);

// Checkpoint container; byte layout documented in docs/checkpoint.md.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);
std::string encode_checkpoint(const ModelParams& params);
ModelParams decode_checkpoint(std::string_view bytes);

}  // namespace ood
