#pragma once

#include <array>
#include <functional>
#include <string_view>

#include "mlstmfcn/layers.hpp"

namespace mlstmfcn {

struct ModelConfig {
  std::size_t num_variables = 0;  // M
  std::size_t max_length = 0;     // N
  std::size_t num_classes = 0;
  std::array<std::size_t, 3> conv_filters{128, 256, 128};
  std::array<std::size_t, 3> conv_kernel_widths{8, 5, 3};
  std::size_t se_reduction = 16;
  std::size_t lstm_cells = 8;
  bool attention = false;
  double dropout_rate = 0.8;
  // >1 inserts a strided temporal convolution in front of the recurrent
  // branch to shorten long sequences; 1 disables it.
  std::size_t lstm_stride = 1;
};

void validate(const ModelConfig& config);

// The recurrent branch consumes the transposed sample (M steps of N-vectors)
// exactly when the series is longer than it is wide.
bool should_shuffle(const ModelConfig& config);

// Input width and step count seen by the recurrent branch, before any
// strided reduction.
std::size_t lstm_input_dim(const ModelConfig& config);
std::size_t lstm_step_count(const ModelConfig& config);

struct ModelParams {
  ConvBlockParams conv1, conv2, conv3;
  SEParams se1, se2;
  LSTMParams lstm;
  AttentionParams attention;
  Tensor reduce_kernels, reduce_bias;  // strided pre-LSTM conv, when enabled
  Tensor dense_weight, dense_bias;
  bool has_attention = false;
  bool has_reduce = false;

  // Canonical iteration order; the tape lift, the optimizer state and the
  // checkpoint layout all follow it.
  void for_each_trainable(const std::function<void(std::string_view, Tensor&)>& fn);
  void for_each_trainable(const std::function<void(std::string_view, const Tensor&)>& fn) const;
  // Trainables plus batch-norm running statistics.
  void for_each_tensor(const std::function<void(std::string_view, Tensor&)>& fn);
  void for_each_tensor(const std::function<void(std::string_view, const Tensor&)>& fn) const;
};

ModelParams init_params(const ModelConfig& config, Rng& rng);

struct Prediction {
  Tensor probabilities;          // [num_classes], sums to 1
  std::size_t predicted_class;   // argmax, lowest index on ties
};

struct ModelVars {
  ConvBlockVars conv1, conv2, conv3;
  SEVars se1, se2;
  LSTMVars lstm;
  AttentionVars attention;
  Var reduce_kernels, reduce_bias;
  Var dense_weight, dense_bias;
  std::vector<Var> trainables;  // aligned with ModelParams::for_each_trainable
};

ModelVars lift(Tape& tape, const ModelParams& params);

// Stacks samples into one [B x M x N] leaf.
Var batch_leaf(Tape& tape, std::span<const Tensor> samples, const ModelConfig& config);

// Differentiable batched forward pass; returns one row of class
// probabilities per sample ([B x num_classes]). Train mode updates the
// batch-norm running statistics in `params` and needs a dropout source.
Var batch_forward(Tape& tape, const ModelVars& vars, ModelParams& params,
                  const ModelConfig& config, Var batch,
                  const std::vector<std::vector<std::uint8_t>>& masks, Mode mode,
                  Rng* dropout_rng = nullptr);

// Single-sample convenience wrapper. `params` is mutated only in train mode.
Prediction forward(ModelParams& params, const ModelConfig& config, const Tensor& sample,
                   std::span<const std::uint8_t> mask, Mode mode = Mode::infer,
                   Rng* dropout_rng = nullptr);

// Ordered inference over a batch.
std::vector<Prediction> predict_batch(ModelParams& params, const ModelConfig& config,
                                      std::span<const Tensor> samples,
                                      const std::vector<std::vector<std::uint8_t>>& masks);

}  // namespace mlstmfcn
