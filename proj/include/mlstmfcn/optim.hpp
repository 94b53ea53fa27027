#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "mlstmfcn/autodiff.hpp"
#include "mlstmfcn/data.hpp"
#include "mlstmfcn/model.hpp"
#include "mlstmfcn/rng.hpp"

namespace mlstmfcn {

// Zero-mean normal draws with standard deviation sqrt(2 / fan_in). For conv
// kernels fan_in is kernel_width * in_channels.
Tensor he_init(const std::vector<std::size_t>& shape, std::size_t fan_in, Rng& rng);

// Inverse-frequency weights normalized so balanced data yields all ones:
// weight_c = total / (num_classes * count_c).
std::vector<double> class_weights(const std::vector<std::size_t>& label_counts);

// Mean over the batch of weight[label] * (-log p[label]); probabilities is a
// recorded [B x K] variable whose rows sum to 1 (gradients flow through it).
Var weighted_cross_entropy(Var probabilities, std::span<const int> labels,
                           std::span<const double> weights);

struct TrainPlan {
  std::size_t epochs = 250;
  std::size_t batch_size = 128;
  double lr_initial = 1e-3;
  double lr_final = 1e-4;
  std::size_t reduce_every = 100;
  double reduce_factor = std::pow(2.0, -1.0 / 3.0);
  std::uint64_t seed = 0;
};

// lr_initial * reduce_factor^(epoch / reduce_every), clamped at lr_final.
double lr_at_epoch(const TrainPlan& plan, std::size_t epoch);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double learning_rate = 1e-3;
  std::size_t step_count = 0;
  std::vector<Tensor> first_moment, second_moment;  // aligned with the parameter list

  void init(std::span<Tensor* const> params);
};

// Standard bias-corrected update; increments the step counter.
void adam_step(AdamState& state, std::span<Tensor* const> params,
               std::span<const Tensor* const> grads);

struct EpochStats {
  std::size_t epoch;
  double lr;
  double loss;
  double accuracy;  // fraction in [0, 1], from the train-mode forward passes
};

struct FitResult {
  std::vector<EpochStats> epochs;
};

// Mini-batch training: seeded shuffle each epoch, weighted cross-entropy,
// Adam with the stepped learning-rate schedule. The last partial batch is
// trained. Identical seed, data and plan reproduce the trajectory bit for
// bit. Class weights come from the train label counts unless overridden.
FitResult fit(ModelParams& params, const ModelConfig& config, const Dataset& train,
              const TrainPlan& plan, std::vector<double> class_weight_override = {});

}  // namespace mlstmfcn
