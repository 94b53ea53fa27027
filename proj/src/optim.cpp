#include "mlstmfcn/optim.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mlstmfcn/error.hpp"

namespace mlstmfcn {

Tensor he_init(const std::vector<std::size_t>& shape, std::size_t fan_in, Rng& rng) {
  if (fan_in == 0) throw ContractError("he_init: fan_in must be at least 1");
  double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stddev);
  return t;
}

std::vector<double> class_weights(const std::vector<std::size_t>& label_counts) {
  if (label_counts.empty()) throw ConfigError("class_weights: need at least one class");
  double total = 0.0;
  for (std::size_t count : label_counts) {
    if (count == 0) throw ConfigError("class_weights: a class has no training samples");
    total += static_cast<double>(count);
  }
  double classes = static_cast<double>(label_counts.size());
  std::vector<double> weights(label_counts.size());
  for (std::size_t c = 0; c < label_counts.size(); ++c) {
    weights[c] = total / (classes * static_cast<double>(label_counts[c]));
  }
  return weights;
}

Var weighted_cross_entropy(Var probabilities, std::span<const int> labels,
                           std::span<const double> weights) {
  Tape& t = *probabilities.tape;
  const Tensor& pv = t.value_at(probabilities.node);
  if (pv.rank() != 2) {
    throw DimensionError("weighted_cross_entropy: probabilities must be [batch x classes], got " +
                         pv.shape_str());
  }
  std::size_t batch = pv.dim(0), classes = pv.dim(1);
  if (labels.size() != batch) {
    throw DimensionError("weighted_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(batch));
  }
  if (weights.size() != classes) {
    throw DimensionError("weighted_cross_entropy: " + std::to_string(weights.size()) +
                         " class weights for " + std::to_string(classes) + " classes");
  }
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= classes) {
      throw ContractError("weighted_cross_entropy: label " + std::to_string(labels[b]) +
                          " out of range [0, " + std::to_string(classes) + ")");
    }
    double row_sum = 0.0;
    for (std::size_t k = 0; k < classes; ++k) row_sum += pv.at(b, k);
    if (std::fabs(row_sum - 1.0) > 1e-6) {
      throw ContractError("weighted_cross_entropy: probability row " + std::to_string(b) +
                          " sums to " + std::to_string(row_sum));
    }
  }

  double loss = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    double p = pv.at(b, static_cast<std::size_t>(labels[b]));
    if (!(p > 0.0)) {
      throw DomainError("weighted_cross_entropy: assigned probability " + std::to_string(p) +
                        " for sample " + std::to_string(b));
    }
    loss -= weights[static_cast<std::size_t>(labels[b])] * std::log(p);
  }
  loss /= static_cast<double>(batch);

  std::size_t pi = probabilities.node;
  std::vector<int> label_copy(labels.begin(), labels.end());
  std::vector<double> weight_copy(weights.begin(), weights.end());
  return t.record(Tensor::scalar(loss), [pi, label_copy, weight_copy, batch, classes](
                                            Tape& t, std::size_t self) {
    double g = t.grad_buffer(self)[0];
    const Tensor& pv = t.value_at(pi);
    Tensor& gp = t.grad_buffer(pi);
    double inv_batch = 1.0 / static_cast<double>(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      std::size_t y = static_cast<std::size_t>(label_copy[b]);
      gp.at(b, y) -= g * weight_copy[y] * inv_batch / pv.at(b, y);
    }
    (void)classes;
  });
}

double lr_at_epoch(const TrainPlan& plan, std::size_t epoch) {
  double steps = static_cast<double>(epoch / plan.reduce_every);
  double lr = plan.lr_initial * std::pow(plan.reduce_factor, steps);
  return std::max(plan.lr_final, lr);
}

void AdamState::init(std::span<Tensor* const> params) {
  first_moment.clear();
  second_moment.clear();
  for (Tensor* p : params) {
    first_moment.push_back(Tensor::zeros(p->shape()));
    second_moment.push_back(Tensor::zeros(p->shape()));
  }
  step_count = 0;
}

void adam_step(AdamState& state, std::span<Tensor* const> params,
               std::span<const Tensor* const> grads) {
  if (params.size() != grads.size()) {
    throw DimensionError("adam_step: " + std::to_string(params.size()) + " parameters vs " +
                         std::to_string(grads.size()) + " gradients");
  }
  if (state.first_moment.size() != params.size()) state.init(params);
  state.step_count += 1;
  double t = static_cast<double>(state.step_count);
  double correction1 = 1.0 - std::pow(state.beta1, t);
  double correction2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    if (!p.same_shape(g)) {
      throw DimensionError("adam_step: parameter shape " + p.shape_str() +
                           " vs gradient shape " + g.shape_str());
    }
    Tensor& m = state.first_moment[i];
    Tensor& v = state.second_moment[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      double m_hat = m[j] / correction1;
      double v_hat = v[j] / correction2;
      p[j] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
  }
}

FitResult fit(ModelParams& params, const ModelConfig& config, const Dataset& train,
              const TrainPlan& plan, std::vector<double> class_weight_override) {
  if (train.samples.empty()) throw ContractError("fit: empty training set");
  if (train.num_variables != config.num_variables || train.max_length != config.max_length) {
    throw DimensionError("fit: dataset is " + std::to_string(train.num_variables) + "x" +
                         std::to_string(train.max_length) + ", model expects " +
                         std::to_string(config.num_variables) + "x" +
                         std::to_string(config.max_length));
  }
  if (plan.batch_size == 0) throw ConfigError("fit: batch size must be positive");

  std::vector<double> weights = std::move(class_weight_override);
  if (weights.empty()) weights = class_weights(label_counts(train));
  if (weights.size() != train.num_classes) {
    throw ConfigError("fit: " + std::to_string(weights.size()) + " class weights for " +
                      std::to_string(train.num_classes) + " classes");
  }

  std::vector<Tensor*> parameter_list;
  params.for_each_trainable([&](std::string_view, Tensor& t) { parameter_list.push_back(&t); });
  AdamState adam;
  adam.init(parameter_list);

  Rng shuffle_rng(plan.seed);
  Rng dropout_rng = shuffle_rng.fork(1);

  FitResult result;
  std::vector<std::size_t> order(train.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < plan.epochs; ++epoch) {
    adam.learning_rate = lr_at_epoch(plan, epoch);
    shuffle_rng.shuffle(order);

    double epoch_loss = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += plan.batch_size) {
      std::size_t stop = std::min(order.size(), start + plan.batch_size);
      std::size_t batch_size = stop - start;
      std::vector<Tensor> batch_samples;
      std::vector<std::vector<std::uint8_t>> batch_masks;
      std::vector<int> batch_labels;
      batch_samples.reserve(batch_size);
      for (std::size_t i = start; i < stop; ++i) {
        std::size_t idx = order[i];
        batch_samples.push_back(train.samples[idx]);
        batch_masks.push_back(train.masks[idx]);
        batch_labels.push_back(train.labels[idx]);
      }

      Tape tape;
      ModelVars vars = lift(tape, params);
      Var batch = batch_leaf(tape, batch_samples, config);
      Var probs =
          batch_forward(tape, vars, params, config, batch, batch_masks, Mode::train, &dropout_rng);
      Var loss = weighted_cross_entropy(probs, batch_labels, weights);
      tape.backward(loss);

      std::vector<const Tensor*> grads;
      grads.reserve(vars.trainables.size());
      for (Var v : vars.trainables) grads.push_back(&tape.grad(v));
      adam_step(adam, parameter_list, grads);

      epoch_loss += tape.value(loss)[0] * static_cast<double>(batch_size);
      const Tensor& pv = tape.value(probs);
      for (std::size_t b = 0; b < batch_size; ++b) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < train.num_classes; ++k) {
          if (pv.at(b, k) > pv.at(b, best)) best = k;
        }
        if (best == static_cast<std::size_t>(batch_labels[b])) ++correct;
      }
    }
    result.epochs.push_back({epoch, adam.learning_rate,
                             epoch_loss / static_cast<double>(order.size()),
                             static_cast<double>(correct) / static_cast<double>(order.size())});
  }
  return result;
}

}  // namespace mlstmfcn
