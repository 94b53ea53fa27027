#include "mlstmfcn/layers.hpp"

#include <cmath>
#include <string>
#include <utility>

#include "mlstmfcn/error.hpp"

namespace mlstmfcn {

namespace {

struct NormDims {
  std::size_t batch, channels, steps;
};

NormDims norm_dims(const Tensor& x) {
  if (x.rank() == 2) return {1, x.dim(0), x.dim(1)};
  if (x.rank() == 3) return {x.dim(0), x.dim(1), x.dim(2)};
  throw DimensionError("batchnorm: expected rank 2 or 3, got shape " + x.shape_str());
}

void require_channel_vector(const Tensor& v, std::size_t channels, const char* what) {
  if (v.rank() != 1 || v.dim(0) != channels) {
    throw DimensionError(std::string("batchnorm: ") + what + " shape " + v.shape_str() +
                         " does not match " + std::to_string(channels) + " channels");
  }
}

}  // namespace

// ---- batch normalization --------------------------------------------------

Var batchnorm_train(Var x, Var gamma, Var beta, double epsilon, Tensor* batch_mean,
                    Tensor* batch_var) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value_at(x.node);
  const Tensor& gv = t.value_at(gamma.node);
  const Tensor& bv = t.value_at(beta.node);
  NormDims d = norm_dims(xv);
  require_channel_vector(gv, d.channels, "gamma");
  require_channel_vector(bv, d.channels, "beta");
  if (d.batch * d.steps == 0) throw DimensionError("batchnorm: empty batch");

  std::size_t per_channel = d.batch * d.steps;
  std::vector<double> mean(d.channels, 0.0), variance(d.channels, 0.0);
  for (std::size_t c = 0; c < d.channels; ++c) {
    double acc = 0.0;
    for (std::size_t b = 0; b < d.batch; ++b) {
      std::size_t base = (b * d.channels + c) * d.steps;
      for (std::size_t u = 0; u < d.steps; ++u) acc += xv[base + u];
    }
    mean[c] = acc / static_cast<double>(per_channel);
    double sq = 0.0;
    for (std::size_t b = 0; b < d.batch; ++b) {
      std::size_t base = (b * d.channels + c) * d.steps;
      for (std::size_t u = 0; u < d.steps; ++u) {
        double centered = xv[base + u] - mean[c];
        sq += centered * centered;
      }
    }
    variance[c] = sq / static_cast<double>(per_channel);
  }
  if (batch_mean) *batch_mean = Tensor::vector(mean);
  if (batch_var) *batch_var = Tensor::vector(variance);

  Tensor out(xv.shape());
  for (std::size_t c = 0; c < d.channels; ++c) {
    double inv_sd = 1.0 / std::sqrt(variance[c] + epsilon);
    for (std::size_t b = 0; b < d.batch; ++b) {
      std::size_t base = (b * d.channels + c) * d.steps;
      for (std::size_t u = 0; u < d.steps; ++u) {
        out[base + u] = gv[c] * (xv[base + u] - mean[c]) * inv_sd + bv[c];
      }
    }
  }

  std::size_t xi = x.node, gi = gamma.node, bi = beta.node;
  return t.record(std::move(out), [xi, gi, bi, d, epsilon, mean, variance](Tape& t,
                                                                           std::size_t self) {
    const Tensor& dy = t.grad_buffer(self);
    const Tensor& xv = t.value_at(xi);
    const Tensor& gv = t.value_at(gi);
    Tensor& gx = t.grad_buffer(xi);
    Tensor& gg = t.grad_buffer(gi);
    Tensor& gb = t.grad_buffer(bi);
    double count = static_cast<double>(d.batch * d.steps);
    for (std::size_t c = 0; c < d.channels; ++c) {
      double inv_sd = 1.0 / std::sqrt(variance[c] + epsilon);
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t b = 0; b < d.batch; ++b) {
        std::size_t base = (b * d.channels + c) * d.steps;
        for (std::size_t u = 0; u < d.steps; ++u) {
          double xhat = (xv[base + u] - mean[c]) * inv_sd;
          sum_dy += dy[base + u];
          sum_dy_xhat += dy[base + u] * xhat;
        }
      }
      gg[c] += sum_dy_xhat;
      gb[c] += sum_dy;
      double k = gv[c] * inv_sd;
      for (std::size_t b = 0; b < d.batch; ++b) {
        std::size_t base = (b * d.channels + c) * d.steps;
        for (std::size_t u = 0; u < d.steps; ++u) {
          double xhat = (xv[base + u] - mean[c]) * inv_sd;
          gx[base + u] += k * (dy[base + u] - (sum_dy + xhat * sum_dy_xhat) / count);
        }
      }
    }
  });
}

Var batchnorm_infer(Var x, Var gamma, Var beta, const Tensor& running_mean,
                    const Tensor& running_var, double epsilon) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value_at(x.node);
  const Tensor& gv = t.value_at(gamma.node);
  const Tensor& bv = t.value_at(beta.node);
  NormDims d = norm_dims(xv);
  require_channel_vector(gv, d.channels, "gamma");
  require_channel_vector(bv, d.channels, "beta");
  require_channel_vector(running_mean, d.channels, "running mean");
  require_channel_vector(running_var, d.channels, "running variance");

  std::vector<double> mean(running_mean.data().begin(), running_mean.data().end());
  std::vector<double> variance(running_var.data().begin(), running_var.data().end());
  Tensor out(xv.shape());
  for (std::size_t c = 0; c < d.channels; ++c) {
    double inv_sd = 1.0 / std::sqrt(variance[c] + epsilon);
    for (std::size_t b = 0; b < d.batch; ++b) {
      std::size_t base = (b * d.channels + c) * d.steps;
      for (std::size_t u = 0; u < d.steps; ++u) {
        out[base + u] = gv[c] * (xv[base + u] - mean[c]) * inv_sd + bv[c];
      }
    }
  }

  std::size_t xi = x.node, gi = gamma.node, bi = beta.node;
  return t.record(std::move(out), [xi, gi, bi, d, epsilon, mean, variance](Tape& t,
                                                                           std::size_t self) {
    const Tensor& dy = t.grad_buffer(self);
    const Tensor& xv = t.value_at(xi);
    const Tensor& gv = t.value_at(gi);
    Tensor& gx = t.grad_buffer(xi);
    Tensor& gg = t.grad_buffer(gi);
    Tensor& gb = t.grad_buffer(bi);
    for (std::size_t c = 0; c < d.channels; ++c) {
      double inv_sd = 1.0 / std::sqrt(variance[c] + epsilon);
      double k = gv[c] * inv_sd;
      for (std::size_t b = 0; b < d.batch; ++b) {
        std::size_t base = (b * d.channels + c) * d.steps;
        for (std::size_t u = 0; u < d.steps; ++u) {
          double xhat = (xv[base + u] - mean[c]) * inv_sd;
          gx[base + u] += k * dy[base + u];
          gg[c] += dy[base + u] * xhat;
          gb[c] += dy[base + u];
        }
      }
    }
  });
}

// ---- conv block -------------------------------------------------------------

ConvBlockParams ConvBlockParams::make(std::size_t in_channels, std::size_t out_channels,
                                      std::size_t width) {
  ConvBlockParams p;
  p.kernels = Tensor({out_channels, width, in_channels});
  p.bias = Tensor({out_channels});
  p.bn_gamma = Tensor::full({out_channels}, 1.0);
  p.bn_beta = Tensor({out_channels});
  p.bn_running_mean = Tensor({out_channels});
  p.bn_running_var = Tensor::full({out_channels}, 1.0);
  return p;
}

ConvBlockVars lift(Tape& tape, const ConvBlockParams& params) {
  return {tape.leaf(params.kernels), tape.leaf(params.bias), tape.leaf(params.bn_gamma),
          tape.leaf(params.bn_beta)};
}

Var conv_block_forward(Var input, const ConvBlockVars& vars, ConvBlockParams& state, Mode mode) {
  Var pre = conv1d(input, vars.kernels, vars.bias, Padding::same);
  Var normed;
  if (mode == Mode::train) {
    Tensor mean, variance;
    normed = batchnorm_train(pre, vars.gamma, vars.beta, state.bn_epsilon, &mean, &variance);
    double momentum = state.bn_momentum;
    for (std::size_t c = 0; c < mean.size(); ++c) {
      state.bn_running_mean[c] = momentum * state.bn_running_mean[c] + (1.0 - momentum) * mean[c];
      state.bn_running_var[c] = momentum * state.bn_running_var[c] + (1.0 - momentum) * variance[c];
    }
  } else {
    normed = batchnorm_infer(pre, vars.gamma, vars.beta, state.bn_running_mean,
                             state.bn_running_var, state.bn_epsilon);
  }
  return relu(normed);
}

// ---- squeeze and excite --------------------------------------------------------

SEParams SEParams::make(std::size_t channels, std::size_t reduction) {
  if (reduction == 0 || channels % reduction != 0) {
    throw ConfigError("se block: channel count " + std::to_string(channels) +
                      " is not divisible by reduction ratio " + std::to_string(reduction));
  }
  SEParams p;
  p.w1 = Tensor({channels / reduction, channels});
  p.w2 = Tensor({channels, channels / reduction});
  p.reduction = reduction;
  return p;
}

SEVars lift(Tape& tape, const SEParams& params) {
  return {tape.leaf(params.w1), tape.leaf(params.w2)};
}

Var se_block(Var input, const SEVars& vars, std::span<const std::size_t> valid_steps) {
  Tape& t = *input.tape;
  const Tensor& xv = t.value_at(input.node);
  const Tensor& w1v = t.value_at(vars.w1.node);
  const Tensor& w2v = t.value_at(vars.w2.node);
  bool batched = xv.rank() == 3;
  if (!batched && xv.rank() != 2) {
    throw DimensionError("se_block: input must be rank 2 or 3, got " + xv.shape_str());
  }
  std::size_t batch = batched ? xv.dim(0) : 1;
  std::size_t channels = batched ? xv.dim(1) : xv.dim(0);
  std::size_t steps = batched ? xv.dim(2) : xv.dim(1);
  if (w1v.dim(1) != channels || w2v.dim(0) != channels || w2v.dim(1) != w1v.dim(0)) {
    throw DimensionError("se_block: gate shapes " + w1v.shape_str() + " / " + w2v.shape_str() +
                         " do not fit " + std::to_string(channels) + " channels");
  }
  if (!valid_steps.empty() && valid_steps.size() != batch) {
    throw DimensionError("se_block: " + std::to_string(valid_steps.size()) +
                         " valid-step counts for batch of " + std::to_string(batch));
  }

  Var squeezed = temporal_mean(input);
  if (!valid_steps.empty()) {
    std::vector<double> rescale(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      if (valid_steps[b] == 0 || valid_steps[b] > steps) {
        throw ContractError("se_block: valid step count " + std::to_string(valid_steps[b]) +
                            " out of range for " + std::to_string(steps) + " steps");
      }
      rescale[b] = static_cast<double>(steps) / static_cast<double>(valid_steps[b]);
    }
    if (batched) {
      squeezed = row_scale(squeezed, rescale);
    } else {
      squeezed = scale(squeezed, rescale[0]);
    }
  }

  Var gate;
  if (batched) {
    Var hidden = relu(matmul(squeezed, transpose2d(vars.w1)));
    gate = sigmoid(matmul(hidden, transpose2d(vars.w2)));
  } else {
    Var hidden = relu(matvec(vars.w1, squeezed));
    gate = sigmoid(matvec(vars.w2, hidden));
  }
  return channel_scale(input, gate);
}

Var se_rescale(Var input, Var gate) { return channel_scale(input, gate); }

// ---- LSTM ------------------------------------------------------------------------

LSTMParams LSTMParams::make(std::size_t hidden, std::size_t input) {
  LSTMParams p;
  p.w_u = Tensor({hidden, hidden});
  p.w_f = Tensor({hidden, hidden});
  p.w_o = Tensor({hidden, hidden});
  p.w_c = Tensor({hidden, hidden});
  p.i_u = Tensor({hidden, input});
  p.i_f = Tensor({hidden, input});
  p.i_o = Tensor({hidden, input});
  p.i_c = Tensor({hidden, input});
  p.b_u = Tensor({hidden});
  p.b_f = Tensor({hidden});
  p.b_o = Tensor({hidden});
  p.b_c = Tensor({hidden});
  return p;
}

LSTMVars lift(Tape& tape, const LSTMParams& p) {
  return {tape.leaf(p.w_u), tape.leaf(p.w_f), tape.leaf(p.w_o), tape.leaf(p.w_c),
          tape.leaf(p.i_u), tape.leaf(p.i_f), tape.leaf(p.i_o), tape.leaf(p.i_c),
          tape.leaf(p.b_u), tape.leaf(p.b_f), tape.leaf(p.b_o), tape.leaf(p.b_c)};
}

LSTMState lstm_step(Var x, LSTMState prev, const LSTMVars& v) {
  auto preact = [&](Var w, Var i, Var b) {
    return add(add(matvec(w, prev.hidden), matvec(i, x)), b);
  };
  Var g_u = sigmoid(preact(v.w_u, v.i_u, v.b_u));
  Var g_f = sigmoid(preact(v.w_f, v.i_f, v.b_f));
  Var g_o = sigmoid(preact(v.w_o, v.i_o, v.b_o));
  Var g_c = tanh(preact(v.w_c, v.i_c, v.b_c));
  Var memory = add(hadamard(g_f, prev.memory), hadamard(g_u, g_c));
  Var hidden = tanh(hadamard(g_o, memory));
  return {hidden, memory};
}

Var lstm_scan(Var sequence, std::span<const std::uint8_t> mask, const LSTMVars& vars,
              std::vector<Var>* hidden_history) {
  Tape& t = *sequence.tape;
  const Tensor& sv = t.value_at(sequence.node);
  if (sv.rank() != 2) {
    throw DimensionError("lstm_scan: sequence must be rank 2, got " + sv.shape_str());
  }
  std::size_t steps = sv.dim(1);
  if (mask.size() != steps) {
    throw DimensionError("lstm_scan: mask length " + std::to_string(mask.size()) +
                         " does not match " + std::to_string(steps) + " time steps");
  }
  std::size_t hidden = t.value_at(vars.w_u.node).dim(0);
  LSTMState state{t.leaf(Tensor({hidden})), t.leaf(Tensor({hidden}))};
  for (std::size_t s = 0; s < steps; ++s) {
    if (!mask[s]) continue;
    state = lstm_step(time_slice(sequence, s), state, vars);
    if (hidden_history) hidden_history->push_back(state.hidden);
  }
  return state.hidden;
}

// ---- attention -----------------------------------------------------------------------

AttentionParams AttentionParams::make(std::size_t align_width, std::size_t query_dim,
                                      std::size_t annotation_dim) {
  if (align_width == 0) throw ConfigError("attention: alignment width must be positive");
  AttentionParams p;
  p.w = Tensor({align_width, query_dim + annotation_dim});
  p.v = Tensor({align_width});
  return p;
}

AttentionVars lift(Tape& tape, const AttentionParams& params) {
  return {tape.leaf(params.w), tape.leaf(params.v)};
}

AttentionResult attention_context(Var annotations, Var query, const AttentionVars& vars) {
  Tape& t = *annotations.tape;
  const Tensor& av = t.value_at(annotations.node);
  if (av.rank() != 2) {
    throw DimensionError("attention_context: annotations must be rank 2, got " + av.shape_str());
  }
  std::size_t count = av.dim(1);
  std::vector<Var> scores;
  scores.reserve(count);
  for (std::size_t j = 0; j < count; ++j) {
    Var joint = concat(query, time_slice(annotations, j));
    scores.push_back(dot(vars.v, tanh(matvec(vars.w, joint))));
  }
  Var weights = softmax(stack_scalars(scores));
  Var context = matvec(annotations, weights);
  return {context, weights};
}

Var attention_lstm_scan(Var sequence, std::span<const std::uint8_t> mask, const LSTMVars& lstm,
                        const AttentionVars& attn) {
  std::vector<Var> history;
  Var final_hidden = lstm_scan(sequence, mask, lstm, &history);
  if (history.empty()) return final_hidden;  // all masked: zero state
  Var annotations = stack_cols(history);
  return attention_context(annotations, final_hidden, attn).context;
}

// ---- plain RNN ------------------------------------------------------------------------

RNNParams RNNParams::make(std::size_t hidden, std::size_t input, std::size_t classes) {
  RNNParams p;
  p.recurrent = Tensor({hidden, hidden});
  p.input_proj = Tensor({hidden, input});
  p.output = Tensor({classes, hidden});
  return p;
}

RNNVars lift(Tape& tape, const RNNParams& p) {
  return {tape.leaf(p.recurrent), tape.leaf(p.input_proj), tape.leaf(p.output)};
}

RNNOutput rnn_forward(Tape& tape, Var sequence, std::span<const RNNVars> layers) {
  if (layers.empty()) throw ConfigError("rnn_forward: at least one layer required");
  const Tensor& sv = tape.value_at(sequence.node);
  if (sv.rank() != 2) {
    throw DimensionError("rnn_forward: sequence must be rank 2, got " + sv.shape_str());
  }
  std::size_t steps = sv.dim(1);

  RNNOutput out;
  out.lifted.assign(layers.begin(), layers.end());
  std::vector<Var> inputs;
  inputs.reserve(steps);
  for (std::size_t s = 0; s < steps; ++s) inputs.push_back(time_slice(sequence, s));

  Var hidden{};
  for (std::size_t layer = 0; layer < layers.size(); ++layer) {
    const RNNVars& vars = layers[layer];
    std::size_t width = tape.value_at(vars.recurrent.node).dim(0);
    hidden = tape.leaf(Tensor({width}));
    std::vector<Var> outputs;
    outputs.reserve(steps);
    for (std::size_t s = 0; s < steps; ++s) {
      Var pre = add(matvec(vars.recurrent, hidden), matvec(vars.input_proj, inputs[s]));
      hidden = layer == 0 ? tanh(pre) : sigmoid(pre);  // stacked layers gate with sigmoid
      outputs.push_back(hidden);
    }
    inputs = std::move(outputs);
  }
  out.hidden = hidden;
  out.prediction = softmax(matvec(out.lifted.back().output, hidden));
  return out;
}

RNNOutput rnn_forward(Tape& tape, Var sequence, std::span<const RNNParams> layer_params) {
  std::vector<RNNVars> lifted;
  lifted.reserve(layer_params.size());
  for (const RNNParams& p : layer_params) lifted.push_back(lift(tape, p));
  return rnn_forward(tape, sequence, lifted);
}

// ---- dropout -----------------------------------------------------------------------------

Var dropout(Var x, double rate, Mode mode, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout: rate must be in [0, 1), got " + std::to_string(rate));
  }
  if (mode == Mode::infer || rate == 0.0) return x;
  Tape& t = *x.tape;
  const Tensor& xv = t.value_at(x.node);
  double gain = 1.0 / (1.0 - rate);
  std::vector<double> mask(xv.size());
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    mask[i] = rng.uniform() < rate ? 0.0 : gain;
    out[i] = mask[i] * xv[i];
  }
  std::size_t xi = x.node;
  return t.record(std::move(out), [xi, mask = std::move(mask)](Tape& t, std::size_t self) {
    const Tensor& dy = t.grad_buffer(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < dy.size(); ++i) gx[i] += mask[i] * dy[i];
  });
}

}  // namespace mlstmfcn
