#include "mlstmfcn/model.hpp"

#include <algorithm>
#include <string>

#include "mlstmfcn/checkpoint.hpp"
#include "mlstmfcn/error.hpp"
#include "mlstmfcn/optim.hpp"

namespace mlstmfcn {

void validate(const ModelConfig& c) {
  if (c.num_variables == 0) throw ConfigError("model config: num_variables must be positive");
  if (c.max_length == 0) throw ConfigError("model config: max_length must be positive");
  if (c.num_classes < 2) throw ConfigError("model config: need at least two classes");
  for (std::size_t f : c.conv_filters) {
    if (f == 0) throw ConfigError("model config: conv filter counts must be positive");
  }
  for (std::size_t w : c.conv_kernel_widths) {
    if (w == 0) throw ConfigError("model config: conv kernel widths must be positive");
  }
  if (c.se_reduction == 0 || c.conv_filters[0] % c.se_reduction != 0 ||
      c.conv_filters[1] % c.se_reduction != 0) {
    throw ConfigError("model config: conv_filters[0] and conv_filters[1] must be divisible by "
                      "the se reduction ratio " +
                      std::to_string(c.se_reduction));
  }
  if (c.lstm_cells == 0) throw ConfigError("model config: lstm_cells must be positive");
  if (!(c.dropout_rate >= 0.0 && c.dropout_rate < 1.0)) {
    throw ConfigError("model config: dropout_rate must be in [0, 1)");
  }
  if (c.lstm_stride == 0) throw ConfigError("model config: lstm_stride must be positive");
  if (c.lstm_stride > 1 && lstm_step_count(c) < c.lstm_stride) {
    throw ConfigError("model config: lstm_stride exceeds the recurrent step count");
  }
}

bool should_shuffle(const ModelConfig& c) { return c.max_length > c.num_variables; }

std::size_t lstm_input_dim(const ModelConfig& c) {
  return should_shuffle(c) ? c.max_length : c.num_variables;
}

std::size_t lstm_step_count(const ModelConfig& c) {
  return should_shuffle(c) ? c.num_variables : c.max_length;
}

// ---- parameter bundle -------------------------------------------------------

namespace {

template <typename Params, typename Fn>
void visit_trainables(Params& p, Fn&& fn) {
  fn("conv1.kernels", p.conv1.kernels);
  fn("conv1.bias", p.conv1.bias);
  fn("conv1.bn_gamma", p.conv1.bn_gamma);
  fn("conv1.bn_beta", p.conv1.bn_beta);
  fn("conv2.kernels", p.conv2.kernels);
  fn("conv2.bias", p.conv2.bias);
  fn("conv2.bn_gamma", p.conv2.bn_gamma);
  fn("conv2.bn_beta", p.conv2.bn_beta);
  fn("conv3.kernels", p.conv3.kernels);
  fn("conv3.bias", p.conv3.bias);
  fn("conv3.bn_gamma", p.conv3.bn_gamma);
  fn("conv3.bn_beta", p.conv3.bn_beta);
  fn("se1.w1", p.se1.w1);
  fn("se1.w2", p.se1.w2);
  fn("se2.w1", p.se2.w1);
  fn("se2.w2", p.se2.w2);
  fn("lstm.w_u", p.lstm.w_u);
  fn("lstm.w_f", p.lstm.w_f);
  fn("lstm.w_o", p.lstm.w_o);
  fn("lstm.w_c", p.lstm.w_c);
  fn("lstm.i_u", p.lstm.i_u);
  fn("lstm.i_f", p.lstm.i_f);
  fn("lstm.i_o", p.lstm.i_o);
  fn("lstm.i_c", p.lstm.i_c);
  fn("lstm.b_u", p.lstm.b_u);
  fn("lstm.b_f", p.lstm.b_f);
  fn("lstm.b_o", p.lstm.b_o);
  fn("lstm.b_c", p.lstm.b_c);
  if (p.has_attention) {
    fn("attention.w", p.attention.w);
    fn("attention.v", p.attention.v);
  }
  if (p.has_reduce) {
    fn("reduce.kernels", p.reduce_kernels);
    fn("reduce.bias", p.reduce_bias);
  }
  fn("dense.weight", p.dense_weight);
  fn("dense.bias", p.dense_bias);
}

template <typename Params, typename Fn>
void visit_all(Params& p, Fn&& fn) {
  visit_trainables(p, fn);
  fn("conv1.bn_running_mean", p.conv1.bn_running_mean);
  fn("conv1.bn_running_var", p.conv1.bn_running_var);
  fn("conv2.bn_running_mean", p.conv2.bn_running_mean);
  fn("conv2.bn_running_var", p.conv2.bn_running_var);
  fn("conv3.bn_running_mean", p.conv3.bn_running_mean);
  fn("conv3.bn_running_var", p.conv3.bn_running_var);
}

}  // namespace

void ModelParams::for_each_trainable(const std::function<void(std::string_view, Tensor&)>& fn) {
  visit_trainables(*this, fn);
}

void ModelParams::for_each_trainable(
    const std::function<void(std::string_view, const Tensor&)>& fn) const {
  visit_trainables(*this, fn);
}

void ModelParams::for_each_tensor(const std::function<void(std::string_view, Tensor&)>& fn) {
  visit_all(*this, fn);
}

void ModelParams::for_each_tensor(
    const std::function<void(std::string_view, const Tensor&)>& fn) const {
  visit_all(*this, fn);
}

ModelParams init_params(const ModelConfig& c, Rng& rng) {
  ModelParams p = allocate_params(c);
  std::size_t m = c.num_variables;
  auto filters = c.conv_filters;
  auto widths = c.conv_kernel_widths;
  std::size_t lstm_in = lstm_input_dim(c);
  std::size_t feature_dim = filters[2] + c.lstm_cells;

  // He-normal weights; biases and batch-norm offsets start at zero. Conv
  // kernels use fan-in = width * in_channels, matrices their input width.
  auto fill = [&rng](Tensor& t, std::size_t fan_in) {
    Tensor drawn = he_init(t.shape(), fan_in, rng);
    t = std::move(drawn);
  };
  fill(p.conv1.kernels, widths[0] * m);
  fill(p.conv2.kernels, widths[1] * filters[0]);
  fill(p.conv3.kernels, widths[2] * filters[1]);
  fill(p.se1.w1, filters[0]);
  fill(p.se1.w2, filters[0] / c.se_reduction);
  fill(p.se2.w1, filters[1]);
  fill(p.se2.w2, filters[1] / c.se_reduction);
  for (Tensor* t : {&p.lstm.w_u, &p.lstm.w_f, &p.lstm.w_o, &p.lstm.w_c}) fill(*t, c.lstm_cells);
  for (Tensor* t : {&p.lstm.i_u, &p.lstm.i_f, &p.lstm.i_o, &p.lstm.i_c}) fill(*t, lstm_in);
  if (p.has_attention) {
    fill(p.attention.w, 2 * c.lstm_cells);
    fill(p.attention.v, c.lstm_cells);
  }
  if (p.has_reduce) fill(p.reduce_kernels, c.lstm_stride * lstm_in);
  fill(p.dense_weight, feature_dim);
  return p;
}

// ---- forward ----------------------------------------------------------------

ModelVars lift(Tape& tape, const ModelParams& p) {
  ModelVars v;
  // Must mirror the for_each_trainable order exactly.
  v.conv1 = lift(tape, p.conv1);
  v.conv2 = lift(tape, p.conv2);
  v.conv3 = lift(tape, p.conv3);
  v.se1 = lift(tape, p.se1);
  v.se2 = lift(tape, p.se2);
  v.lstm = lift(tape, p.lstm);
  if (p.has_attention) v.attention = lift(tape, p.attention);
  if (p.has_reduce) {
    v.reduce_kernels = tape.leaf(p.reduce_kernels);
    v.reduce_bias = tape.leaf(p.reduce_bias);
  }
  v.dense_weight = tape.leaf(p.dense_weight);
  v.dense_bias = tape.leaf(p.dense_bias);

  for (const ConvBlockVars* cb : {&v.conv1, &v.conv2, &v.conv3}) {
    v.trainables.insert(v.trainables.end(), {cb->kernels, cb->bias, cb->gamma, cb->beta});
  }
  v.trainables.insert(v.trainables.end(), {v.se1.w1, v.se1.w2, v.se2.w1, v.se2.w2});
  v.trainables.insert(v.trainables.end(),
                      {v.lstm.w_u, v.lstm.w_f, v.lstm.w_o, v.lstm.w_c, v.lstm.i_u, v.lstm.i_f,
                       v.lstm.i_o, v.lstm.i_c, v.lstm.b_u, v.lstm.b_f, v.lstm.b_o, v.lstm.b_c});
  if (p.has_attention) v.trainables.insert(v.trainables.end(), {v.attention.w, v.attention.v});
  if (p.has_reduce) v.trainables.insert(v.trainables.end(), {v.reduce_kernels, v.reduce_bias});
  v.trainables.insert(v.trainables.end(), {v.dense_weight, v.dense_bias});
  return v;
}

Var batch_leaf(Tape& tape, std::span<const Tensor> samples, const ModelConfig& config) {
  if (samples.empty()) throw DimensionError("batch_leaf: empty batch");
  Tensor batch({samples.size(), config.num_variables, config.max_length});
  for (std::size_t b = 0; b < samples.size(); ++b) {
    const Tensor& s = samples[b];
    if (s.rank() != 2 || s.dim(0) != config.num_variables || s.dim(1) != config.max_length) {
      throw DimensionError("batch_leaf: sample " + std::to_string(b) + " has shape " +
                           s.shape_str() + ", expected " +
                           std::to_string(config.num_variables) + "x" +
                           std::to_string(config.max_length));
    }
    std::copy(s.data().begin(), s.data().end(),
              batch.data().begin() + static_cast<std::ptrdiff_t>(b * s.size()));
  }
  return tape.leaf(std::move(batch));
}

namespace {

std::vector<std::size_t> valid_counts(const std::vector<std::vector<std::uint8_t>>& masks) {
  std::vector<std::size_t> counts(masks.size());
  for (std::size_t b = 0; b < masks.size(); ++b) {
    std::size_t n = 0;
    for (std::uint8_t flag : masks[b]) n += flag ? 1 : 0;
    counts[b] = n;
  }
  return counts;
}

// Window is valid when it covers at least one valid source step.
std::vector<std::uint8_t> strided_mask(const std::vector<std::uint8_t>& mask, std::size_t stride) {
  std::size_t out_steps = (mask.size() - stride) / stride + 1;
  std::vector<std::uint8_t> out(out_steps, 0);
  for (std::size_t u = 0; u < out_steps; ++u) {
    for (std::size_t k = 0; k < stride; ++k) {
      if (mask[u * stride + k]) {
        out[u] = 1;
        break;
      }
    }
  }
  return out;
}

}  // namespace

Var batch_forward(Tape& tape, const ModelVars& vars, ModelParams& params,
                  const ModelConfig& config, Var batch,
                  const std::vector<std::vector<std::uint8_t>>& masks, Mode mode,
                  Rng* dropout_rng) {
  const Tensor& bv = tape.value_at(batch.node);
  if (bv.rank() != 3 || bv.dim(1) != config.num_variables || bv.dim(2) != config.max_length) {
    throw DimensionError("batch_forward: batch shape " + bv.shape_str() + " does not match " +
                         std::to_string(config.num_variables) + "x" +
                         std::to_string(config.max_length) + " samples");
  }
  std::size_t batch_size = bv.dim(0);
  if (masks.size() != batch_size) {
    throw DimensionError("batch_forward: " + std::to_string(masks.size()) + " masks for batch of " +
                         std::to_string(batch_size));
  }
  for (const auto& m : masks) {
    if (m.size() != config.max_length) {
      throw DimensionError("batch_forward: mask length " + std::to_string(m.size()) +
                           " does not match max_length " + std::to_string(config.max_length));
    }
  }
  if (mode == Mode::train && config.dropout_rate > 0.0 && dropout_rng == nullptr) {
    throw ContractError("batch_forward: train mode with dropout needs a random source");
  }

  std::vector<std::size_t> valid = valid_counts(masks);
  for (std::size_t b = 0; b < batch_size; ++b) {
    if (valid[b] == 0) throw ContractError("batch_forward: sample " + std::to_string(b) +
                                           " has an all-false mask");
  }
  std::vector<double> mean_rescale(batch_size);
  double full = static_cast<double>(config.max_length);
  for (std::size_t b = 0; b < batch_size; ++b) {
    mean_rescale[b] = full / static_cast<double>(valid[b]);
  }

  // Convolutional branch. Padded time columns are zeroed after the input and
  // after every block, and both the squeeze and the final pooling average
  // over the valid steps only, so frozen-statistics inference is unaffected
  // by how far a sample was padded.
  Var x = mask_time(batch, masks);
  Var c1 = conv_block_forward(x, vars.conv1, params.conv1, mode);
  Var s1 = se_block(mask_time(c1, masks), vars.se1, valid);
  Var c2 = conv_block_forward(s1, vars.conv2, params.conv2, mode);
  Var s2 = se_block(mask_time(c2, masks), vars.se2, valid);
  Var c3 = conv_block_forward(s2, vars.conv3, params.conv3, mode);
  Var pooled = row_scale(temporal_mean(mask_time(c3, masks)), mean_rescale);  // [B x F3]

  // Recurrent branch, per sample.
  bool shuffle = should_shuffle(config);
  std::vector<Var> probability_rows;
  probability_rows.reserve(batch_size);
  for (std::size_t b = 0; b < batch_size; ++b) {
    Var sample = sample_slice(batch, b);
    Var sequence = shuffle ? transpose2d(sample) : sample;
    std::vector<std::uint8_t> mask =
        shuffle ? std::vector<std::uint8_t>(config.num_variables, 1) : masks[b];
    if (config.lstm_stride > 1) {
      sequence = conv1d_strided(sequence, vars.reduce_kernels, vars.reduce_bias,
                                config.lstm_stride);
      mask = strided_mask(mask, config.lstm_stride);
    }
    Var features = config.attention
                       ? attention_lstm_scan(sequence, mask, vars.lstm, vars.attention)
                       : lstm_scan(sequence, mask, vars.lstm);
    if (mode == Mode::train && config.dropout_rate > 0.0) {
      features = dropout(features, config.dropout_rate, mode, *dropout_rng);
    }
    Var joint = concat(row_slice(pooled, b), features);
    Var logits = add(matvec(vars.dense_weight, joint), vars.dense_bias);
    probability_rows.push_back(softmax(logits));
  }
  return stack_rows(probability_rows);
}

Prediction forward(ModelParams& params, const ModelConfig& config, const Tensor& sample,
                   std::span<const std::uint8_t> mask, Mode mode, Rng* dropout_rng) {
  Tape tape;
  ModelVars vars = lift(tape, params);
  Var batch = batch_leaf(tape, std::span<const Tensor>(&sample, 1), config);
  std::vector<std::vector<std::uint8_t>> masks{{mask.begin(), mask.end()}};
  Var probs = batch_forward(tape, vars, params, config, batch, masks, mode, dropout_rng);
  const Tensor& pv = tape.value(probs);
  Prediction out;
  out.probabilities = Tensor({config.num_classes});
  std::size_t best = 0;
  for (std::size_t k = 0; k < config.num_classes; ++k) {
    out.probabilities[k] = pv.at(0, k);
    if (pv.at(0, k) > pv.at(0, best)) best = k;
  }
  out.predicted_class = best;
  return out;
}

std::vector<Prediction> predict_batch(ModelParams& params, const ModelConfig& config,
                                      std::span<const Tensor> samples,
                                      const std::vector<std::vector<std::uint8_t>>& masks) {
  if (samples.size() != masks.size()) {
    throw DimensionError("predict_batch: " + std::to_string(samples.size()) + " samples vs " +
                         std::to_string(masks.size()) + " masks");
  }
  std::vector<Prediction> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    out.push_back(forward(params, config, samples[i], masks[i], Mode::infer));
  }
  return out;
}

}  // namespace mlstmfcn
