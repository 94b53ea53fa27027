#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mlstmfcn/autodiff.hpp"
#include "mlstmfcn/rng.hpp"

namespace mlstmfcn {

// ---- temporal convolution block ----------------------------------------

struct ConvBlockParams {
  Tensor kernels;           // [out x width x in]
  Tensor bias;              // [out]
  Tensor bn_gamma;          // [out]
  Tensor bn_beta;           // [out]
  Tensor bn_running_mean;   // [out]
  Tensor bn_running_var;    // [out], strictly positive
  double bn_momentum = 0.99;
  double bn_epsilon = 1e-3;

  static ConvBlockParams make(std::size_t in_channels, std::size_t out_channels,
                              std::size_t width);
};

struct ConvBlockVars {
  Var kernels, bias, gamma, beta;
};
ConvBlockVars lift(Tape& tape, const ConvBlockParams& params);

// Per-channel batch normalization over every non-channel element (batch and
// time jointly). Input is [C x T] or [B x C x T]. Population variance.
// Optionally reports the batch statistics used.
Var batchnorm_train(Var x, Var gamma, Var beta, double epsilon, Tensor* batch_mean = nullptr,
                    Tensor* batch_var = nullptr);
Var batchnorm_infer(Var x, Var gamma, Var beta, const Tensor& running_mean,
                    const Tensor& running_var, double epsilon);

// relu(batchnorm(conv1d(x, same))). Train mode folds the batch statistics
// into the running estimates held in `state`:
//   running <- momentum * running + (1 - momentum) * batch.
// Infer mode uses the running estimates and leaves them untouched.
Var conv_block_forward(Var input, const ConvBlockVars& vars, ConvBlockParams& state, Mode mode);

// ---- squeeze and excite -------------------------------------------------

struct SEParams {
  Tensor w1;  // [C/r x C] reduction
  Tensor w2;  // [C x C/r] expansion
  std::size_t reduction = 16;

  static SEParams make(std::size_t channels, std::size_t reduction);
};

struct SEVars {
  Var w1, w2;
};
SEVars lift(Tape& tape, const SEParams& params);

// Squeeze (temporal mean) -> two-layer gate with relu/sigmoid -> channel
// rescale. Input is [C x T] or batched [B x C x T]. When `valid_steps` is
// non-empty, the squeeze averages only the first valid_steps[b] time steps
// of each sample (one entry total for rank-2 input); the remaining columns
// are assumed zero.
Var se_block(Var input, const SEVars& vars, std::span<const std::size_t> valid_steps = {});

// The rescale stage alone: output channel c is gate[c] times input channel c.
Var se_rescale(Var input, Var gate);

// ---- LSTM -----------------------------------------------------------------

struct LSTMParams {
  Tensor w_u, w_f, w_o, w_c;  // recurrent, [H x H]
  Tensor i_u, i_f, i_o, i_c;  // input projections, [H x D]
  Tensor b_u, b_f, b_o, b_c;  // [H]

  static LSTMParams make(std::size_t hidden, std::size_t input);
  std::size_t hidden_size() const { return w_u.dim(0); }
  std::size_t input_size() const { return i_u.dim(1); }
};

struct LSTMVars {
  Var w_u, w_f, w_o, w_c, i_u, i_f, i_o, i_c, b_u, b_f, b_o, b_c;
};
LSTMVars lift(Tape& tape, const LSTMParams& params);

struct LSTMState {
  Var hidden, memory;
};

// One gated update:
//   g_u/g_f/g_o = sigmoid(W h + I x + b), g_c = tanh(W_c h + I_c x + b_c)
//   m' = g_f (*) m + g_u (*) g_c,  h' = tanh(g_o (*) m')
LSTMState lstm_step(Var x, LSTMState prev, const LSTMVars& vars);

// Scans the [D x S] sequence left to right starting from zero state. Steps
// with a false mask are skipped entirely (state carried through unchanged).
// Returns the hidden state after the last unmasked step, or the zero state
// if every step is masked. Optionally collects each visited hidden state.
Var lstm_scan(Var sequence, std::span<const std::uint8_t> mask, const LSTMVars& vars,
              std::vector<Var>* hidden_history = nullptr);

// ---- additive attention -----------------------------------------------------

struct AttentionParams {
  Tensor w;  // [A x (query + annotation)]
  Tensor v;  // [A]

  static AttentionParams make(std::size_t align_width, std::size_t query_dim,
                              std::size_t annotation_dim);
};

struct AttentionVars {
  Var w, v;
};
AttentionVars lift(Tape& tape, const AttentionParams& params);

struct AttentionResult {
  Var context;  // [H]
  Var weights;  // [S], softmax of the alignment scores
};

// Scores each annotation column against the query through a one-hidden-layer
// feedforward scorer (tanh hidden activation), softmaxes the scores and
// returns the weighted sum of annotations.
AttentionResult attention_context(Var annotations, Var query, const AttentionVars& vars);

// lstm_scan collecting every unmasked hidden state as an annotation, then
// attention with the final hidden state as the query. All-masked input
// yields the zero vector.
Var attention_lstm_scan(Var sequence, std::span<const std::uint8_t> mask, const LSTMVars& lstm,
                        const AttentionVars& attn);

// ---- plain RNN ---------------------------------------------------------------

struct RNNParams {
  Tensor recurrent;   // [H x H]
  Tensor input_proj;  // [H x D]
  Tensor output;      // [K x H]; consulted on the final layer of a stack

  static RNNParams make(std::size_t hidden, std::size_t input, std::size_t classes);
};

struct RNNVars {
  Var recurrent, input_proj, output;
};
RNNVars lift(Tape& tape, const RNNParams& params);

struct RNNOutput {
  Var hidden;      // final hidden state of the top layer
  Var prediction;  // softmax(output . hidden)
  std::vector<RNNVars> lifted;
};

// First layer updates h <- tanh(W h + I x); stacked layers consume the layer
// below with a sigmoid update. Prediction comes from the top layer.
RNNOutput rnn_forward(Tape& tape, Var sequence, std::span<const RNNVars> layers);
RNNOutput rnn_forward(Tape& tape, Var sequence, std::span<const RNNParams> layer_params);

// ---- dropout ------------------------------------------------------------------

// Inverted dropout: train mode zeroes elements with the given probability and
// scales survivors by 1/(1-rate); infer mode is the identity.
Var dropout(Var x, double rate, Mode mode, Rng& rng);

}  // namespace mlstmfcn
