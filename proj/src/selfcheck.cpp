#include "mlstmfcn/selfcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>

#include "mlstmfcn/error.hpp"
#include "mlstmfcn/evalstats.hpp"
#include "mlstmfcn/model.hpp"
#include "mlstmfcn/optim.hpp"
#include "mlstmfcn/oracles.hpp"

namespace mlstmfcn {

namespace selfcheck {

namespace {

constexpr double kFdStep = 1e-5;
constexpr double kFdTolerance = 1e-4;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double spread = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = spread * rng.normal();
  return t;
}

// Finite differences against each leaf of a multi-tensor unit. `build` maps
// the leaf variables to a scalar loss.
double multi_leaf_fd(const std::vector<Tensor>& points,
                     const std::function<Var(Tape&, std::span<const Var>)>& build) {
  double worst = 0.0;
  for (std::size_t target = 0; target < points.size(); ++target) {
    ScalarFn f = [&, target](Tape& tape, Var probe) {
      std::vector<Var> leaves;
      leaves.reserve(points.size());
      for (std::size_t i = 0; i < points.size(); ++i) {
        leaves.push_back(i == target ? probe : tape.leaf(points[i]));
      }
      return build(tape, leaves);
    };
    worst = std::max(worst, finite_difference_check(f, points[target], kFdStep));
  }
  return worst;
}

double conv_block_fd(Rng& rng, Mode mode) {
  std::vector<Tensor> points = {
      random_tensor({2, 2, 5}, rng),     // batch input
      random_tensor({3, 3, 2}, rng),     // kernels
      random_tensor({3}, rng),           // bias
      random_tensor({3}, rng, 0.5),      // gamma
      random_tensor({3}, rng, 0.5),      // beta
  };
  Tensor running_mean = random_tensor({3}, rng, 0.3);
  Tensor running_var = Tensor::full({3}, 1.0);
  for (std::size_t i = 0; i < running_var.size(); ++i) running_var[i] += 0.5 * rng.uniform();
  return multi_leaf_fd(points, [&, mode](Tape&, std::span<const Var> leaves) {
    ConvBlockVars vars{leaves[1], leaves[2], leaves[3], leaves[4]};
    ConvBlockParams state = ConvBlockParams::make(2, 3, 3);
    state.bn_running_mean = running_mean;
    state.bn_running_var = running_var;
    return sum_all(conv_block_forward(leaves[0], vars, state, mode));
  });
}

double se_block_fd(Rng& rng, bool batched) {
  if (batched) {
    std::vector<Tensor> points = {
        random_tensor({2, 4, 5}, rng),
        random_tensor({2, 4}, rng),
        random_tensor({4, 2}, rng),
    };
    std::vector<std::size_t> valid = {3, 5};
    return multi_leaf_fd(points, [&](Tape&, std::span<const Var> leaves) {
      SEVars vars{leaves[1], leaves[2]};
      return sum_all(se_block(leaves[0], vars, valid));
    });
  }
  std::vector<Tensor> points = {
      random_tensor({4, 5}, rng),
      random_tensor({2, 4}, rng),
      random_tensor({4, 2}, rng),
  };
  return multi_leaf_fd(points, [&](Tape&, std::span<const Var> leaves) {
    SEVars vars{leaves[1], leaves[2]};
    return sum_all(se_block(leaves[0], vars));
  });
}

std::vector<Tensor> lstm_param_points(std::size_t hidden, std::size_t input, Rng& rng) {
  std::vector<Tensor> p;
  for (int i = 0; i < 4; ++i) p.push_back(random_tensor({hidden, hidden}, rng, 0.6));
  for (int i = 0; i < 4; ++i) p.push_back(random_tensor({hidden, input}, rng, 0.6));
  for (int i = 0; i < 4; ++i) p.push_back(random_tensor({hidden}, rng, 0.4));
  return p;
}

LSTMVars lstm_vars_from(std::span<const Var> leaves, std::size_t offset) {
  return {leaves[offset + 0], leaves[offset + 1], leaves[offset + 2],  leaves[offset + 3],
          leaves[offset + 4], leaves[offset + 5], leaves[offset + 6],  leaves[offset + 7],
          leaves[offset + 8], leaves[offset + 9], leaves[offset + 10], leaves[offset + 11]};
}

double lstm_step_fd(Rng& rng) {
  std::size_t hidden = 3, input = 2;
  std::vector<Tensor> points = {
      random_tensor({input}, rng),
      random_tensor({hidden}, rng, 0.5),
      random_tensor({hidden}, rng, 0.5),
  };
  auto params = lstm_param_points(hidden, input, rng);
  points.insert(points.end(), params.begin(), params.end());
  return multi_leaf_fd(points, [&](Tape&, std::span<const Var> leaves) {
    LSTMVars vars = lstm_vars_from(leaves, 3);
    LSTMState next = lstm_step(leaves[0], LSTMState{leaves[1], leaves[2]}, vars);
    return add(sum_all(next.hidden), sum_all(next.memory));
  });
}

double lstm_scan_fd(Rng& rng) {
  std::size_t hidden = 3, input = 2, steps = 4;
  std::vector<std::uint8_t> mask = {1, 0, 1, 1};
  std::vector<Tensor> points = {random_tensor({input, steps}, rng)};
  auto params = lstm_param_points(hidden, input, rng);
  points.insert(points.end(), params.begin(), params.end());
  return multi_leaf_fd(points, [&](Tape&, std::span<const Var> leaves) {
    LSTMVars vars = lstm_vars_from(leaves, 1);
    return sum_all(lstm_scan(leaves[0], mask, vars));
  });
}

double attention_fd(Rng& rng) {
  std::size_t hidden = 3, count = 4, align = 2;
  std::vector<Tensor> points = {
      random_tensor({hidden, count}, rng),
      random_tensor({hidden}, rng),
      random_tensor({align, 2 * hidden}, rng, 0.6),
      random_tensor({align}, rng, 0.6),
  };
  return multi_leaf_fd(points, [&](Tape&, std::span<const Var> leaves) {
    AttentionVars vars{leaves[2], leaves[3]};
    AttentionResult res = attention_context(leaves[0], leaves[1], vars);
    return sum_all(res.context);
  });
}

double attention_lstm_fd(Rng& rng) {
  std::size_t hidden = 3, input = 2, steps = 4, align = 2;
  std::vector<std::uint8_t> mask = {1, 1, 0, 1};
  std::vector<Tensor> points = {random_tensor({input, steps}, rng)};
  auto params = lstm_param_points(hidden, input, rng);
  points.insert(points.end(), params.begin(), params.end());
  points.push_back(random_tensor({align, 2 * hidden}, rng, 0.6));
  points.push_back(random_tensor({align}, rng, 0.6));
  return multi_leaf_fd(points, [&](Tape&, std::span<const Var> leaves) {
    LSTMVars lstm = lstm_vars_from(leaves, 1);
    AttentionVars attn{leaves[13], leaves[14]};
    return sum_all(attention_lstm_scan(leaves[0], mask, lstm, attn));
  });
}

double rnn_fd(Rng& rng) {
  std::size_t input = 2, steps = 3, h1 = 3, h2 = 2, classes = 2;
  std::vector<Tensor> points = {
      random_tensor({input, steps}, rng),
      random_tensor({h1, h1}, rng, 0.6),      // layer 1
      random_tensor({h1, input}, rng, 0.6),
      random_tensor({classes, h1}, rng, 0.6),
      random_tensor({h2, h2}, rng, 0.6),      // layer 2
      random_tensor({h2, h1}, rng, 0.6),
      random_tensor({classes, h2}, rng, 0.6),
  };
  return multi_leaf_fd(points, [&](Tape& tape, std::span<const Var> leaves) {
    std::vector<RNNVars> layers = {{leaves[1], leaves[2], leaves[3]},
                                   {leaves[4], leaves[5], leaves[6]}};
    RNNOutput out = rnn_forward(tape, leaves[0], layers);
    return element(out.prediction, 0);
  });
}

double dense_softmax_ce_fd(Rng& rng) {
  std::size_t features = 5, classes = 3;
  std::vector<Tensor> points = {
      random_tensor({features}, rng),
      random_tensor({classes, features}, rng, 0.6),
      random_tensor({classes}, rng, 0.4),
  };
  std::vector<int> labels = {static_cast<int>(rng.below(classes))};
  std::vector<double> weights = {1.0, 2.0, 0.5};
  return multi_leaf_fd(points, [&](Tape&, std::span<const Var> leaves) {
    Var logits = add(matvec(leaves[1], leaves[0]), leaves[2]);
    Var row = softmax(logits);
    Var probs = stack_rows(std::span<const Var>(&row, 1));
    return weighted_cross_entropy(probs, labels, weights);
  });
}

struct ModelFdCase {
  ModelConfig config;
  std::vector<Tensor> samples;
  std::vector<std::vector<std::uint8_t>> masks;
  std::vector<int> labels;
  std::vector<double> weights;
  std::uint64_t dropout_seed = 0;
};

ModelFdCase make_model_case(bool attention, bool shuffled, Rng& rng) {
  ModelFdCase c;
  c.config.num_variables = shuffled ? 2 : 5;
  c.config.max_length = shuffled ? 5 : 3;
  c.config.num_classes = 2;
  c.config.conv_filters = {4, 4, 4};
  c.config.conv_kernel_widths = {3, 3, 3};
  c.config.se_reduction = 2;
  c.config.lstm_cells = 3;
  c.config.attention = attention;
  c.config.dropout_rate = 0.8;
  c.dropout_seed = rng.next_u64();

  std::size_t batch = 2;
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t length = c.config.max_length - rng.below(2);  // exercises masked padding
    Tensor sample({c.config.num_variables, c.config.max_length});
    std::vector<std::uint8_t> mask(c.config.max_length, 0);
    for (std::size_t t = 0; t < length; ++t) {
      mask[t] = 1;
      for (std::size_t v = 0; v < c.config.num_variables; ++v) sample.at(v, t) = rng.normal();
    }
    c.samples.push_back(std::move(sample));
    c.masks.push_back(std::move(mask));
    c.labels.push_back(static_cast<int>(rng.below(2)));
  }
  c.weights = {1.0, 1.0};
  return c;
}

double model_loss(const ModelFdCase& c, const ModelParams& frozen) {
  ModelParams local = frozen;  // running statistics mutate on the copy
  Tape tape;
  ModelVars vars = lift(tape, local);
  Rng dropout(c.dropout_seed);
  Var batch = batch_leaf(tape, c.samples, c.config);
  Var probs = batch_forward(tape, vars, local, c.config, batch, c.masks, Mode::train, &dropout);
  Var loss = weighted_cross_entropy(probs, c.labels, c.weights);
  return tape.value(loss)[0];
}

// Train-mode check of the assembled model against central differences over
// every trainable coordinate. Dropout draws are reseeded identically for
// every evaluation, so the loss is a deterministic function of the weights.
double model_fd(const ModelFdCase& c, Rng& rng) {
  Rng init_rng(rng.next_u64());
  ModelParams base = init_params(c.config, init_rng);

  ModelParams analytic_state = base;
  Tape tape;
  ModelVars vars = lift(tape, analytic_state);
  Rng dropout(c.dropout_seed);
  Var batch = batch_leaf(tape, c.samples, c.config);
  Var probs =
      batch_forward(tape, vars, analytic_state, c.config, batch, c.masks, Mode::train, &dropout);
  Var loss = weighted_cross_entropy(probs, c.labels, c.weights);
  tape.backward(loss);
  std::vector<Tensor> analytic;
  analytic.reserve(vars.trainables.size());
  for (Var v : vars.trainables) analytic.push_back(tape.grad(v));

  ModelParams probe = base;
  std::vector<Tensor*> tensors;
  probe.for_each_trainable([&](std::string_view, Tensor& t) { tensors.push_back(&t); });

  double worst = 0.0;
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    Tensor& t = *tensors[k];
    for (std::size_t j = 0; j < t.size(); ++j) {
      double kept = t[j];
      t[j] = kept + kFdStep;
      double up = model_loss(c, probe);
      t[j] = kept - kFdStep;
      double down = model_loss(c, probe);
      t[j] = kept;
      double numeric = (up - down) / (2.0 * kFdStep);
      double a = analytic[k][j];
      double denom = std::max({1.0, std::fabs(a), std::fabs(numeric)});
      worst = std::max(worst, std::fabs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace

SuiteResult gradient_suite() {
  Rng rng(20240817);
  double worst = 0.0;
  std::string failed;
  auto run = [&](const char* unit, const std::function<double(Rng&)>& check,
                 std::size_t instances = 10) {
    for (std::size_t i = 0; i < instances && failed.empty(); ++i) {
      double err = check(rng);
      worst = std::max(worst, err);
      if (!(err < kFdTolerance)) {
        failed = std::string(unit) + " instance " + std::to_string(i) + " error " + fmt(err);
      }
    }
  };

  run("conv_block(train)", [](Rng& r) { return conv_block_fd(r, Mode::train); });
  run("conv_block(infer)", [](Rng& r) { return conv_block_fd(r, Mode::infer); });
  run("se_block", [](Rng& r) { return se_block_fd(r, false); });
  run("se_block(batched)", [](Rng& r) { return se_block_fd(r, true); });
  run("lstm_step", lstm_step_fd);
  run("lstm_scan", lstm_scan_fd);
  run("attention_context", attention_fd);
  run("attention_lstm_scan", attention_lstm_fd);
  run("rnn", rnn_fd);
  run("dense_softmax_cross_entropy", dense_softmax_ce_fd);
  run("mlstm_fcn", [](Rng& r) {
    ModelFdCase c = make_model_case(false, true, r);
    return model_fd(c, r);
  });
  run("malstm_fcn", [](Rng& r) {
    ModelFdCase c = make_model_case(true, true, r);
    return model_fd(c, r);
  });
  run("mlstm_fcn(unshuffled)", [](Rng& r) {
    ModelFdCase c = make_model_case(false, false, r);
    return model_fd(c, r);
  }, 3);

  if (!failed.empty()) return {"gradients", false, failed};
  return {"gradients", true, "max relative error " + fmt(worst) + " (tolerance 1e-4)"};
}

SuiteResult conv_oracle_suite() {
  Rng rng(7011);
  for (std::size_t trial = 0; trial < 100; ++trial) {
    std::size_t in_ch = 1 + rng.below(4);
    std::size_t out_ch = 1 + rng.below(4);
    std::size_t width = 1 + rng.below(5);
    Padding padding = rng.below(2) ? Padding::same : Padding::valid;
    std::size_t length = padding == Padding::valid ? width + rng.below(7) : 1 + rng.below(9);
    Tensor x = random_tensor({in_ch, length}, rng);
    Tensor w = random_tensor({out_ch, width, in_ch}, rng);
    Tensor b = random_tensor({out_ch}, rng);

    Tape tape;
    Var y = conv1d(tape.leaf(x), tape.leaf(w), tape.leaf(b), padding);
    Tensor expected = oracle::conv1d_loops(x, w, b, padding);
    const Tensor& got = tape.value(y);
    if (!got.same_shape(expected)) {
      return {"conv_oracle", false, "trial " + std::to_string(trial) + ": shape " +
                                        got.shape_str() + " vs " + expected.shape_str()};
    }
    for (std::size_t i = 0; i < got.size(); ++i) {
      if (got[i] != expected[i]) {
        return {"conv_oracle", false,
                "trial " + std::to_string(trial) + ": element " + std::to_string(i) +
                    " differs from the loop reference"};
      }
    }

    Tensor a = random_tensor({1 + rng.below(4), 1 + rng.below(4)}, rng);
    Tensor m = random_tensor({a.dim(1), 1 + rng.below(4)}, rng);
    Tape tape2;
    const Tensor& prod = tape2.value(matmul(tape2.leaf(a), tape2.leaf(m)));
    Tensor prod_expected = oracle::matmul_loops(a, m);
    for (std::size_t i = 0; i < prod.size(); ++i) {
      if (prod[i] != prod_expected[i]) {
        return {"conv_oracle", false, "matmul trial " + std::to_string(trial) + " differs"};
      }
    }
  }
  return {"conv_oracle", true, "100 random shapes bit-identical to the loop references"};
}

SuiteResult lstm_oracle_suite() {
  Rng rng(40127);
  double worst = 0.0;
  for (std::size_t trial = 0; trial < 30; ++trial) {
    std::size_t hidden = 1 + rng.below(4);
    std::size_t input = 1 + rng.below(4);
    LSTMParams params = LSTMParams::make(hidden, input);
    for (Tensor* t : {&params.w_u, &params.w_f, &params.w_o, &params.w_c, &params.i_u, &params.i_f,
                      &params.i_o, &params.i_c, &params.b_u, &params.b_f, &params.b_o, &params.b_c}) {
      for (std::size_t i = 0; i < t->size(); ++i) (*t)[i] = rng.normal();
    }
    Tensor x = random_tensor({input}, rng);
    Tensor h0 = random_tensor({hidden}, rng, 0.5);
    Tensor m0 = random_tensor({hidden}, rng, 0.5);

    Tape tape;
    LSTMVars vars = lift(tape, params);
    LSTMState next = lstm_step(tape.leaf(x), LSTMState{tape.leaf(h0), tape.leaf(m0)}, vars);
    auto [h_ref, m_ref] = oracle::lstm_step_scalar(params, x.data(), h0.data(), m0.data());
    for (std::size_t i = 0; i < hidden; ++i) {
      worst = std::max(worst, std::fabs(tape.value(next.hidden)[i] - h_ref[i]));
      worst = std::max(worst, std::fabs(tape.value(next.memory)[i] - m_ref[i]));
    }
  }
  if (!(worst < 1e-12)) {
    return {"lstm_oracle", false, "max deviation " + fmt(worst) + " exceeds 1e-12"};
  }
  return {"lstm_oracle", true, "30 random steps within " + fmt(worst) + " of the scalar reference"};
}

SuiteResult wilcoxon_suite() {
  Rng rng(90210);
  double worst = 0.0;
  for (std::size_t trial = 0; trial < 200; ++trial) {
    std::size_t n = 1 + rng.below(12);
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = static_cast<double>(rng.below(6));  // small integers force ties and zeros
      y[i] = static_cast<double>(rng.below(6));
    }
    double got = wilcoxon_signed_rank(x, y).p_value;
    double expected = oracle::wilcoxon_exact_enumeration(x, y);
    worst = std::max(worst, std::fabs(got - expected));
    if (!(worst < 1e-12)) {
      return {"wilcoxon", false, "trial " + std::to_string(trial) + ": exact p " + fmt(got) +
                                     " vs enumeration " + fmt(expected)};
    }
  }

  // n = 5, all positive distinct differences: p = 2 / 2^5
  std::vector<double> up = {2, 4, 6, 8, 10}, base = {1, 2, 3, 4, 5};
  if (std::fabs(wilcoxon_signed_rank(up, base).p_value - 0.0625) > 1e-15) {
    return {"wilcoxon", false, "n=5 all-positive case is not 0.0625"};
  }
  std::vector<double> same = {1, 2, 3};
  if (wilcoxon_signed_rank(same, same).p_value != 1.0) {
    return {"wilcoxon", false, "identical sequences must give p = 1"};
  }

  double worst_gap = 0.0;
  for (std::size_t trial = 0; trial < 30; ++trial) {
    std::size_t n = 12;
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = rng.normal();
      y[i] = rng.normal();
    }
    double exact = wilcoxon_signed_rank(x, y).p_value;
    double approx = wilcoxon_normal_approx_p(x, y);
    worst_gap = std::max(worst_gap, std::fabs(exact - approx));
  }
  if (!(worst_gap < 0.02)) {
    return {"wilcoxon", false, "normal approximation off by " + fmt(worst_gap) + " at n=12"};
  }
  return {"wilcoxon", true,
          "200 instances within " + fmt(worst) + " of enumeration; approximation gap " +
              fmt(worst_gap)};
}

SuiteResult masking_suite() {
  Rng rng(5150);

  // Operation level: skipped steps leave the state untouched.
  for (std::size_t trial = 0; trial < 50; ++trial) {
    std::size_t input = 1 + rng.below(3);
    std::size_t steps = 1 + rng.below(4);
    std::size_t extra = 1 + rng.below(3);
    std::size_t hidden = 1 + rng.below(3);
    LSTMParams params = LSTMParams::make(hidden, input);
    for (Tensor* t : {&params.w_u, &params.w_f, &params.w_o, &params.w_c, &params.i_u, &params.i_f,
                      &params.i_o, &params.i_c, &params.b_u, &params.b_f, &params.b_o, &params.b_c}) {
      for (std::size_t i = 0; i < t->size(); ++i) (*t)[i] = 0.7 * rng.normal();
    }
    Tensor seq = random_tensor({input, steps}, rng);
    Tensor padded({input, steps + extra});
    for (std::size_t v = 0; v < input; ++v) {
      for (std::size_t t = 0; t < steps; ++t) padded.at(v, t) = seq.at(v, t);
    }
    std::vector<std::uint8_t> mask(steps, 1), padded_mask(steps + extra, 0);
    std::fill(padded_mask.begin(), padded_mask.begin() + static_cast<std::ptrdiff_t>(steps), 1);

    Tape t1, t2;
    const Tensor& short_out = t1.value(lstm_scan(t1.leaf(seq), mask, lift(t1, params)));
    const Tensor& long_out = t2.value(lstm_scan(t2.leaf(padded), padded_mask, lift(t2, params)));
    for (std::size_t i = 0; i < hidden; ++i) {
      if (short_out[i] != long_out[i]) {
        return {"masking", false, "lstm_scan trial " + std::to_string(trial) +
                                      ": padded scan changed the hidden state"};
      }
    }
  }

  // Model level: frozen-statistics inference is insensitive to extra padding.
  for (std::size_t trial = 0; trial < 50; ++trial) {
    std::size_t length = 3 + rng.below(3);
    std::size_t extra = 1 + rng.below(2);
    ModelConfig config;
    config.num_variables = length + extra + rng.below(2);  // keeps both runs unshuffled
    config.max_length = length;
    config.num_classes = 2;
    config.conv_filters = {2, 4, 2};
    config.conv_kernel_widths = {3, 2, 2};
    config.se_reduction = 2;
    config.lstm_cells = 2;
    config.attention = trial % 2 == 1;
    config.dropout_rate = 0.5;

    Rng init_rng(rng.next_u64());
    ModelParams params = init_params(config, init_rng);

    std::size_t valid = 1 + rng.below(length);
    Tensor sample({config.num_variables, length});
    for (std::size_t v = 0; v < config.num_variables; ++v) {
      for (std::size_t t = 0; t < valid; ++t) sample.at(v, t) = rng.normal();
    }
    Tensor padded({config.num_variables, length + extra});
    for (std::size_t v = 0; v < config.num_variables; ++v) {
      for (std::size_t t = 0; t < valid; ++t) padded.at(v, t) = sample.at(v, t);
    }
    std::vector<std::uint8_t> mask(length, 0), padded_mask(length + extra, 0);
    std::fill(mask.begin(), mask.begin() + static_cast<std::ptrdiff_t>(valid), 1);
    std::fill(padded_mask.begin(), padded_mask.begin() + static_cast<std::ptrdiff_t>(valid), 1);

    ModelConfig padded_config = config;
    padded_config.max_length = length + extra;

    // Recurrent branch alone, bit for bit.
    Tape t1, t2;
    Var h1 = config.attention
                 ? attention_lstm_scan(t1.leaf(sample), mask, lift(t1, params.lstm),
                                       lift(t1, params.attention))
                 : lstm_scan(t1.leaf(sample), mask, lift(t1, params.lstm));
    Var h2 = config.attention
                 ? attention_lstm_scan(t2.leaf(padded), padded_mask, lift(t2, params.lstm),
                                       lift(t2, params.attention))
                 : lstm_scan(t2.leaf(padded), padded_mask, lift(t2, params.lstm));
    for (std::size_t i = 0; i < config.lstm_cells; ++i) {
      if (t1.value(h1)[i] != t2.value(h2)[i]) {
        return {"masking", false,
                "model trial " + std::to_string(trial) + ": recurrent branch moved"};
      }
    }

    Prediction a = forward(params, config, sample, mask, Mode::infer);
    Prediction b = forward(params, padded_config, padded, padded_mask, Mode::infer);
    for (std::size_t k = 0; k < config.num_classes; ++k) {
      double gap = std::fabs(a.probabilities[k] - b.probabilities[k]);
      if (!(gap < 1e-9)) {
        return {"masking", false, "model trial " + std::to_string(trial) +
                                      ": probability moved by " + fmt(gap)};
      }
    }
  }
  return {"masking", true, "50 scan and 50 model instances padding-invariant"};
}

SuiteResult se_algebra_suite() {
  Rng rng(31337);

  // Squeeze of constant channels returns the constants.
  for (std::size_t trial = 0; trial < 20; ++trial) {
    std::size_t channels = 1 + rng.below(4);
    std::size_t steps = 1 + rng.below(6);
    Tensor x({channels, steps});
    std::vector<double> constants(channels);
    for (std::size_t c = 0; c < channels; ++c) {
      constants[c] = 4.0 * rng.uniform() - 2.0;
      for (std::size_t t = 0; t < steps; ++t) x.at(c, t) = constants[c];
    }
    Tape tape;
    const Tensor& z = tape.value(temporal_mean(tape.leaf(x)));
    for (std::size_t c = 0; c < channels; ++c) {
      if (std::fabs(z[c] - constants[c]) > 1e-15) {
        return {"se_algebra", false, "constant squeeze drifted by " + fmt(z[c] - constants[c])};
      }
    }
  }

  // Zero gate weights scale every channel by exactly one half.
  {
    Rng local(4);
    Tensor x = random_tensor({4, 6}, local);
    SEParams params = SEParams::make(4, 2);  // zero weights
    Tape tape;
    const Tensor& y = tape.value(se_block(tape.leaf(x), lift(tape, params)));
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (y[i] != 0.5 * x[i]) {
        return {"se_algebra", false, "zero-gate block is not an exact half gain"};
      }
    }
  }

  // Output channel c is gate_c times input channel c; gate recomputed
  // independently with plain loops.
  for (std::size_t trial = 0; trial < 20; ++trial) {
    std::size_t channels = 4, steps = 5, mid = 2;
    Tensor x = random_tensor({channels, steps}, rng);
    SEParams params = SEParams::make(channels, 2);
    for (std::size_t i = 0; i < params.w1.size(); ++i) params.w1[i] = rng.normal();
    for (std::size_t i = 0; i < params.w2.size(); ++i) params.w2[i] = rng.normal();

    std::vector<double> z(channels, 0.0);
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t t = 0; t < steps; ++t) z[c] += x.at(c, t);
      z[c] /= static_cast<double>(steps);
    }
    std::vector<double> hidden(mid, 0.0);
    for (std::size_t i = 0; i < mid; ++i) {
      for (std::size_t c = 0; c < channels; ++c) hidden[i] += params.w1.at(i, c) * z[c];
      hidden[i] = std::max(0.0, hidden[i]);
    }
    std::vector<double> gate(channels, 0.0);
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t i = 0; i < mid; ++i) gate[c] += params.w2.at(c, i) * hidden[i];
      gate[c] = 1.0 / (1.0 + std::exp(-gate[c]));
    }

    Tape tape;
    const Tensor& y = tape.value(se_block(tape.leaf(x), lift(tape, params)));
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t t = 0; t < steps; ++t) {
        if (std::fabs(y.at(c, t) - gate[c] * x.at(c, t)) > 1e-15) {
          return {"se_algebra", false, "rescale is not gate times input at channel " +
                                           std::to_string(c)};
        }
      }
    }

    // Forcing the gate to one leaves the input untouched.
    Tape bypass;
    Var ones = bypass.leaf(Tensor::full({channels}, 1.0));
    const Tensor& same = bypass.value(se_rescale(bypass.leaf(x), ones));
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (same[i] != x[i]) return {"se_algebra", false, "unit gate is not the identity"};
    }

    // All-zero input stays all-zero whatever the parameters.
    Tensor zeros({channels, steps});
    Tape zero_tape;
    const Tensor& out = zero_tape.value(se_block(zero_tape.leaf(zeros), lift(zero_tape, params)));
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (out[i] != 0.0) return {"se_algebra", false, "zero input produced nonzero output"};
    }
  }
  return {"se_algebra", true, "squeeze, half-gain, rescale and zero cases exact"};
}

SuiteResult softmax_suite() {
  Rng rng(1618);
  for (std::size_t trial = 0; trial < 100; ++trial) {
    std::size_t k = 1 + rng.below(6);
    Tensor logits({k});
    // grid-aligned logits keep the shift addition exact
    for (std::size_t i = 0; i < k; ++i) {
      logits[i] = static_cast<double>(static_cast<long>(rng.below(16384)) - 8192) / 1024.0;
    }
    double shift = static_cast<double>(static_cast<long>(rng.below(1024)) - 512) / 1024.0;
    Tensor shifted({k});
    for (std::size_t i = 0; i < k; ++i) shifted[i] = logits[i] + shift;

    Tape t1, t2;
    const Tensor& p = t1.value(softmax(t1.leaf(logits)));
    const Tensor& q = t2.value(softmax(t2.leaf(shifted)));
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      if (!(p[i] > 0.0 && p[i] < 1.0) && k > 1) {
        return {"softmax", false, "output left the open interval (0, 1)"};
      }
      if (p[i] != q[i]) {
        return {"softmax", false, "constant shift changed the distribution"};
      }
      total += p[i];
    }
    if (std::fabs(total - 1.0) > 1e-12) {
      return {"softmax", false, "probabilities sum to " + fmt(total)};
    }
  }

  // Attention weights form a probability vector.
  for (std::size_t trial = 0; trial < 25; ++trial) {
    std::size_t hidden = 1 + rng.below(3);
    std::size_t count = 1 + rng.below(5);
    Tensor annotations = random_tensor({hidden, count}, rng);
    Tensor query = random_tensor({hidden}, rng);
    AttentionParams params = AttentionParams::make(2, hidden, hidden);
    for (std::size_t i = 0; i < params.w.size(); ++i) params.w[i] = rng.normal();
    for (std::size_t i = 0; i < params.v.size(); ++i) params.v[i] = rng.normal();
    Tape tape;
    AttentionResult res =
        attention_context(tape.leaf(annotations), tape.leaf(query), lift(tape, params));
    const Tensor& w = tape.value(res.weights);
    double total = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
      if (w[i] < 0.0) return {"softmax", false, "negative attention weight"};
      total += w[i];
    }
    if (std::fabs(total - 1.0) > 1e-12) {
      return {"softmax", false, "attention weights sum to " + fmt(total)};
    }
  }
  return {"softmax", true, "probability-vector and shift-invariance properties hold"};
}

}  // namespace selfcheck

std::vector<std::string> verification_suites() {
  return {"gradients", "conv_oracle", "lstm_oracle", "wilcoxon",
          "masking",   "se_algebra",  "softmax"};
}

std::vector<SuiteResult> run_verification(std::span<const std::string> only) {
  using Runner = SuiteResult (*)();
  struct Entry {
    const char* name;
    Runner run;
  };
  static const Entry entries[] = {
      {"gradients", selfcheck::gradient_suite},
      {"conv_oracle", selfcheck::conv_oracle_suite},
      {"lstm_oracle", selfcheck::lstm_oracle_suite},
      {"wilcoxon", selfcheck::wilcoxon_suite},
      {"masking", selfcheck::masking_suite},
      {"se_algebra", selfcheck::se_algebra_suite},
      {"softmax", selfcheck::softmax_suite},
  };
  std::vector<SuiteResult> results;
  if (only.empty()) {
    for (const Entry& e : entries) results.push_back(e.run());
    return results;
  }
  for (const std::string& name : only) {
    bool found = false;
    for (const Entry& e : entries) {
      if (name == e.name) {
        results.push_back(e.run());
        found = true;
        break;
      }
    }
    if (!found) throw LookupError("unknown verification suite '" + name + "'");
  }
  return results;
}

}  // namespace mlstmfcn
