#include "mlstmfcn/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

#include "mlstmfcn/error.hpp"

namespace mlstmfcn {

namespace {

Tape& tape_of(Var v, const char* op) {
  if (v.tape == nullptr) throw ContractError(std::string(op) + ": unbound variable");
  return *v.tape;
}

void require_same_tape(Var a, Var b, const char* op) {
  if (a.tape != b.tape || a.tape == nullptr) {
    throw ContractError(std::string(op) + ": operands recorded on different tapes");
  }
}

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank-" + std::to_string(rank) +
                         " tensor, got shape " + x.shape_str());
  }
}

[[noreturn]] void shape_mismatch(const char* op, const Tensor& a, const Tensor& b) {
  throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

template <typename F, typename D>
Var unary_elementwise(Var x, const char* op, F fwd, D local_grad) {
  Tape& t = tape_of(x, op);
  const Tensor& in = t.value_at(x.node);
  Tensor out(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  std::size_t xi = x.node;
  return t.record(std::move(out), [xi, local_grad](Tape& t, std::size_t self) {
    const Tensor& dy = t.grad_buffer(self);
    const Tensor& in = t.value_at(xi);
    const Tensor& outv = t.value_at(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < dy.size(); ++i) gx[i] += dy[i] * local_grad(in[i], outv[i]);
  });
}

}  // namespace

// ---- Tape ---------------------------------------------------------------

Var Tape::record(Tensor value, PullFn pull) {
  Node node;
  node.grad = Tensor::zeros(value.shape());
  node.value = std::move(value);
  node.pull = std::move(pull);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Tape::leaf(Tensor value) { return record(std::move(value), PullFn{}); }

const Tensor& Tape::value(Var v) const {
  if (v.tape != this) throw ContractError("Tape::value: variable from another tape");
  return nodes_[v.node].value;
}

const Tensor& Tape::grad(Var v) const {
  if (v.tape != this) throw ContractError("Tape::grad: variable from another tape");
  return nodes_[v.node].grad;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw ContractError("backward: loss recorded on another tape");
  const Tensor& loss_value = nodes_[loss.node].value;
  if (loss_value.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + loss_value.shape_str());
  }
  for (Node& node : nodes_) {
    auto g = node.grad.data();
    std::fill(g.begin(), g.end(), 0.0);
  }
  nodes_[loss.node].grad[0] = 1.0;
  visits_ = 0;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    ++visits_;
    if (nodes_[i].pull) nodes_[i].pull(*this, i);
  }
}

// ---- linear algebra -----------------------------------------------------

Var matmul(Var a, Var b) {
  require_same_tape(a, b, "matmul");
  Tape& t = *a.tape;
  const Tensor& av = t.value_at(a.node);
  const Tensor& bv = t.value_at(b.node);
  require_rank(av, 2, "matmul");
  require_rank(bv, 2, "matmul");
  if (av.dim(1) != bv.dim(0)) shape_mismatch("matmul", av, bv);
  std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t l = 0; l < k; ++l) {
      double aval = av.at(i, l);
      for (std::size_t j = 0; j < n; ++j) out.at(i, j) += aval * bv.at(l, j);
    }
  }
  std::size_t ai = a.node, bi = b.node;
  return t.record(std::move(out), [ai, bi, m, k, n](Tape& t, std::size_t self) {
    const Tensor& dy = t.grad_buffer(self);
    const Tensor& av = t.value_at(ai);
    const Tensor& bv = t.value_at(bi);
    Tensor& ga = t.grad_buffer(ai);
    Tensor& gb = t.grad_buffer(bi);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double g = dy.at(i, j);
        for (std::size_t l = 0; l < k; ++l) {
          ga.at(i, l) += g * bv.at(l, j);
          gb.at(l, j) += av.at(i, l) * g;
        }
      }
    }
  });
}

Var matvec(Var m, Var x) {
  require_same_tape(m, x, "matvec");
  Tape& t = *m.tape;
  const Tensor& mv = t.value_at(m.node);
  const Tensor& xv = t.value_at(x.node);
  require_rank(mv, 2, "matvec");
  require_rank(xv, 1, "matvec");
  if (mv.dim(1) != xv.dim(0)) shape_mismatch("matvec", mv, xv);
  std::size_t rows = mv.dim(0), cols = mv.dim(1);
  Tensor out({rows});
  for (std::size_t i = 0; i < rows; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < cols; ++j) acc += mv.at(i, j) * xv[j];
    out[i] = acc;
  }
  std::size_t mi = m.node, xi = x.node;
  return t.record(std::move(out), [mi, xi, rows, cols](Tape& t, std::size_t self) {
    const Tensor& dy = t.grad_buffer(self);
    const Tensor& mv = t.value_at(mi);
    const Tensor& xv = t.value_at(xi);
    Tensor& gm = t.grad_buffer(mi);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < rows; ++i) {
      double g = dy[i];
      for (std::size_t j = 0; j < cols; ++j) {
        gm.at(i, j) += g * xv[j];
        gx[j] += mv.at(i, j) * g;
      }
    }
  });
}

Var dot(Var a, Var b) {
  require_same_tape(a, b, "dot");
  Tape& t = *a.tape;
  const Tensor& av = t.value_at(a.node);
  const Tensor& bv = t.value_at(b.node);
  require_rank(av, 1, "dot");
  require_rank(bv, 1, "dot");
  if (!av.same_shape(bv)) shape_mismatch("dot", av, bv);
  double acc = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) acc += av[i] * bv[i];
  std::size_t ai = a.node, bi = b.node;
  return t.record(Tensor::scalar(acc), [ai, bi](Tape& t, std::size_t self) {
    double g = t.grad_buffer(self)[0];
    const Tensor& av = t.value_at(ai);
    const Tensor& bv = t.value_at(bi);
    Tensor& ga = t.grad_buffer(ai);
    Tensor& gb = t.grad_buffer(bi);
    for (std::size_t i = 0; i < av.size(); ++i) {
      ga[i] += g * bv[i];
      gb[i] += g * av[i];
    }
  });
}

Var transpose2d(Var x) {
  Tape& t = tape_of(x, "transpose2d");
  const Tensor& xv = t.value_at(x.node);
  require_rank(xv, 2, "transpose2d");
  std::size_t rows = xv.dim(0), cols = xv.dim(1);
  Tensor out({cols, rows});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.at(c, r) = xv.at(r, c);
  std::size_t xi = x.node;
  return t.record(std::move(out), [xi, rows, cols](Tape& t, std::size_t self) {
    const Tensor& dy = t.grad_buffer(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) gx.at(r, c) += dy.at(c, r);
  });
}

// ---- convolution ----------------------------------------------------------

namespace {

struct ConvDims {
  std::size_t batch, in_channels, length, out_channels, width, out_length, left_pad, stride;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, const Tensor& b, Padding padding,
                   std::size_t stride) {
  if (x.rank() != 2 && x.rank() != 3) {
    throw DimensionError("conv1d: input must be rank 2 or 3, got shape " + x.shape_str());
  }
  require_rank(w, 3, "conv1d");
  require_rank(b, 1, "conv1d");
  ConvDims d{};
  d.batch = x.rank() == 3 ? x.dim(0) : 1;
  d.in_channels = x.rank() == 3 ? x.dim(1) : x.dim(0);
  d.length = x.rank() == 3 ? x.dim(2) : x.dim(1);
  d.out_channels = w.dim(0);
  d.width = w.dim(1);
  d.stride = stride;
  if (w.dim(2) != d.in_channels) {
    throw DimensionError("conv1d: kernels expect " + std::to_string(w.dim(2)) +
                         " input channels, input has " + std::to_string(d.in_channels) +
                         " (input " + x.shape_str() + ", kernels " + w.shape_str() + ")");
  }
  if (b.dim(0) != d.out_channels) shape_mismatch("conv1d bias", b, w);
  if (padding == Padding::same) {
    if (stride != 1) throw ContractError("conv1d: same padding requires stride 1");
    d.out_length = d.length;
    d.left_pad = (d.width - 1) / 2;
  } else {
    if (d.width > d.length) {
      throw DimensionError("conv1d: kernel width " + std::to_string(d.width) +
                           " exceeds input length " + std::to_string(d.length) +
                           " with valid padding");
    }
    d.out_length = (d.length - d.width) / stride + 1;
    d.left_pad = 0;
  }
  return d;
}

// Offsets treat rank-2 input as a batch of one.
void conv_forward_sample(const ConvDims& d, const double* x, const double* w, const double* b,
                         double* y) {
  for (std::size_t i = 0; i < d.out_channels; ++i) {
    for (std::size_t t = 0; t < d.out_length; ++t) {
      double acc = b[i];
      for (std::size_t tap = 0; tap < d.width; ++tap) {
        std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * d.stride + tap) -
                             static_cast<std::ptrdiff_t>(d.left_pad);
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(d.length)) continue;
        const double* wrow = w + (i * d.width + tap) * d.in_channels;
        for (std::size_t s = 0; s < d.in_channels; ++s) {
          acc += wrow[s] * x[s * d.length + static_cast<std::size_t>(src)];
        }
      }
      y[i * d.out_length + t] = acc;
    }
  }
}

void conv_backward_sample(const ConvDims& d, const double* x, const double* w, const double* dy,
                          double* gx, double* gw, double* gb) {
  for (std::size_t i = 0; i < d.out_channels; ++i) {
    for (std::size_t t = 0; t < d.out_length; ++t) {
      double g = dy[i * d.out_length + t];
      gb[i] += g;
      for (std::size_t tap = 0; tap < d.width; ++tap) {
        std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t * d.stride + tap) -
                             static_cast<std::ptrdiff_t>(d.left_pad);
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(d.length)) continue;
        double* gwrow = gw + (i * d.width + tap) * d.in_channels;
        const double* wrow = w + (i * d.width + tap) * d.in_channels;
        for (std::size_t s = 0; s < d.in_channels; ++s) {
          std::size_t xoff = s * d.length + static_cast<std::size_t>(src);
          gwrow[s] += g * x[xoff];
          gx[xoff] += g * wrow[s];
        }
      }
    }
  }
}

Var conv1d_impl(Var input, Var kernels, Var bias, Padding padding, std::size_t stride) {
  require_same_tape(input, kernels, "conv1d");
  require_same_tape(input, bias, "conv1d");
  Tape& t = *input.tape;
  const Tensor& xv = t.value_at(input.node);
  const Tensor& wv = t.value_at(kernels.node);
  const Tensor& bv = t.value_at(bias.node);
  ConvDims d = conv_dims(xv, wv, bv, padding, stride);

  Tensor out(xv.rank() == 3 ? std::vector<std::size_t>{d.batch, d.out_channels, d.out_length}
                            : std::vector<std::size_t>{d.out_channels, d.out_length});
  std::size_t x_stride = d.in_channels * d.length;
  std::size_t y_stride = d.out_channels * d.out_length;
  for (std::size_t b = 0; b < d.batch; ++b) {
    conv_forward_sample(d, xv.data().data() + b * x_stride, wv.data().data(), bv.data().data(),
                        out.data().data() + b * y_stride);
  }

  std::size_t xi = input.node, wi = kernels.node, bi = bias.node;
  return t.record(std::move(out), [xi, wi, bi, d, x_stride, y_stride](Tape& t, std::size_t self) {
    const Tensor& dy = t.grad_buffer(self);
    const Tensor& xv = t.value_at(xi);
    const Tensor& wv = t.value_at(wi);
    Tensor& gx = t.grad_buffer(xi);
    Tensor& gw = t.grad_buffer(wi);
    Tensor& gb = t.grad_buffer(bi);
    for (std::size_t b = 0; b < d.batch; ++b) {
      conv_backward_sample(d, xv.data().data() + b * x_stride, wv.data().data(),
                           dy.data().data() + b * y_stride, gx.data().data() + b * x_stride,
                           gw.data().data(), gb.data().data());
    }
#ifdef MLSTMFCN_FAULT_CONV_BACKWARD
    gw[0] += 1e-3;  // deliberate fault for verifying the gradient checker
#endif
  });
}

}  // namespace

Var conv1d(Var input, Var kernels, Var bias, Padding padding) {
  return conv1d_impl(input, kernels, bias, padding, 1);
}

Var conv1d_strided(Var input, Var kernels, Var bias, std::size_t stride) {
  if (stride == 0) throw ContractError("conv1d_strided: stride must be positive");
  return conv1d_impl(input, kernels, bias, Padding::valid, stride);
}

// ---- elementwise ----------------------------------------------------------

Var add(Var a, Var b) {
  require_same_tape(a, b, "add");
  Tape& t = *a.tape;
  const Tensor& av = t.value_at(a.node);
  const Tensor& bv = t.value_at(b.node);
  if (!av.same_shape(bv)) shape_mismatch("add", av, bv);
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  std::size_t ai = a.node, bi = b.node;
  return t.record(std::move(out), [ai, bi](Tape& t, std::size_t self) {
    const Tensor& dy = t.grad_buffer(self);
    Tensor& ga = t.grad_buffer(ai);
    Tensor& gb = t.grad_buffer(bi);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      ga[i] += dy[i];
      gb[i] += dy[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b, "sub");
  Tape& t = *a.tape;
  const Tensor& av = t.value_at(a.node);
  const Tensor& bv = t.value_at(b.node);
  if (!av.same_shape(bv)) shape_mismatch("sub", av, bv);
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  std::size_t ai = a.node, bi = b.node;
  return t.record(std::move(out), [ai, bi](Tape& t, std::size_t self) {
    const Tensor& dy = t.grad_buffer(self);
    Tensor& ga = t.grad_buffer(ai);
    Tensor& gb = t.grad_buffer(bi);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      ga[i] += dy[i];
      gb[i] -= dy[i];
    }
  });
}

Var hadamard(Var a, Var b) {
  require_same_tape(a, b, "hadamard");
  Tape& t = *a.tape;
  const Tensor& av = t.value_at(a.node);
  const Tensor& bv = t.value_at(b.node);
  if (!av.same_shape(bv)) shape_mismatch("hadamard", av, bv);
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  std::size_t ai = a.node, bi = b.node;
  return t.record(std::move(out), [ai, bi](Tape& t, std::size_t self) {
    const Tensor& dy = t.grad_buffer(self);
    const Tensor& av = t.value_at(ai);
    const Tensor& bv = t.value_at(bi);
    Tensor& ga = t.grad_buffer(ai);
    Tensor& gb = t.grad_buffer(bi);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      ga[i] += dy[i] * bv[i];
      gb[i] += dy[i] * av[i];
    }
  });
}

Var scale(Var x, double factor) {
  return unary_elementwise(
      x, "scale", [factor](double v) { return factor * v; },
      [factor](double, double) { return factor; });
}

Var relu(Var x) {
  return unary_elementwise(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double in, double) { return in > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(Var x) {
  return unary_elementwise(
      x, "sigmoid", [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double out) { return out * (1.0 - out); });
}

Var tanh(Var x) {
  return unary_elementwise(
      x, "tanh", [](double v) { return std::tanh(v); },
      [](double, double out) { return 1.0 - out * out; });
}

Var exp(Var x) {
  return unary_elementwise(
      x, "exp", [](double v) { return std::exp(v); },
      [](double, double out) { return out; });
}

Var log(Var x) {
  Tape& t = tape_of(x, "log");
  const Tensor& xv = t.value_at(x.node);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    if (!(xv[i] > 0.0)) {
      throw DomainError("log: non-positive value " + std::to_string(xv[i]) + " at index " +
                        std::to_string(i));
    }
  }
  return unary_elementwise(
      x, "log", [](double v) { return std::log(v); },
      [](double in, double) { return 1.0 / in; });
}

// ---- reductions and shape ops ----------------------------------------------

Var softmax(Var logits) {
  Tape& t = tape_of(logits, "softmax");
  const Tensor& lv = t.value_at(logits.node);
  require_rank(lv, 1, "softmax");
  std::size_t k = lv.size();
  double peak = lv[0];
  for (std::size_t i = 1; i < k; ++i) peak = std::max(peak, lv[i]);
  Tensor out({k});
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    out[i] = std::exp(lv[i] - peak);
    total += out[i];
  }
  for (std::size_t i = 0; i < k; ++i) out[i] /= total;
  std::size_t xi = logits.node;
  return t.record(std::move(out), [xi](Tape& t, std::size_t self) {
    const Tensor& dy = t.grad_buffer(self);
    const Tensor& y = t.value_at(self);
    Tensor& gx = t.grad_buffer(xi);
    double mix = 0.0;
    for (std::size_t i = 0; i < dy.size(); ++i) mix += dy[i] * y[i];
    for (std::size_t i = 0; i < dy.size(); ++i) gx[i] += y[i] * (dy[i] - mix);
  });
}

Var temporal_mean(Var x) {
  Tape& t = tape_of(x, "temporal_mean");
  const Tensor& xv = t.value_at(x.node);
  if (xv.rank() != 2 && xv.rank() != 3) {
    throw DimensionError("temporal_mean: expected rank 2 or 3, got shape " + xv.shape_str());
  }
  std::size_t steps = xv.dim(xv.rank() - 1);
  std::size_t rows = xv.size() / steps;
  Tensor out(xv.rank() == 2 ? std::vector<std::size_t>{xv.dim(0)}
                            : std::vector<std::size_t>{xv.dim(0), xv.dim(1)});
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t s = 0; s < steps; ++s) acc += xv[r * steps + s];
    out[r] = acc / static_cast<double>(steps);
  }
  std::size_t xi = x.node;
  return t.record(std::move(out), [xi, rows, steps](Tape& t, std::size_t self) {
    const Tensor& dy = t.grad_buffer(self);
    Tensor& gx = t.grad_buffer(xi);
    double inv = 1.0 / static_cast<double>(steps);
    for (std::size_t r = 0; r < rows; ++r) {
      double g = dy[r] * inv;
      for (std::size_t s = 0; s < steps; ++s) gx[r * steps + s] += g;
    }
  });
}

Var sum_all(Var x) {
  Tape& t = tape_of(x, "sum_all");
  const Tensor& xv = t.value_at(x.node);
  double acc = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) acc += xv[i];
  std::size_t xi = x.node;
  return t.record(Tensor::scalar(acc), [xi](Tape& t, std::size_t self) {
    double g = t.grad_buffer(self)[0];
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

Var element(Var x, std::size_t index) {
  Tape& t = tape_of(x, "element");
  const Tensor& xv = t.value_at(x.node);
  require_rank(xv, 1, "element");
  if (index >= xv.size()) {
    throw ContractError("element: index " + std::to_string(index) + " out of range for length " +
                        std::to_string(xv.size()));
  }
  std::size_t xi = x.node;
  return t.record(Tensor::scalar(xv[index]), [xi, index](Tape& t, std::size_t self) {
    t.grad_buffer(xi)[index] += t.grad_buffer(self)[0];
  });
}

Var concat(Var a, Var b) {
  require_same_tape(a, b, "concat");
  Tape& t = *a.tape;
  const Tensor& av = t.value_at(a.node);
  const Tensor& bv = t.value_at(b.node);
  require_rank(av, 1, "concat");
  require_rank(bv, 1, "concat");
  std::size_t n = av.size(), m = bv.size();
  Tensor out({n + m});
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i];
  for (std::size_t j = 0; j < m; ++j) out[n + j] = bv[j];
  std::size_t ai = a.node, bi = b.node;
  return t.record(std::move(out), [ai, bi, n, m](Tape& t, std::size_t self) {
    const Tensor& dy = t.grad_buffer(self);
    Tensor& ga = t.grad_buffer(ai);
    Tensor& gb = t.grad_buffer(bi);
    for (std::size_t i = 0; i < n; ++i) ga[i] += dy[i];
    for (std::size_t j = 0; j < m; ++j) gb[j] += dy[n + j];
  });
}

Var time_slice(Var x, std::size_t step) {
  Tape& t = tape_of(x, "time_slice");
  const Tensor& xv = t.value_at(x.node);
  require_rank(xv, 2, "time_slice");
  std::size_t channels = xv.dim(0), length = xv.dim(1);
  if (step >= length) {
    throw DimensionError("time_slice: step " + std::to_string(step) + " out of range for shape " +
                         xv.shape_str());
  }
  Tensor out({channels});
  for (std::size_t c = 0; c < channels; ++c) out[c] = xv.at(c, step);
  std::size_t xi = x.node;
  return t.record(std::move(out), [xi, step, channels](Tape& t, std::size_t self) {
    const Tensor& dy = t.grad_buffer(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t c = 0; c < channels; ++c) gx.at(c, step) += dy[c];
  });
}

Var row_slice(Var x, std::size_t row) {
  Tape& t = tape_of(x, "row_slice");
  const Tensor& xv = t.value_at(x.node);
  require_rank(xv, 2, "row_slice");
  std::size_t rows = xv.dim(0), cols = xv.dim(1);
  if (row >= rows) {
    throw DimensionError("row_slice: row " + std::to_string(row) + " out of range for shape " +
                         xv.shape_str());
  }
  Tensor out({cols});
  for (std::size_t c = 0; c < cols; ++c) out[c] = xv.at(row, c);
  std::size_t xi = x.node;
  return t.record(std::move(out), [xi, row, cols](Tape& t, std::size_t self) {
    const Tensor& dy = t.grad_buffer(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t c = 0; c < cols; ++c) gx.at(row, c) += dy[c];
  });
}

Var sample_slice(Var x, std::size_t index) {
  Tape& t = tape_of(x, "sample_slice");
  const Tensor& xv = t.value_at(x.node);
  require_rank(xv, 3, "sample_slice");
  std::size_t batch = xv.dim(0), rows = xv.dim(1), cols = xv.dim(2);
  if (index >= batch) {
    throw DimensionError("sample_slice: index " + std::to_string(index) +
                         " out of range for shape " + xv.shape_str());
  }
  Tensor out({rows, cols});
  std::size_t base = index * rows * cols;
  for (std::size_t i = 0; i < rows * cols; ++i) out[i] = xv[base + i];
  std::size_t xi = x.node;
  return t.record(std::move(out), [xi, base](Tape& t, std::size_t self) {
    const Tensor& dy = t.grad_buffer(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t i = 0; i < dy.size(); ++i) gx[base + i] += dy[i];
  });
}

namespace {

Var stack_impl(std::span<const Var> parts, std::size_t part_rank, bool as_cols, const char* op) {
  if (parts.empty()) throw DimensionError(std::string(op) + ": nothing to stack");
  Tape& t = tape_of(parts[0], op);
  std::vector<std::size_t> nodes;
  nodes.reserve(parts.size());
  const Tensor& first = t.value_at(parts[0].node);
  require_rank(first, part_rank, op);
  for (const Var& v : parts) {
    if (v.tape != &t) throw ContractError(std::string(op) + ": operands from different tapes");
    const Tensor& pv = t.value_at(v.node);
    if (!pv.same_shape(first)) shape_mismatch(op, pv, first);
    nodes.push_back(v.node);
  }
  std::size_t count = parts.size(), width = first.size();
  Tensor out(as_cols ? std::vector<std::size_t>{width, count}
                     : (part_rank == 0 ? std::vector<std::size_t>{count}
                                       : std::vector<std::size_t>{count, width}));
  for (std::size_t p = 0; p < count; ++p) {
    const Tensor& pv = t.value_at(nodes[p]);
    for (std::size_t i = 0; i < width; ++i) {
      if (as_cols) {
        out.at(i, p) = pv[i];
      } else {
        out[p * width + i] = pv[i];
      }
    }
  }
  return t.record(std::move(out), [nodes, count, width, as_cols](Tape& t, std::size_t self) {
    const Tensor& dy = t.grad_buffer(self);
    for (std::size_t p = 0; p < count; ++p) {
      Tensor& gp = t.grad_buffer(nodes[p]);
      for (std::size_t i = 0; i < width; ++i) {
        gp[i] += as_cols ? dy.at(i, p) : dy[p * width + i];
      }
    }
  });
}

}  // namespace

Var stack_rows(std::span<const Var> rows) { return stack_impl(rows, 1, false, "stack_rows"); }

Var stack_cols(std::span<const Var> cols) { return stack_impl(cols, 1, true, "stack_cols"); }

Var stack_scalars(std::span<const Var> scalars) {
  if (scalars.empty()) throw DimensionError("stack_scalars: nothing to stack");
  Tape& t = tape_of(scalars[0], "stack_scalars");
  std::vector<std::size_t> nodes;
  nodes.reserve(scalars.size());
  for (const Var& v : scalars) {
    if (v.tape != &t) throw ContractError("stack_scalars: operands from different tapes");
    if (t.value_at(v.node).size() != 1) {
      throw DimensionError("stack_scalars: operand is not a scalar, shape " +
                           t.value_at(v.node).shape_str());
    }
    nodes.push_back(v.node);
  }
  Tensor out({nodes.size()});
  for (std::size_t i = 0; i < nodes.size(); ++i) out[i] = t.value_at(nodes[i])[0];
  return t.record(std::move(out), [nodes](Tape& t, std::size_t self) {
    const Tensor& dy = t.grad_buffer(self);
    for (std::size_t i = 0; i < nodes.size(); ++i) t.grad_buffer(nodes[i])[0] += dy[i];
  });
}

Var channel_scale(Var x, Var s) {
  require_same_tape(x, s, "channel_scale");
  Tape& t = *x.tape;
  const Tensor& xv = t.value_at(x.node);
  const Tensor& sv = t.value_at(s.node);
  bool batched = xv.rank() == 3;
  if (!batched && xv.rank() != 2) {
    throw DimensionError("channel_scale: input must be rank 2 or 3, got " + xv.shape_str());
  }
  if (sv.rank() != xv.rank() - 1) shape_mismatch("channel_scale", xv, sv);
  std::size_t batch = batched ? xv.dim(0) : 1;
  std::size_t channels = batched ? xv.dim(1) : xv.dim(0);
  std::size_t steps = batched ? xv.dim(2) : xv.dim(1);
  if (sv.size() != batch * channels) shape_mismatch("channel_scale", xv, sv);
  Tensor out(xv.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      double gain = sv[b * channels + c];
      std::size_t base = (b * channels + c) * steps;
      for (std::size_t u = 0; u < steps; ++u) out[base + u] = gain * xv[base + u];
    }
  }
  std::size_t xi = x.node, si = s.node;
  return t.record(std::move(out), [xi, si, batch, channels, steps](Tape& t, std::size_t self) {
    const Tensor& dy = t.grad_buffer(self);
    const Tensor& xv = t.value_at(xi);
    const Tensor& sv = t.value_at(si);
    Tensor& gx = t.grad_buffer(xi);
    Tensor& gs = t.grad_buffer(si);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t c = 0; c < channels; ++c) {
        double gain = sv[b * channels + c];
        double acc = 0.0;
        std::size_t base = (b * channels + c) * steps;
        for (std::size_t u = 0; u < steps; ++u) {
          gx[base + u] += gain * dy[base + u];
          acc += dy[base + u] * xv[base + u];
        }
        gs[b * channels + c] += acc;
      }
    }
  });
}

Var row_scale(Var x, std::span<const double> factors) {
  Tape& t = tape_of(x, "row_scale");
  const Tensor& xv = t.value_at(x.node);
  require_rank(xv, 2, "row_scale");
  std::size_t rows = xv.dim(0), cols = xv.dim(1);
  if (factors.size() != rows) {
    throw DimensionError("row_scale: " + std::to_string(factors.size()) + " factors for shape " +
                         xv.shape_str());
  }
  std::vector<double> f(factors.begin(), factors.end());
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.at(r, c) = f[r] * xv.at(r, c);
  std::size_t xi = x.node;
  return t.record(std::move(out), [xi, f, rows, cols](Tape& t, std::size_t self) {
    const Tensor& dy = t.grad_buffer(self);
    Tensor& gx = t.grad_buffer(xi);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) gx.at(r, c) += f[r] * dy.at(r, c);
  });
}

namespace {

Var mask_time_impl(Var x, std::vector<std::uint8_t> flat_mask, std::size_t rows, std::size_t steps) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value_at(x.node);
  Tensor out(xv.shape());
  std::size_t samples = flat_mask.size() / steps;
  std::size_t rows_per_sample = rows / samples;
  for (std::size_t b = 0; b < samples; ++b) {
    for (std::size_t r = 0; r < rows_per_sample; ++r) {
      std::size_t base = (b * rows_per_sample + r) * steps;
      for (std::size_t u = 0; u < steps; ++u) {
        out[base + u] = flat_mask[b * steps + u] ? xv[base + u] : 0.0;
      }
    }
  }
  std::size_t xi = x.node;
  return t.record(std::move(out),
                  [xi, mask = std::move(flat_mask), samples, rows_per_sample, steps](
                      Tape& t, std::size_t self) {
                    const Tensor& dy = t.grad_buffer(self);
                    Tensor& gx = t.grad_buffer(xi);
                    for (std::size_t b = 0; b < samples; ++b) {
                      for (std::size_t r = 0; r < rows_per_sample; ++r) {
                        std::size_t base = (b * rows_per_sample + r) * steps;
                        for (std::size_t u = 0; u < steps; ++u) {
                          if (mask[b * steps + u]) gx[base + u] += dy[base + u];
                        }
                      }
                    }
                  });
}

}  // namespace

Var mask_time(Var x, std::span<const std::uint8_t> mask) {
  Tape& t = tape_of(x, "mask_time");
  const Tensor& xv = t.value_at(x.node);
  require_rank(xv, 2, "mask_time");
  if (mask.size() != xv.dim(1)) {
    throw DimensionError("mask_time: mask length " + std::to_string(mask.size()) +
                         " does not match shape " + xv.shape_str());
  }
  return mask_time_impl(x, std::vector<std::uint8_t>(mask.begin(), mask.end()), xv.dim(0),
                        xv.dim(1));
}

Var mask_time(Var x, const std::vector<std::vector<std::uint8_t>>& masks) {
  Tape& t = tape_of(x, "mask_time");
  const Tensor& xv = t.value_at(x.node);
  require_rank(xv, 3, "mask_time");
  if (masks.size() != xv.dim(0)) {
    throw DimensionError("mask_time: " + std::to_string(masks.size()) + " masks for batch shape " +
                         xv.shape_str());
  }
  std::vector<std::uint8_t> flat;
  flat.reserve(xv.dim(0) * xv.dim(2));
  for (const auto& m : masks) {
    if (m.size() != xv.dim(2)) {
      throw DimensionError("mask_time: mask length " + std::to_string(m.size()) +
                           " does not match shape " + xv.shape_str());
    }
    flat.insert(flat.end(), m.begin(), m.end());
  }
  return mask_time_impl(x, std::move(flat), xv.dim(0) * xv.dim(1), xv.dim(2));
}

// ---- verification harness ---------------------------------------------------

namespace {

double evaluate_scalar(const ScalarFn& f, const Tensor& point) {
  Tape tape;
  Var x = tape.leaf(point);
  Var out = f(tape, x);
  const Tensor& v = tape.value(out);
  if (v.size() != 1) {
    throw ContractError("finite_difference_check: f must produce a scalar, got shape " +
                        v.shape_str());
  }
  return v[0];
}

}  // namespace

double finite_difference_check(const ScalarFn& f, const Tensor& point, double step) {
  if (!(step > 0.0)) throw ContractError("finite_difference_check: step must be positive");
  Tape tape;
  Var x = tape.leaf(point);
  Var loss = f(tape, x);
  const Tensor& loss_value = tape.value(loss);
  if (loss_value.size() != 1) {
    throw ContractError("finite_difference_check: f must produce a scalar, got shape " +
                        loss_value.shape_str());
  }
  if (!loss_value.all_finite()) {
    throw NumericError("finite_difference_check: non-finite value at base point");
  }
  tape.backward(loss);
  Tensor analytic = tape.grad(x);

  Tensor probe = point;
  double worst = 0.0;
  for (std::size_t i = 0; i < point.size(); ++i) {
    probe[i] = point[i] + step;
    double up = evaluate_scalar(f, probe);
    probe[i] = point[i] - step;
    double down = evaluate_scalar(f, probe);
    probe[i] = point[i];
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_difference_check: non-finite evaluation at coordinate " +
                         std::to_string(i));
    }
    double numeric = (up - down) / (2.0 * step);
    double denom = std::max({1.0, std::fabs(analytic[i]), std::fabs(numeric)});
    worst = std::max(worst, std::fabs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace mlstmfcn
