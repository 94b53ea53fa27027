#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "mlstmfcn/tensor.hpp"

namespace mlstmfcn {

enum class Padding { same, valid };
enum class Mode { train, infer };

class Tape;

// Lightweight handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t node = 0;
};

// Recorded computation graph for reverse-mode differentiation. Nodes are
// appended in execution order, which is by construction a topological order;
// backward() replays the whole tape once, in reverse.
//
// A tape is single-owner while recording. Recorded values are immutable.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value);

  const Tensor& value(Var v) const;
  // Accumulated gradient of the last backward() target with respect to v.
  const Tensor& grad(Var v) const;

  // Seeds d(loss)/d(loss) = 1 and pulls gradients through every node in
  // reverse order. The loss must be a scalar (single-element) variable.
  void backward(Var loss);

  std::size_t node_count() const { return nodes_.size(); }
  std::size_t last_backward_visits() const { return visits_; }

  // Primitive recorder. The pull function reads grad_buffer(self) and adds
  // contributions into the parents' gradient buffers. Closures must capture
  // node indices, never references into the tape.
  using PullFn = std::function<void(Tape&, std::size_t)>;
  Var record(Tensor value, PullFn pull);

  Tensor& grad_buffer(std::size_t node) { return nodes_[node].grad; }
  const Tensor& value_at(std::size_t node) const { return nodes_[node].value; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    PullFn pull;  // empty for leaves
  };
  std::vector<Node> nodes_;
  std::size_t visits_ = 0;
};

// ---- linear algebra ---------------------------------------------------

Var matmul(Var a, Var b);        // [m x k] . [k x n] -> [m x n]
Var matvec(Var m, Var x);        // [m x k] . [k] -> [m]
Var dot(Var a, Var b);           // [n] . [n] -> scalar
Var transpose2d(Var x);          // [a x b] -> [b x a]

// Temporal cross-correlation. Input is [C_in x T] or batched [B x C_in x T];
// kernels are [C_out x d x C_in], bias [C_out]. "same" zero-pads so the
// output keeps length T (left pad (d-1)/2); "valid" yields T - d + 1.
// Accumulation order per output element is kernel tap first, then input
// channel, so a nested-loop reference reproduces results bit for bit.
Var conv1d(Var input, Var kernels, Var bias, Padding padding);
// Non-overlapping valid windows at the given stride (kernel width = any,
// output length (T - d)/stride + 1). Used to shorten long sequences.
Var conv1d_strided(Var input, Var kernels, Var bias, std::size_t stride);

// ---- elementwise ------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var x, double factor);
Var relu(Var x);      // relu'(0) = 0
Var sigmoid(Var x);
Var tanh(Var x);
Var exp(Var x);
Var log(Var x);       // domain error on non-positive input

// ---- reductions and shape ops ----------------------------------------

Var softmax(Var logits);    // rank-1; max-shifted for stability
Var temporal_mean(Var x);   // [C x T] -> [C], or [B x C x T] -> [B x C]
Var sum_all(Var x);         // scalar
Var element(Var x, std::size_t index);      // rank-1 pick -> scalar
Var concat(Var a, Var b);                   // rank-1 concat
Var time_slice(Var x, std::size_t t);       // [C x T] column -> [C]
Var row_slice(Var x, std::size_t row);      // [R x C] row -> [C]
Var sample_slice(Var x, std::size_t b);     // [B x C x T] -> [C x T]
Var stack_rows(std::span<const Var> rows);        // B vectors [K] -> [B x K]
Var stack_cols(std::span<const Var> cols);        // S vectors [H] -> [H x S]
Var stack_scalars(std::span<const Var> scalars);  // S scalars -> [S]

// Per-channel rescale: x [C x T] with s [C], or x [B x C x T] with s [B x C].
Var channel_scale(Var x, Var s);
// Multiply row r of a rank-2 tensor by the constant factors[r].
Var row_scale(Var x, std::span<const double> factors);
// Zero the time columns where mask is false (constants, no mask gradient).
Var mask_time(Var x, std::span<const std::uint8_t> mask);                      // rank-2
Var mask_time(Var x, const std::vector<std::vector<std::uint8_t>>& masks);     // rank-3

// ---- verification harness ---------------------------------------------

// A scalar-valued function of one tensor, expressed through tape ops.
using ScalarFn = std::function<Var(Tape&, Var)>;

// Max over coordinates of |analytic - central difference| scaled by
// max(1, |analytic|, |central|). Throws NumericError (naming the
// coordinate) if any evaluation is non-finite.
double finite_difference_check(const ScalarFn& f, const Tensor& point, double step);

}  // namespace mlstmfcn
