#pragma once

#include <span>
#include <utility>
#include <vector>

#include "mlstmfcn/layers.hpp"
#include "mlstmfcn/tensor.hpp"

namespace mlstmfcn::oracle {

// Independent reference implementations, written directly from the defining
// formulas. They deliberately avoid the tape machinery so the production path
// and the reference path share no code.

// Triple-loop matrix product.
Tensor matmul_loops(const Tensor& a, const Tensor& b);

// Quadruple-loop temporal cross-correlation with the same index convention
// and accumulation order (kernel tap, then input channel) as the tape op, so
// results match bit for bit. Input [C_in x T], kernels [C_out x d x C_in].
Tensor conv1d_loops(const Tensor& input, const Tensor& kernels, const Tensor& bias,
                    Padding padding);

// Scalar-loop transcription of the gated update equations.
// Returns (hidden, memory).
std::pair<std::vector<double>, std::vector<double>> lstm_step_scalar(
    const LSTMParams& params, std::span<const double> x, std::span<const double> h_prev,
    std::span<const double> m_prev);

// Exact two-sided signed-rank p-value by brute-force enumeration of all 2^n
// sign assignments. Zero differences dropped, average ties. Practical up to
// n of about 20.
double wilcoxon_exact_enumeration(std::span<const double> x, std::span<const double> y);

}  // namespace mlstmfcn::oracle
