#include "mlstmfcn/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "mlstmfcn/error.hpp"

namespace mlstmfcn::oracle {

Tensor matmul_loops(const Tensor& a, const Tensor& b) {
  std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t l = 0; l < k; ++l) acc += a.at(i, l) * b.at(l, j);
      out.at(i, j) = acc;
    }
  }
  return out;
}

Tensor conv1d_loops(const Tensor& input, const Tensor& kernels, const Tensor& bias,
                    Padding padding) {
  std::size_t in_channels = input.dim(0);
  std::size_t length = input.dim(1);
  std::size_t out_channels = kernels.dim(0);
  std::size_t width = kernels.dim(1);
  std::size_t out_length = padding == Padding::same ? length : length - width + 1;
  std::size_t left = padding == Padding::same ? (width - 1) / 2 : 0;
  Tensor out({out_channels, out_length});
  for (std::size_t i = 0; i < out_channels; ++i) {
    for (std::size_t t = 0; t < out_length; ++t) {
      double acc = bias[i];
      for (std::size_t tap = 0; tap < width; ++tap) {
        std::ptrdiff_t src =
            static_cast<std::ptrdiff_t>(t + tap) - static_cast<std::ptrdiff_t>(left);
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(length)) continue;
        for (std::size_t s = 0; s < in_channels; ++s) {
          acc += kernels.at(i, tap, s) * input.at(s, static_cast<std::size_t>(src));
        }
      }
      out.at(i, t) = acc;
    }
  }
  return out;
}

std::pair<std::vector<double>, std::vector<double>> lstm_step_scalar(
    const LSTMParams& p, std::span<const double> x, std::span<const double> h_prev,
    std::span<const double> m_prev) {
  std::size_t hidden = p.hidden_size();
  std::size_t input = p.input_size();
  auto sigma = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  auto gate = [&](const Tensor& w, const Tensor& proj, const Tensor& b, std::size_t row) {
    double acc = b[row];
    for (std::size_t j = 0; j < hidden; ++j) acc += w.at(row, j) * h_prev[j];
    for (std::size_t j = 0; j < input; ++j) acc += proj.at(row, j) * x[j];
    return acc;
  };
  std::vector<double> h(hidden), m(hidden);
  for (std::size_t i = 0; i < hidden; ++i) {
    double g_u = sigma(gate(p.w_u, p.i_u, p.b_u, i));
    double g_f = sigma(gate(p.w_f, p.i_f, p.b_f, i));
    double g_o = sigma(gate(p.w_o, p.i_o, p.b_o, i));
    double g_c = std::tanh(gate(p.w_c, p.i_c, p.b_c, i));
    m[i] = g_f * m_prev[i] + g_u * g_c;
    h[i] = std::tanh(g_o * m[i]);
  }
  return {h, m};
}

double wilcoxon_exact_enumeration(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ContractError("wilcoxon oracle: length mismatch");
  std::vector<double> magnitude;
  std::vector<bool> positive;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double d = x[i] - y[i];
    if (d == 0.0) continue;
    magnitude.push_back(std::fabs(d));
    positive.push_back(d > 0.0);
  }
  std::size_t n = magnitude.size();
  if (n == 0) return 1.0;

  // average-tie ranks of |d|
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return magnitude[a] < magnitude[b]; });
  std::vector<double> rank(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && magnitude[order[j + 1]] == magnitude[order[i]]) ++j;
    double shared = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = shared;
    i = j + 1;
  }

  double total = 0.0, w_plus = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    total += rank[k];
    if (positive[k]) w_plus += rank[k];
  }
  double observed = std::min(w_plus, total - w_plus);

  std::uint64_t assignments = std::uint64_t{1} << n;
  std::uint64_t at_most = 0;
  for (std::uint64_t bits = 0; bits < assignments; ++bits) {
    double w = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      if (bits & (std::uint64_t{1} << k)) w += rank[k];
    }
    if (std::min(w, total - w) <= observed + 1e-12) ++at_most;
  }
  return static_cast<double>(at_most) / static_cast<double>(assignments);
}

}  // namespace mlstmfcn::oracle
