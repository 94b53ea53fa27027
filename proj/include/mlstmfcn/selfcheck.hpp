#pragma once

#include <span>
#include <string>
#include <vector>

namespace mlstmfcn {

struct SuiteResult {
  std::string suite;
  bool passed = false;
  std::string detail;
};

namespace selfcheck {

// Finite-difference checks (step 1e-5, max relative error 1e-4, ten random
// instances per unit) for every layer and both full toy models.
SuiteResult gradient_suite();
// Tape convolution against the nested-loop reference on 100 random shapes,
// bit for bit; matmul against the triple-loop reference likewise.
SuiteResult conv_oracle_suite();
// Gated update against the scalar transcription, within 1e-12.
SuiteResult lstm_oracle_suite();
// Exact signed-rank p against brute-force enumeration (1e-12, n <= 12) and
// the normal approximation against the exact value (0.02 absolute at n=12).
SuiteResult wilcoxon_suite();
// Appending masked padding: recurrent branch unchanged bit for bit, frozen
// statistics class probabilities within 1e-9, over 50 random models.
SuiteResult masking_suite();
// Squeeze/excite algebra: constant squeeze, half-gain zero gate, exact
// channel-wise rescale.
SuiteResult se_algebra_suite();
// Softmax and attention weights are stable probability vectors; shift
// invariance of the max-shifted form.
SuiteResult softmax_suite();

}  // namespace selfcheck

std::vector<std::string> verification_suites();

// Runs the named suites (all when empty). Unknown names throw LookupError.
std::vector<SuiteResult> run_verification(std::span<const std::string> only = {});

}  // namespace mlstmfcn
