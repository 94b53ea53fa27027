#pragma once

#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mlstmfcn {

struct AccuracyTable {
  std::vector<std::string> datasets;
  std::vector<std::size_t> class_counts;   // per dataset
  std::vector<std::string> models;
  std::vector<std::vector<double>> accuracy;  // [dataset][model], percent
};

// CSV with header `dataset,classes,<model names...>`.
AccuracyTable parse_accuracy_csv(std::istream& in);

// Per-class error in percent: (100 - accuracy) / num_classes.
double pce(double accuracy_percent, std::size_t num_classes);

// Mean of pce over every dataset of the table.
double mpce(const AccuracyTable& table, std::string_view model);

// Ranks 1..k by descending value, ties sharing the average of their
// positions; the ranks of k values always sum to k(k+1)/2.
std::vector<double> average_ranks_descending(std::span<const double> values);

struct RankSummary {
  std::vector<double> arithmetic;  // per model
  std::vector<double> geometric;
};

RankSummary mean_ranks(const AccuracyTable& table);

struct WilcoxonResult {
  double statistic = 0.0;  // min(W+, W-)
  double p_value = 1.0;    // two-sided
  std::size_t n_used = 0;  // pairs left after dropping zero differences
  bool exact = false;
};

// Two-sided signed-rank test: zero differences dropped, average ties, exact
// distribution for n <= 20 (all-zero differences give p = 1), otherwise a
// normal approximation with tie-corrected variance and continuity
// correction.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> x, std::span<const double> y);

// The large-sample approximation alone, for accuracy studies at small n.
double wilcoxon_normal_approx_p(std::span<const double> x, std::span<const double> y);

struct MetricsReport {
  std::vector<std::string> models;
  std::vector<double> arith_rank, geom_rank, mpce;
  std::vector<std::size_t> wins;  // datasets where the model >= the reference model
  std::vector<std::vector<double>> p_matrix;  // symmetric, 1.0 on the diagonal
  std::string reference_model;
  double alpha = 0.05;
};

// Assembles ranks, MPCE, win counts against the reference column (the last
// model when unspecified) and the pairwise signed-rank matrix.
MetricsReport compare_report(const AccuracyTable& table, double alpha = 0.05,
                             std::string_view reference = {});

void write_report_tsv(std::ostream& out, const MetricsReport& report);
// reference_stats, when present, is echoed into the document with per-model
// deltas so divergences from previously published numbers stay visible.
void write_report_json(std::ostream& out, const MetricsReport& report,
                       const std::optional<std::string>& reference_stats_json = std::nullopt);

}  // namespace mlstmfcn
