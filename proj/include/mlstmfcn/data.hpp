#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "mlstmfcn/tensor.hpp"

namespace mlstmfcn {

// One multivariate series as parsed from disk: a fixed number of variable
// rows sharing one true length, plus an integer class label.
struct RawSeries {
  std::string id;
  int label = 0;
  std::vector<std::vector<double>> channels;  // [M][length]
  std::size_t length = 0;
};

struct RawSplit {
  std::vector<RawSeries> samples;
  std::size_t num_variables = 0;
};

// MTS-CSV: header `sample_id,label,variable,values...`, then one row per
// (sample, variable) with the values of that variable. Rows of a sample are
// contiguous with variables ascending; shorter series simply carry fewer
// value columns. Parse errors name the offending line.
RawSplit parse_mts_csv(std::istream& in);
void write_mts_csv(std::ostream& out, const RawSplit& split);

struct NormStats {
  std::vector<double> mean, stddev;  // per variable; stddev floored at 1e-8
};

// Per-variable statistics over the unpadded values of the training split;
// population (1/n) standard deviation.
NormStats compute_norm_stats(const RawSplit& train);
void apply_normalization(RawSplit& split, const NormStats& stats);

// Zero-pads after the true length; mask is true exactly on [0, length).
std::pair<Tensor, std::vector<std::uint8_t>> pad_and_mask(
    const std::vector<std::vector<double>>& channels, std::size_t padded_length);

struct Dataset {
  std::vector<Tensor> samples;                     // [M x N] each
  std::vector<std::vector<std::uint8_t>> masks;    // length N each
  std::vector<int> labels;
  std::vector<std::size_t> lengths;
  std::size_t num_variables = 0;
  std::size_t max_length = 0;
  std::size_t num_classes = 0;
  NormStats stats;      // the training statistics this split was scaled with
  std::string split;    // "train" or "test"
};

// Normalizes every split with the training statistics, pads to the given
// length (0 = longest series across the splits) and builds masks. The first
// element of the result is the train split.
std::vector<Dataset> znormalize(const RawSplit& train, std::vector<RawSplit> others,
                                std::size_t padded_length = 0);

struct DatasetDir {
  std::string name;
  std::vector<std::string> class_names;
  Dataset train, test;
};

// Directory layout: train.csv, test.csv and a meta.json sidecar with the
// dataset name and class names.
DatasetDir load_dataset_dir(const std::filesystem::path& dir, std::size_t padded_length = 0);
void save_dataset_dir(const std::filesystem::path& dir, const std::string& name,
                      const std::vector<std::string>& class_names, const RawSplit& train,
                      const RawSplit& test);

// Label histogram of a split; throws if any class in [0, num_classes) is
// absent.
std::vector<std::size_t> label_counts(const Dataset& data);

}  // namespace mlstmfcn
