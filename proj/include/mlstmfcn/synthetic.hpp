#pragma once

#include <cstdint>
#include <filesystem>

#include "mlstmfcn/data.hpp"

namespace mlstmfcn {

// Two-class waveform benchmark: class 0 samples are noisy sines, class 1
// noisy square waves, with per-sample frequency/phase and per-variable
// amplitude jitter. All series run the full length.
struct ToySpec {
  std::size_t variables = 3;
  std::size_t length = 32;
  std::size_t train_per_class = 20;
  std::size_t test_per_class = 20;
  double noise = 0.15;
  std::uint64_t seed = 7;
};

RawSplit toy_split(const ToySpec& spec, bool test_split);

// Writes train.csv / test.csv / meta.json under the directory.
void write_toy_dataset(const std::filesystem::path& dir, const ToySpec& spec);

}  // namespace mlstmfcn
