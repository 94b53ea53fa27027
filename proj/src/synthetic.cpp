#include "mlstmfcn/synthetic.hpp"

#include <cmath>
#include <string>

#include "mlstmfcn/rng.hpp"

namespace mlstmfcn {

namespace {

constexpr double kTau = 2.0 * 3.14159265358979323846;

RawSeries make_wave(const ToySpec& spec, Rng& rng, int label, std::string id) {
  RawSeries s;
  s.id = std::move(id);
  s.label = label;
  s.length = spec.length;
  double cycles = 1.5 + 2.0 * rng.uniform();
  double phase = kTau * rng.uniform();
  for (std::size_t v = 0; v < spec.variables; ++v) {
    double amplitude = 0.8 + 0.4 * rng.uniform();
    double shift = 0.7 * static_cast<double>(v);
    std::vector<double> values(spec.length);
    for (std::size_t t = 0; t < spec.length; ++t) {
      double angle = kTau * cycles * static_cast<double>(t) / static_cast<double>(spec.length) +
                     phase + shift;
      double base = std::sin(angle);
      if (label == 1) base = base >= 0.0 ? 1.0 : -1.0;  // square wave
      values[t] = amplitude * base + spec.noise * rng.normal();
    }
    s.channels.push_back(std::move(values));
  }
  return s;
}

}  // namespace

RawSplit toy_split(const ToySpec& spec, bool test_split) {
  Rng rng = Rng(spec.seed).fork(test_split ? 2 : 1);
  std::size_t per_class = test_split ? spec.test_per_class : spec.train_per_class;
  const char* tag = test_split ? "test" : "train";
  RawSplit split;
  split.num_variables = spec.variables;
  for (int label = 0; label < 2; ++label) {
    for (std::size_t i = 0; i < per_class; ++i) {
      std::string id = std::string(tag) + "_" + (label == 0 ? "sine" : "square") + "_" +
                       std::to_string(i);
      split.samples.push_back(make_wave(spec, rng, label, std::move(id)));
    }
  }
  return split;
}

void write_toy_dataset(const std::filesystem::path& dir, const ToySpec& spec) {
  save_dataset_dir(dir, "toy_waves", {"sine", "square"}, toy_split(spec, false),
                   toy_split(spec, true));
}

}  // namespace mlstmfcn
