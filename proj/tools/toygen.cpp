// Writes the two-class waveform benchmark (noisy sines vs noisy squares) as
// an MTS-CSV dataset directory, handy for smoke-testing the trainer.
#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "mlstmfcn/synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"generate the synthetic waveform dataset"};
  std::string out = "toy";
  mlstmfcn::ToySpec spec;
  app.add_option("--out", out, "dataset directory to create");
  app.add_option("--variables", spec.variables, "variables per sample");
  app.add_option("--length", spec.length, "time steps per sample");
  app.add_option("--train-per-class", spec.train_per_class, "training samples per class");
  app.add_option("--test-per-class", spec.test_per_class, "test samples per class");
  app.add_option("--noise", spec.noise, "additive noise level");
  app.add_option("--seed", spec.seed, "random seed");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    mlstmfcn::write_toy_dataset(out, spec);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  std::cout << "wrote " << out << "/train.csv, test.csv, meta.json\n";
  return 0;
}
