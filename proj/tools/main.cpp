#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mlstmfcn/checkpoint.hpp"
#include "mlstmfcn/data.hpp"
#include "mlstmfcn/error.hpp"
#include "mlstmfcn/evalstats.hpp"
#include "mlstmfcn/fsio.hpp"
#include "mlstmfcn/model.hpp"
#include "mlstmfcn/optim.hpp"
#include "mlstmfcn/selfcheck.hpp"

namespace fs = std::filesystem;
using namespace mlstmfcn;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

std::string nine(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string two_decimals(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::array<std::size_t, 3> parse_triple_list(const std::string& text, const char* what) {
  std::array<std::size_t, 3> out{};
  std::istringstream in(text);
  std::string part;
  std::size_t i = 0;
  while (std::getline(in, part, ',')) {
    if (i >= 3) throw ConfigError(std::string(what) + " needs exactly three values");
    out[i++] = static_cast<std::size_t>(std::stoull(part));
  }
  if (i != 3) throw ConfigError(std::string(what) + " needs exactly three values");
  return out;
}

std::string triple_to_string(const std::array<std::size_t, 3>& t) {
  return std::to_string(t[0]) + "," + std::to_string(t[1]) + "," + std::to_string(t[2]);
}

// Resolution order for every option: explicit flag, then config file, then
// the MLSTMFCN_OUT_DIR override (output directory only), then the default.
// The snapshot records the fully resolved values.
struct KvBinding {
  std::string key;
  CLI::Option* option = nullptr;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

class Bindings {
 public:
  void add(std::string key, CLI::Option* option, std::function<void(const std::string&)> set,
           std::function<std::string()> get) {
    items_.push_back({std::move(key), option, std::move(set), std::move(get)});
  }

  void apply_config(const fs::path& file) const {
    KvMap kv = parse_kv_file(file);
    for (const KvBinding& b : items_) {
      auto it = kv.find(b.key);
      if (it == kv.end()) continue;
      if (b.option != nullptr && b.option->count() > 0) continue;  // flags win
      b.set(it->second);
    }
  }

  std::string snapshot(const std::string& command) const {
    KvMap kv;
    kv["command"] = command;
    for (const KvBinding& b : items_) kv[b.key] = b.get();
    return render_kv(kv);
  }

 private:
  std::vector<KvBinding> items_;
};

void bind_size(Bindings& b, const std::string& key, CLI::Option* opt, std::size_t& var) {
  b.add(key, opt, [&var](const std::string& v) { var = std::stoull(v); },
        [&var] { return std::to_string(var); });
}

void bind_u64(Bindings& b, const std::string& key, CLI::Option* opt, std::uint64_t& var) {
  b.add(key, opt, [&var](const std::string& v) { var = std::stoull(v); },
        [&var] { return std::to_string(var); });
}

void bind_double(Bindings& b, const std::string& key, CLI::Option* opt, double& var) {
  b.add(key, opt, [&var](const std::string& v) { var = std::stod(v); },
        [&var] {
          char buf[40];
          std::snprintf(buf, sizeof buf, "%.17g", var);
          return std::string(buf);
        });
}

void bind_string(Bindings& b, const std::string& key, CLI::Option* opt, std::string& var) {
  b.add(key, opt, [&var](const std::string& v) { var = v; }, [&var] { return var; });
}

void bind_bool(Bindings& b, const std::string& key, CLI::Option* opt, bool& var) {
  b.add(key, opt,
        [&var](const std::string& v) { var = v == "1" || v == "true" || v == "yes"; },
        [&var] { return var ? std::string("1") : std::string("0"); });
}

std::string default_out_dir() {
  if (const char* env = std::getenv("MLSTMFCN_OUT_DIR")) return env;
  return "out";
}

// ---- train -----------------------------------------------------------------

struct TrainOpts {
  std::string data;
  std::string out = default_out_dir();
  std::string config_file;
  std::string class_weight_file;
  std::uint64_t seed = 0;
  std::size_t cells = 8;
  bool attention = false;
  std::size_t epochs = 250;
  std::size_t batch = 128;
  std::string filters = "128,256,128";
  std::string kernels = "8,5,3";
  std::size_t reduction = 16;
  double dropout = 0.8;
  std::size_t lstm_stride = 1;
  bool allow_offgrid = false;
  double lr_initial = 1e-3;
  double lr_final = 1e-4;
};

void add_train_options(CLI::App& cmd, TrainOpts& o, Bindings& b) {
  bind_string(b, "data", cmd.add_option("--data", o.data, "dataset directory")->required(false),
              o.data);
  bind_string(b, "out", cmd.add_option("--out", o.out, "output directory"), o.out);
  bind_u64(b, "seed", cmd.add_option("--seed", o.seed, "random seed"), o.seed);
  bind_size(b, "cells", cmd.add_option("--cells", o.cells, "LSTM cell count"), o.cells);
  bind_bool(b, "attention", cmd.add_flag("--attention", o.attention, "use the attention LSTM"),
            o.attention);
  bind_size(b, "epochs", cmd.add_option("--epochs", o.epochs, "training epochs"), o.epochs);
  bind_size(b, "batch", cmd.add_option("--batch", o.batch, "batch size"), o.batch);
  bind_string(b, "filters", cmd.add_option("--filters", o.filters, "conv filters a,b,c"),
              o.filters);
  bind_string(b, "kernels", cmd.add_option("--kernels", o.kernels, "conv kernel widths a,b,c"),
              o.kernels);
  bind_size(b, "reduction", cmd.add_option("--reduction", o.reduction, "SE reduction ratio"),
            o.reduction);
  bind_double(b, "dropout", cmd.add_option("--dropout", o.dropout, "LSTM-branch dropout rate"),
              o.dropout);
  bind_size(b, "lstm_stride",
            cmd.add_option("--lstm-stride", o.lstm_stride,
                           "strided conv in front of the LSTM branch (1 = off)"),
            o.lstm_stride);
  bind_bool(b, "allow_offgrid",
            cmd.add_flag("--allow-offgrid", o.allow_offgrid,
                         "permit cell counts outside the 8..128 search range"),
            o.allow_offgrid);
  bind_double(b, "lr_initial", cmd.add_option("--lr-initial", o.lr_initial, "initial learning rate"),
              o.lr_initial);
  bind_double(b, "lr_final", cmd.add_option("--lr-final", o.lr_final, "final learning rate"),
              o.lr_final);
  bind_string(b, "class_weights",
              cmd.add_option("--class-weights", o.class_weight_file,
                             "file with one class weight per line"),
              o.class_weight_file);
}

std::vector<double> read_class_weights(const fs::path& file) {
  std::istringstream in(read_file(file));
  std::vector<double> weights;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    weights.push_back(std::stod(line));
  }
  return weights;
}

ModelConfig model_config_from(const TrainOpts& o, const Dataset& train) {
  ModelConfig config;
  config.num_variables = train.num_variables;
  config.max_length = train.max_length;
  config.num_classes = train.num_classes;
  config.conv_filters = parse_triple_list(o.filters, "--filters");
  config.conv_kernel_widths = parse_triple_list(o.kernels, "--kernels");
  config.se_reduction = o.reduction;
  config.lstm_cells = o.cells;
  config.attention = o.attention;
  config.dropout_rate = o.dropout;
  config.lstm_stride = o.lstm_stride;
  return config;
}

int run_train(const TrainOpts& o, const Bindings& bindings) {
  if (o.data.empty()) {
    std::cerr << "train: --data is required\n";
    return kExitUsage;
  }
  if (!o.allow_offgrid && (o.cells < 8 || o.cells > 128)) {
    std::cerr << "train: --cells " << o.cells
              << " lies outside the 8..128 search range (pass --allow-offgrid to override)\n";
    return kExitUsage;
  }
  DatasetDir data = load_dataset_dir(o.data);
  if (data.train.samples.empty()) {
    std::cerr << "train: no samples in " << o.data << "/train.csv\n";
    return kExitRuntime;
  }
  ModelConfig config = model_config_from(o, data.train);
  validate(config);

  TrainPlan plan;
  plan.epochs = o.epochs;
  plan.batch_size = o.batch;
  plan.lr_initial = o.lr_initial;
  plan.lr_final = o.lr_final;
  plan.seed = o.seed;

  std::vector<double> weights;
  if (!o.class_weight_file.empty()) weights = read_class_weights(o.class_weight_file);

  Rng rng(o.seed);
  ModelParams params = init_params(config, rng);
  FitResult fit_log = fit(params, config, data.train, plan, weights);

  std::ostringstream log;
  for (const EpochStats& e : fit_log.epochs) {
    std::string line = std::to_string(e.epoch) + "\t" + nine(e.lr) + "\t" + nine(e.loss) + "\t" +
                       nine(e.accuracy);
    log << line << '\n';
    std::cout << line << '\n';
  }

  fs::path out_dir(o.out);
  save_checkpoint(out_dir / "model.ckpt", config, params);
  atomic_write_file(out_dir / "train_log.tsv", log.str());
  atomic_write_file(out_dir / "config_snapshot.txt", bindings.snapshot("train"));
  std::cout << "checkpoint written to " << (out_dir / "model.ckpt").string() << '\n';
  return kExitOk;
}

// ---- evaluate -----------------------------------------------------------------

struct EvalOpts {
  std::string checkpoint;
  std::string data;
  std::string split = "test";
  std::string out = default_out_dir();
  std::string config_file;
};

int run_evaluate(const EvalOpts& o, const Bindings& bindings) {
  if (o.checkpoint.empty() || o.data.empty()) {
    std::cerr << "evaluate: --checkpoint and --data are required\n";
    return kExitUsage;
  }
  if (o.split != "train" && o.split != "test") {
    std::cerr << "evaluate: --split must be train or test\n";
    return kExitUsage;
  }
  auto [config, params] = load_checkpoint(o.checkpoint);

  DatasetDir dir = load_dataset_dir(o.data, config.max_length);
  const Dataset& split = o.split == "train" ? dir.train : dir.test;
  if (split.num_variables != config.num_variables) {
    std::cerr << "evaluate: dataset has " << split.num_variables
              << " variables, checkpoint expects " << config.num_variables << "\n";
    return kExitRuntime;
  }
  if (split.samples.empty()) {
    std::cerr << "evaluate: no samples in the " << o.split << " split\n";
    return kExitRuntime;
  }
  if (split.num_classes > config.num_classes) {
    std::cerr << "evaluate: dataset has " << split.num_classes
              << " classes, checkpoint expects " << config.num_classes << "\n";
    return kExitRuntime;
  }

  std::vector<Prediction> predictions = predict_batch(params, config, split.samples, split.masks);
  std::size_t correct = 0;
  std::vector<std::size_t> true_pos(config.num_classes, 0), false_pos(config.num_classes, 0),
      false_neg(config.num_classes, 0);
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    std::size_t truth = static_cast<std::size_t>(split.labels[i]);
    std::size_t guess = predictions[i].predicted_class;
    if (guess == truth) {
      ++correct;
      ++true_pos[truth];
    } else {
      ++false_pos[guess];
      ++false_neg[truth];
    }
  }
  double accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(predictions.size());
  double per_class_error = pce(accuracy, config.num_classes);

  std::cout << "split: " << o.split << "\n";
  std::cout << "samples: " << predictions.size() << "\n";
  std::cout << "accuracy: " << two_decimals(accuracy) << "\n";
  std::cout << "pce: " << two_decimals(per_class_error) << "\n";
  std::cout << "class\ttp\tfp\tfn\tprecision\trecall\n";
  for (std::size_t c = 0; c < config.num_classes; ++c) {
    double precision = true_pos[c] + false_pos[c] == 0
                           ? 0.0
                           : static_cast<double>(true_pos[c]) /
                                 static_cast<double>(true_pos[c] + false_pos[c]);
    double recall = true_pos[c] + false_neg[c] == 0
                        ? 0.0
                        : static_cast<double>(true_pos[c]) /
                              static_cast<double>(true_pos[c] + false_neg[c]);
    std::string name = c < dir.class_names.size() ? dir.class_names[c] : std::to_string(c);
    std::cout << name << '\t' << true_pos[c] << '\t' << false_pos[c] << '\t' << false_neg[c]
              << '\t' << nine(precision) << '\t' << nine(recall) << '\n';
  }

  std::string model_name = config.attention ? "MALSTM-FCN" : "MLSTM-FCN";
  std::ostringstream row;
  row << "dataset,classes," << model_name << '\n'
      << dir.name << ',' << config.num_classes << ',' << two_decimals(accuracy) << '\n';
  fs::path out_dir(o.out);
  atomic_write_file(out_dir / "eval_row.csv", row.str());
  atomic_write_file(out_dir / "config_snapshot.txt", bindings.snapshot("evaluate"));
  return kExitOk;
}

// ---- gridsearch -----------------------------------------------------------------

struct GridOpts {
  TrainOpts train;
  std::string grid = "8,16,32,64,128";
};

int run_gridsearch(const GridOpts& o, const Bindings& bindings) {
  if (o.train.data.empty()) {
    std::cerr << "gridsearch: --data is required\n";
    return kExitUsage;
  }
  std::vector<std::size_t> grid;
  {
    std::istringstream in(o.grid);
    std::string part;
    while (std::getline(in, part, ',')) grid.push_back(std::stoull(part));
  }
  if (grid.empty()) {
    std::cerr << "gridsearch: empty --grid\n";
    return kExitUsage;
  }
  std::sort(grid.begin(), grid.end());  // ties resolve to the smallest cell count
  DatasetDir data = load_dataset_dir(o.train.data);
  if (data.train.samples.empty() || data.test.samples.empty()) {
    std::cerr << "gridsearch: needs non-empty train and test splits\n";
    return kExitRuntime;
  }

  fs::path out_dir(o.train.out);
  std::ostringstream tsv;
  tsv << "cells\taccuracy\n";
  std::size_t best_cells = 0;
  double best_accuracy = -1.0;
  for (std::size_t cells : grid) {
    TrainOpts setting = o.train;
    setting.cells = cells;
    setting.allow_offgrid = true;  // the grid itself defines the range
    ModelConfig config = model_config_from(setting, data.train);
    validate(config);
    TrainPlan plan;
    plan.epochs = setting.epochs;
    plan.batch_size = setting.batch;
    plan.lr_initial = setting.lr_initial;
    plan.lr_final = setting.lr_final;
    plan.seed = Rng(setting.seed).fork(cells).seed();

    Rng rng(plan.seed);
    ModelParams params = init_params(config, rng);
    fit(params, config, data.train, plan);

    std::vector<Prediction> predictions =
        predict_batch(params, config, data.test.samples, data.test.masks);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
      if (predictions[i].predicted_class == static_cast<std::size_t>(data.test.labels[i])) {
        ++correct;
      }
    }
    double accuracy =
        100.0 * static_cast<double>(correct) / static_cast<double>(predictions.size());
    tsv << cells << '\t' << nine(accuracy) << '\n';
    std::cout << "cells " << cells << ": " << two_decimals(accuracy) << "\n";
    save_checkpoint(out_dir / ("cells_" + std::to_string(cells)) / "model.ckpt", config, params);
    if (accuracy > best_accuracy) {  // ties keep the earlier (smaller) setting
      best_accuracy = accuracy;
      best_cells = cells;
    }
  }

  tsv << "best\t" << best_cells << '\n';
  atomic_write_file(out_dir / "gridsearch.tsv", tsv.str());
  atomic_write_file(out_dir / "config_snapshot.txt", bindings.snapshot("gridsearch"));
  std::cout << "best cells: " << best_cells << " (" << two_decimals(best_accuracy) << ")\n";
  return kExitOk;
}

// ---- compare -----------------------------------------------------------------

struct CompareOpts {
  std::string table;
  std::string reference;
  std::string expected;
  std::string out = default_out_dir();
  std::string config_file;
  double alpha = 0.05;
};

int run_compare(const CompareOpts& o, const Bindings& bindings) {
  if (o.table.empty()) {
    std::cerr << "compare: --table is required\n";
    return kExitUsage;
  }
  std::istringstream in(read_file(o.table));
  AccuracyTable table = parse_accuracy_csv(in);
  MetricsReport report = compare_report(table, o.alpha, o.reference);

  std::ostringstream tsv;
  write_report_tsv(tsv, report);
  std::optional<std::string> expected;
  if (!o.expected.empty()) expected = read_file(o.expected);
  std::ostringstream json;
  write_report_json(json, report, expected);

  fs::path out_dir(o.out);
  atomic_write_file(out_dir / "report.tsv", tsv.str());
  atomic_write_file(out_dir / "report.json", json.str());
  atomic_write_file(out_dir / "config_snapshot.txt", bindings.snapshot("compare"));

  std::cout << tsv.str();
  if (table.datasets.size() < 2) {
    std::cout << "note: a single dataset cannot separate the models; "
                 "the signed-rank test reports p = 1\n";
  }
  std::cout << "report written to " << (out_dir / "report.tsv").string() << " and "
            << (out_dir / "report.json").string() << '\n';
  return kExitOk;
}

// ---- verify -----------------------------------------------------------------

int run_verify(const std::vector<std::string>& suites) {
  std::vector<SuiteResult> results = run_verification(suites);
  bool all_passed = true;
  for (const SuiteResult& r : results) {
    std::cout << (r.passed ? "[PASS] " : "[FAIL] ") << r.suite << ": " << r.detail << '\n';
    all_passed = all_passed && r.passed;
  }
  if (!all_passed) {
    std::cerr << "verification failed\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MLSTM-FCN / MALSTM-FCN multivariate time-series classifiers"};
  app.require_subcommand(1);

  TrainOpts train_opts;
  Bindings train_bindings;
  CLI::App* train_cmd = app.add_subcommand("train", "train a model on an MTS-CSV dataset");
  add_train_options(*train_cmd, train_opts, train_bindings);
  train_cmd->add_option("--config", train_opts.config_file, "key=value config file");

  EvalOpts eval_opts;
  Bindings eval_bindings;
  CLI::App* eval_cmd = app.add_subcommand("evaluate", "evaluate a checkpoint on a split");
  bind_string(eval_bindings, "checkpoint",
              eval_cmd->add_option("--checkpoint", eval_opts.checkpoint, "checkpoint file"),
              eval_opts.checkpoint);
  bind_string(eval_bindings, "data", eval_cmd->add_option("--data", eval_opts.data, "dataset dir"),
              eval_opts.data);
  bind_string(eval_bindings, "split",
              eval_cmd->add_option("--split", eval_opts.split, "train or test"), eval_opts.split);
  bind_string(eval_bindings, "out", eval_cmd->add_option("--out", eval_opts.out, "output dir"),
              eval_opts.out);
  eval_cmd->add_option("--config", eval_opts.config_file, "key=value config file");

  GridOpts grid_opts;
  Bindings grid_bindings;
  CLI::App* grid_cmd = app.add_subcommand("gridsearch", "sweep LSTM cell counts");
  add_train_options(*grid_cmd, grid_opts.train, grid_bindings);
  bind_string(grid_bindings, "grid",
              grid_cmd->add_option("--grid", grid_opts.grid, "comma-separated cell counts"),
              grid_opts.grid);
  grid_cmd->add_option("--config", grid_opts.train.config_file, "key=value config file");

  CompareOpts compare_opts;
  Bindings compare_bindings;
  CLI::App* compare_cmd = app.add_subcommand("compare", "rank models from an accuracy table");
  bind_string(compare_bindings, "table",
              compare_cmd->add_option("--table", compare_opts.table, "accuracy CSV"),
              compare_opts.table);
  bind_string(compare_bindings, "reference",
              compare_cmd->add_option("--reference", compare_opts.reference,
                                      "reference model for win counts (default: last column)"),
              compare_opts.reference);
  bind_string(compare_bindings, "expected",
              compare_cmd->add_option("--expected", compare_opts.expected,
                                      "JSON with previously published summary statistics"),
              compare_opts.expected);
  bind_string(compare_bindings, "out",
              compare_cmd->add_option("--out", compare_opts.out, "output dir"), compare_opts.out);
  bind_double(compare_bindings, "alpha",
              compare_cmd->add_option("--alpha", compare_opts.alpha, "significance level"),
              compare_opts.alpha);
  compare_cmd->add_option("--config", compare_opts.config_file, "key=value config file");

  std::vector<std::string> verify_suites;
  CLI::App* verify_cmd = app.add_subcommand("verify", "run the property and oracle suites");
  verify_cmd->add_option("--suite", verify_suites, "run only the named suites");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (train_cmd->parsed()) {
      if (!train_opts.config_file.empty()) train_bindings.apply_config(train_opts.config_file);
      return run_train(train_opts, train_bindings);
    }
    if (eval_cmd->parsed()) {
      if (!eval_opts.config_file.empty()) eval_bindings.apply_config(eval_opts.config_file);
      return run_evaluate(eval_opts, eval_bindings);
    }
    if (grid_cmd->parsed()) {
      if (!grid_opts.train.config_file.empty()) {
        grid_bindings.apply_config(grid_opts.train.config_file);
      }
      return run_gridsearch(grid_opts, grid_bindings);
    }
    if (compare_cmd->parsed()) {
      if (!compare_opts.config_file.empty()) compare_bindings.apply_config(compare_opts.config_file);
      return run_compare(compare_opts, compare_bindings);
    }
    if (verify_cmd->parsed()) {
      return run_verify(verify_suites);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
