#include "mlstmfcn/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mlstmfcn/error.hpp"
#include "mlstmfcn/fsio.hpp"

namespace mlstmfcn {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string current;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(current);
      current.clear();
    } else if (c != '\r') {
      current.push_back(c);
    }
  }
  fields.push_back(current);
  return fields;
}

[[noreturn]] void fail_line(std::size_t line_no, const std::string& what) {
  throw ParseError("line " + std::to_string(line_no) + ": " + what);
}

long parse_int(const std::string& text, std::size_t line_no, const char* what) {
  if (text.empty()) fail_line(line_no, std::string("empty ") + what);
  char* end = nullptr;
  long value = std::strtol(text.c_str(), &end, 10);
  if (end != text.c_str() + text.size()) {
    fail_line(line_no, std::string("non-integer ") + what + " '" + text + "'");
  }
  return value;
}

double parse_value(const std::string& text, std::size_t line_no) {
  if (text.empty()) fail_line(line_no, "empty value cell");
  char* end = nullptr;
  double value = std::strtod(text.c_str(), &end);
  if (end != text.c_str() + text.size() || !std::isfinite(value)) {
    fail_line(line_no, "non-numeric cell '" + text + "'");
  }
  return value;
}

std::string format_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

RawSplit parse_mts_csv(std::istream& in) {
  RawSplit split;
  std::string line;
  std::size_t line_no = 0;

  if (!std::getline(in, line)) throw ParseError("line 1: missing header");
  ++line_no;
  auto header = split_csv_line(line);
  if (header.size() < 3 || header[0] != "sample_id" || header[1] != "label" ||
      header[2] != "variable") {
    fail_line(line_no, "header must start with sample_id,label,variable");
  }

  std::set<std::string> closed_ids;
  RawSeries current;
  bool open = false;

  auto close_current = [&](std::size_t at_line) {
    if (!open) return;
    if (split.num_variables == 0) {
      split.num_variables = current.channels.size();
    } else if (current.channels.size() != split.num_variables) {
      fail_line(at_line, "sample '" + current.id + "' has " +
                             std::to_string(current.channels.size()) + " variables, expected " +
                             std::to_string(split.num_variables));
    }
    closed_ids.insert(current.id);
    split.samples.push_back(std::move(current));
    current = RawSeries{};
    open = false;
  };

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    if (fields.size() < 4) fail_line(line_no, "expected sample_id,label,variable,values...");
    const std::string& id = fields[0];
    long label = parse_int(fields[1], line_no, "label");
    long variable = parse_int(fields[2], line_no, "variable index");

    if (!open || id != current.id) {
      close_current(line_no);
      if (closed_ids.count(id)) {
        fail_line(line_no, "duplicate sample_id '" + id + "' (rows of a sample must be contiguous)");
      }
      current.id = id;
      current.label = static_cast<int>(label);
      current.length = fields.size() - 3;
      open = true;
    } else if (static_cast<int>(label) != current.label) {
      fail_line(line_no, "conflicting labels for sample '" + id + "'");
    }

    if (variable < 0 || static_cast<std::size_t>(variable) != current.channels.size()) {
      if (variable >= 0 && static_cast<std::size_t>(variable) < current.channels.size()) {
        fail_line(line_no, "duplicate (sample_id, variable) pair ('" + id + "', " +
                               std::to_string(variable) + ")");
      }
      fail_line(line_no, "variable indices of sample '" + id + "' must ascend from 0, got " +
                             std::to_string(variable));
    }
    if (fields.size() - 3 != current.length) {
      fail_line(line_no, "sample '" + id + "' row has " + std::to_string(fields.size() - 3) +
                             " values, sibling rows have " + std::to_string(current.length));
    }
    std::vector<double> values;
    values.reserve(fields.size() - 3);
    for (std::size_t i = 3; i < fields.size(); ++i) values.push_back(parse_value(fields[i], line_no));
    current.channels.push_back(std::move(values));
  }
  close_current(line_no + 1);
  return split;
}

void write_mts_csv(std::ostream& out, const RawSplit& split) {
  out << "sample_id,label,variable,values...\n";
  for (const RawSeries& s : split.samples) {
    for (std::size_t v = 0; v < s.channels.size(); ++v) {
      out << s.id << ',' << s.label << ',' << v;
      for (double x : s.channels[v]) out << ',' << format_value(x);
      out << '\n';
    }
  }
}

NormStats compute_norm_stats(const RawSplit& train) {
  if (train.samples.empty()) throw ContractError("normalization needs a non-empty train split");
  std::size_t m = train.num_variables;
  NormStats stats;
  stats.mean.assign(m, 0.0);
  stats.stddev.assign(m, 0.0);
  std::vector<std::size_t> counts(m, 0);
  for (const RawSeries& s : train.samples) {
    for (std::size_t v = 0; v < m; ++v) {
      for (double x : s.channels[v]) {
        stats.mean[v] += x;
        ++counts[v];
      }
    }
  }
  for (std::size_t v = 0; v < m; ++v) {
    if (counts[v] == 0) throw ContractError("variable " + std::to_string(v) + " has no values");
    stats.mean[v] /= static_cast<double>(counts[v]);
  }
  for (const RawSeries& s : train.samples) {
    for (std::size_t v = 0; v < m; ++v) {
      for (double x : s.channels[v]) {
        double centered = x - stats.mean[v];
        stats.stddev[v] += centered * centered;
      }
    }
  }
  for (std::size_t v = 0; v < m; ++v) {
    stats.stddev[v] = std::sqrt(stats.stddev[v] / static_cast<double>(counts[v]));
    if (stats.stddev[v] < 1e-8) stats.stddev[v] = 1e-8;  // constant variables
  }
  return stats;
}

void apply_normalization(RawSplit& split, const NormStats& stats) {
  for (RawSeries& s : split.samples) {
    if (s.channels.size() != stats.mean.size()) {
      throw DimensionError("normalization: sample '" + s.id + "' has " +
                           std::to_string(s.channels.size()) + " variables, stats cover " +
                           std::to_string(stats.mean.size()));
    }
    for (std::size_t v = 0; v < s.channels.size(); ++v) {
      for (double& x : s.channels[v]) x = (x - stats.mean[v]) / stats.stddev[v];
    }
  }
}

std::pair<Tensor, std::vector<std::uint8_t>> pad_and_mask(
    const std::vector<std::vector<double>>& channels, std::size_t padded_length) {
  if (channels.empty()) throw ContractError("pad_and_mask: sample has no variables");
  std::size_t length = channels[0].size();
  for (const auto& row : channels) {
    if (row.size() != length) throw ContractError("pad_and_mask: ragged variable rows");
  }
  if (length == 0) throw ContractError("pad_and_mask: sample length must be at least 1");
  if (length > padded_length) {
    throw ContractError("pad_and_mask: length " + std::to_string(length) + " exceeds padded size " +
                        std::to_string(padded_length));
  }
  Tensor padded({channels.size(), padded_length});
  for (std::size_t v = 0; v < channels.size(); ++v) {
    for (std::size_t t = 0; t < length; ++t) padded.at(v, t) = channels[v][t];
  }
  std::vector<std::uint8_t> mask(padded_length, 0);
  std::fill(mask.begin(), mask.begin() + static_cast<std::ptrdiff_t>(length), 1);
  return {std::move(padded), std::move(mask)};
}

namespace {

Dataset build_dataset(const RawSplit& split, std::size_t padded_length, std::size_t num_classes,
                      const NormStats& stats, std::string tag) {
  Dataset d;
  d.split = std::move(tag);
  d.stats = stats;
  d.num_variables = split.num_variables;
  d.max_length = padded_length;
  d.num_classes = num_classes;
  for (const RawSeries& s : split.samples) {
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= num_classes) {
      throw ContractError("sample '" + s.id + "' has label " + std::to_string(s.label) +
                          ", expected [0, " + std::to_string(num_classes) + ")");
    }
    auto [tensor, mask] = pad_and_mask(s.channels, padded_length);
    d.samples.push_back(std::move(tensor));
    d.masks.push_back(std::move(mask));
    d.labels.push_back(s.label);
    d.lengths.push_back(s.channels[0].size());
  }
  return d;
}

}  // namespace

std::vector<Dataset> znormalize(const RawSplit& train, std::vector<RawSplit> others,
                                std::size_t padded_length) {
  NormStats stats = compute_norm_stats(train);

  std::size_t longest = 0;
  int max_label = -1;
  for (const RawSeries& s : train.samples) {
    longest = std::max(longest, s.channels.empty() ? std::size_t{0} : s.channels[0].size());
    max_label = std::max(max_label, s.label);
  }
  for (RawSplit& split : others) {
    if (split.samples.empty()) {
      split.num_variables = train.num_variables;
    } else if (split.num_variables != train.num_variables) {
      throw DimensionError("znormalize: split has " + std::to_string(split.num_variables) +
                           " variables, train has " + std::to_string(train.num_variables));
    }
    for (const RawSeries& s : split.samples) {
      longest = std::max(longest, s.channels.empty() ? std::size_t{0} : s.channels[0].size());
    }
  }
  if (max_label < 0) throw ContractError("znormalize: train split has no samples");
  std::size_t num_classes = static_cast<std::size_t>(max_label) + 1;
  if (padded_length == 0) padded_length = longest;

  RawSplit train_scaled = train;
  apply_normalization(train_scaled, stats);
  std::vector<Dataset> out;
  out.push_back(build_dataset(train_scaled, padded_length, num_classes, stats, "train"));
  for (RawSplit& split : others) {
    apply_normalization(split, stats);
    out.push_back(build_dataset(split, padded_length, num_classes, stats, "other"));
  }
  return out;
}

DatasetDir load_dataset_dir(const std::filesystem::path& dir, std::size_t padded_length) {
  namespace fs = std::filesystem;
  fs::path train_path = dir / "train.csv";
  if (!fs::exists(train_path)) throw IoError("no train.csv in " + dir.string());

  auto parse_file = [](const fs::path& p) {
    std::istringstream in(read_file(p));
    try {
      return parse_mts_csv(in);
    } catch (const ParseError& e) {
      throw ParseError(p.string() + ": " + e.what());
    }
  };

  RawSplit train = parse_file(train_path);
  RawSplit test;
  fs::path test_path = dir / "test.csv";
  if (fs::exists(test_path)) test = parse_file(test_path);

  DatasetDir out;
  out.name = dir.filename().string();
  fs::path meta_path = dir / "meta.json";
  if (fs::exists(meta_path)) {
    auto meta = nlohmann::json::parse(read_file(meta_path), nullptr, true, true);
    if (meta.contains("name")) out.name = meta["name"].get<std::string>();
    if (meta.contains("classes")) {
      out.class_names = meta["classes"].get<std::vector<std::string>>();
    }
  }

  auto datasets = znormalize(train, {std::move(test)}, padded_length);
  out.train = std::move(datasets[0]);
  out.test = std::move(datasets[1]);
  out.test.split = "test";
  if (out.class_names.empty()) {
    for (std::size_t c = 0; c < out.train.num_classes; ++c) {
      out.class_names.push_back(std::to_string(c));
    }
  }
  return out;
}

void save_dataset_dir(const std::filesystem::path& dir, const std::string& name,
                      const std::vector<std::string>& class_names, const RawSplit& train,
                      const RawSplit& test) {
  std::ostringstream train_csv, test_csv;
  write_mts_csv(train_csv, train);
  write_mts_csv(test_csv, test);
  nlohmann::json meta;
  meta["name"] = name;
  meta["classes"] = class_names;
  atomic_write_file(dir / "train.csv", train_csv.str());
  atomic_write_file(dir / "test.csv", test_csv.str());
  atomic_write_file(dir / "meta.json", meta.dump(2) + "\n");
}

std::vector<std::size_t> label_counts(const Dataset& data) {
  std::vector<std::size_t> counts(data.num_classes, 0);
  for (int label : data.labels) counts[static_cast<std::size_t>(label)] += 1;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) {
      throw ConfigError("class " + std::to_string(c) + " is absent from the " + data.split +
                        " split");
    }
  }
  return counts;
}

}  // namespace mlstmfcn
