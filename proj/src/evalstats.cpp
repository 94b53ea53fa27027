#include "mlstmfcn/evalstats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "mlstmfcn/error.hpp"

namespace mlstmfcn {

namespace {

std::vector<std::string> split_line(const std::string& line) {
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

std::string nine_digits(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

AccuracyTable parse_accuracy_csv(std::istream& in) {
  AccuracyTable table;
  std::string line;
  if (!std::getline(in, line)) throw ParseError("line 1: missing header");
  auto header = split_line(line);
  if (header.size() < 3 || header[0] != "dataset" || header[1] != "classes") {
    throw ParseError("line 1: header must be dataset,classes,<model names...>");
  }
  table.models.assign(header.begin() + 2, header.end());

  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto fields = split_line(line);
    if (fields.size() != header.size()) {
      std::size_t missing = fields.size() < header.size() ? fields.size() : header.size();
      std::string column = missing >= 2 ? table.models[std::min(missing - 2, table.models.size() - 1)]
                                        : std::string("classes");
      throw ParseError("line " + std::to_string(line_no) + ": dataset '" +
                       (fields.empty() ? "?" : fields[0]) + "' is missing a value for column '" +
                       column + "'");
    }
    table.datasets.push_back(fields[0]);
    char* end = nullptr;
    long classes = std::strtol(fields[1].c_str(), &end, 10);
    if (end != fields[1].c_str() + fields[1].size() || classes < 1) {
      throw ParseError("line " + std::to_string(line_no) + ": bad class count '" + fields[1] + "'");
    }
    table.class_counts.push_back(static_cast<std::size_t>(classes));
    std::vector<double> row;
    for (std::size_t i = 2; i < fields.size(); ++i) {
      end = nullptr;
      double v = std::strtod(fields[i].c_str(), &end);
      if (fields[i].empty() || end != fields[i].c_str() + fields[i].size() || !std::isfinite(v)) {
        throw ParseError("line " + std::to_string(line_no) + ": dataset '" + fields[0] +
                         "', model '" + table.models[i - 2] + "': bad accuracy '" + fields[i] + "'");
      }
      if (v < 0.0 || v > 100.0) {
        throw ParseError("line " + std::to_string(line_no) + ": dataset '" + fields[0] +
                         "', model '" + table.models[i - 2] + "': accuracy " + fields[i] +
                         " outside [0, 100]");
      }
      row.push_back(v);
    }
    table.accuracy.push_back(std::move(row));
  }
  return table;
}

double pce(double accuracy_percent, std::size_t num_classes) {
  if (num_classes < 1) throw ContractError("pce: class count must be at least 1");
  if (accuracy_percent < 0.0 || accuracy_percent > 100.0) {
    throw ContractError("pce: accuracy must lie in [0, 100], got " +
                        std::to_string(accuracy_percent));
  }
  return (100.0 - accuracy_percent) / static_cast<double>(num_classes);
}

namespace {

std::size_t model_index(const AccuracyTable& table, std::string_view model) {
  for (std::size_t i = 0; i < table.models.size(); ++i) {
    if (table.models[i] == model) return i;
  }
  throw LookupError("model '" + std::string(model) + "' not present in the table");
}

}  // namespace

double mpce(const AccuracyTable& table, std::string_view model) {
  std::size_t m = model_index(table, model);
  if (table.datasets.empty()) throw ContractError("mpce: empty table");
  double acc = 0.0;
  for (std::size_t d = 0; d < table.datasets.size(); ++d) {
    acc += pce(table.accuracy[d][m], table.class_counts[d]);
  }
  return acc / static_cast<double>(table.datasets.size());
}

std::vector<double> average_ranks_descending(std::span<const double> values) {
  std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    double shared = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = shared;
    i = j + 1;
  }
  return ranks;
}

RankSummary mean_ranks(const AccuracyTable& table) {
  if (table.datasets.empty() || table.models.size() < 1) {
    throw ContractError("mean_ranks: need at least one dataset and one model");
  }
  std::size_t models = table.models.size();
  std::size_t datasets = table.datasets.size();
  RankSummary out;
  out.arithmetic.assign(models, 0.0);
  out.geometric.assign(models, 0.0);  // accumulate log ranks
  for (std::size_t d = 0; d < datasets; ++d) {
    std::vector<double> ranks = average_ranks_descending(table.accuracy[d]);
    for (std::size_t m = 0; m < models; ++m) {
      out.arithmetic[m] += ranks[m];
      out.geometric[m] += std::log(ranks[m]);
    }
  }
  for (std::size_t m = 0; m < models; ++m) {
    out.arithmetic[m] /= static_cast<double>(datasets);
    out.geometric[m] = std::exp(out.geometric[m] / static_cast<double>(datasets));
  }
  return out;
}

// ---- Wilcoxon signed-rank ----------------------------------------------

namespace {

struct SignedRanks {
  std::vector<double> ranks;      // of |difference|, average ties
  std::vector<bool> positive;
  double w_plus = 0.0;
  double total = 0.0;
  std::vector<std::size_t> tie_sizes;
};

SignedRanks signed_ranks(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw ContractError("wilcoxon: sequence lengths " + std::to_string(x.size()) + " vs " +
                        std::to_string(y.size()));
  }
  std::vector<double> magnitude;
  SignedRanks out;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double d = x[i] - y[i];
    if (d == 0.0) continue;  // zero differences carry no evidence
    magnitude.push_back(std::fabs(d));
    out.positive.push_back(d > 0.0);
  }
  std::size_t n = magnitude.size();
  out.ranks.assign(n, 0.0);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return magnitude[a] < magnitude[b]; });
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && magnitude[order[j + 1]] == magnitude[order[i]]) ++j;
    double shared = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) out.ranks[order[k]] = shared;
    out.tie_sizes.push_back(j - i + 1);
    i = j + 1;
  }
  for (std::size_t k = 0; k < n; ++k) {
    out.total += out.ranks[k];
    if (out.positive[k]) out.w_plus += out.ranks[k];
  }
  return out;
}

// Exact tail probability of min(W+, W-) via the distribution of the doubled
// rank sum (doubling makes every achievable sum an integer even with .5 tie
// ranks).
double exact_two_sided_p(const SignedRanks& sr, double observed) {
  std::size_t n = sr.ranks.size();
  std::vector<long long> doubled(n);
  long long total2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    doubled[i] = std::llround(2.0 * sr.ranks[i]);
    total2 += doubled[i];
  }
  std::vector<double> count(static_cast<std::size_t>(total2) + 1, 0.0);
  count[0] = 1.0;
  long long reach = 0;
  for (std::size_t i = 0; i < n; ++i) {
    reach += doubled[i];
    for (long long w = reach; w >= doubled[i]; --w) {
      count[static_cast<std::size_t>(w)] += count[static_cast<std::size_t>(w - doubled[i])];
    }
  }
  long long observed2 = std::llround(2.0 * observed);
  double favorable = 0.0;
  for (long long w = 0; w <= total2; ++w) {
    if (std::min(w, total2 - w) <= observed2) favorable += count[static_cast<std::size_t>(w)];
  }
  return favorable / std::pow(2.0, static_cast<double>(n));
}

double normal_two_sided_p(const SignedRanks& sr, double observed) {
  double n = static_cast<double>(sr.ranks.size());
  double mean = n * (n + 1.0) / 4.0;
  double variance = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0;
  for (std::size_t t : sr.tie_sizes) {
    double size = static_cast<double>(t);
    variance -= (size * size * size - size) / 48.0;
  }
  double z = (observed - mean + 0.5) / std::sqrt(variance);  // continuity correction
  double phi = 0.5 * std::erfc(-z / std::sqrt(2.0));
  return std::min(1.0, 2.0 * phi);
}

}  // namespace

WilcoxonResult wilcoxon_signed_rank(std::span<const double> x, std::span<const double> y) {
  SignedRanks sr = signed_ranks(x, y);
  WilcoxonResult out;
  out.n_used = sr.ranks.size();
  if (out.n_used == 0) {
    out.exact = true;
    return out;  // all differences zero: statistic 0, p = 1
  }
  out.statistic = std::min(sr.w_plus, sr.total - sr.w_plus);
  if (out.n_used <= 20) {
    out.exact = true;
    out.p_value = exact_two_sided_p(sr, out.statistic);
  } else {
    out.exact = false;
    out.p_value = normal_two_sided_p(sr, out.statistic);
  }
  return out;
}

double wilcoxon_normal_approx_p(std::span<const double> x, std::span<const double> y) {
  SignedRanks sr = signed_ranks(x, y);
  if (sr.ranks.empty()) return 1.0;
  double observed = std::min(sr.w_plus, sr.total - sr.w_plus);
  return normal_two_sided_p(sr, observed);
}

// ---- comparison report ----------------------------------------------------

MetricsReport compare_report(const AccuracyTable& table, double alpha, std::string_view reference) {
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw ConfigError("compare_report: alpha must lie in (0, 1), got " + std::to_string(alpha));
  }
  if (table.models.empty() || table.datasets.empty()) {
    throw ContractError("compare_report: empty table");
  }
  MetricsReport report;
  report.models = table.models;
  report.alpha = alpha;
  std::size_t ref = reference.empty() ? table.models.size() - 1 : model_index(table, reference);
  report.reference_model = table.models[ref];

  RankSummary ranks = mean_ranks(table);
  report.arith_rank = std::move(ranks.arithmetic);
  report.geom_rank = std::move(ranks.geometric);

  std::size_t models = table.models.size();
  std::size_t datasets = table.datasets.size();
  report.mpce.resize(models);
  report.wins.assign(models, 0);
  for (std::size_t m = 0; m < models; ++m) {
    report.mpce[m] = mpce(table, table.models[m]);
    for (std::size_t d = 0; d < datasets; ++d) {
      if (table.accuracy[d][m] >= table.accuracy[d][ref]) report.wins[m] += 1;
    }
  }

  report.p_matrix.assign(models, std::vector<double>(models, 1.0));
  std::vector<double> lhs(datasets), rhs(datasets);
  for (std::size_t a = 0; a < models; ++a) {
    for (std::size_t b = a + 1; b < models; ++b) {
      for (std::size_t d = 0; d < datasets; ++d) {
        lhs[d] = table.accuracy[d][a];
        rhs[d] = table.accuracy[d][b];
      }
      double p = wilcoxon_signed_rank(lhs, rhs).p_value;
      report.p_matrix[a][b] = p;
      report.p_matrix[b][a] = p;
    }
  }
  return report;
}

void write_report_tsv(std::ostream& out, const MetricsReport& report) {
  out << "model\tarith_rank\tgeom_rank\tmpce\twins\n";
  for (std::size_t m = 0; m < report.models.size(); ++m) {
    out << report.models[m] << '\t' << nine_digits(report.arith_rank[m]) << '\t'
        << nine_digits(report.geom_rank[m]) << '\t' << nine_digits(report.mpce[m]) << '\t'
        << report.wins[m] << '\n';
  }
}

void write_report_json(std::ostream& out, const MetricsReport& report,
                       const std::optional<std::string>& reference_stats_json) {
  nlohmann::json doc;
  doc["alpha"] = report.alpha;
  doc["reference_model"] = report.reference_model;
  nlohmann::json models = nlohmann::json::array();
  for (std::size_t m = 0; m < report.models.size(); ++m) {
    nlohmann::json entry;
    entry["name"] = report.models[m];
    entry["arith_rank"] = report.arith_rank[m];
    entry["geom_rank"] = report.geom_rank[m];
    entry["mpce"] = report.mpce[m];
    entry["wins"] = report.wins[m];
    models.push_back(std::move(entry));
  }
  doc["models"] = std::move(models);
  doc["p_matrix"] = report.p_matrix;
  doc["model_order"] = report.models;

  if (reference_stats_json) {
    // Echo previously published summary numbers next to the computed ones so
    // any divergence is visible in the report itself.
    nlohmann::json ref = nlohmann::json::parse(*reference_stats_json, nullptr, true, true);
    doc["reference_stats"] = ref;
    nlohmann::json deltas = nlohmann::json::object();
    for (std::size_t m = 0; m < report.models.size(); ++m) {
      const std::string& name = report.models[m];
      if (!ref.contains(name)) continue;
      nlohmann::json d = nlohmann::json::object();
      const nlohmann::json& r = ref[name];
      if (r.contains("arith_rank")) {
        d["arith_rank"] = report.arith_rank[m] - r["arith_rank"].get<double>();
      }
      if (r.contains("geom_rank")) {
        d["geom_rank"] = report.geom_rank[m] - r["geom_rank"].get<double>();
      }
      if (r.contains("mpce")) d["mpce"] = report.mpce[m] - r["mpce"].get<double>();
      if (r.contains("wins")) {
        d["wins"] = static_cast<double>(report.wins[m]) - r["wins"].get<double>();
      }
      deltas[name] = std::move(d);
    }
    doc["delta_vs_reference"] = std::move(deltas);
  }
  out << doc.dump(2) << '\n';
}

}  // namespace mlstmfcn
