#pragma once

// Tabular data: CSV ingestion with type inference, complete-graph specs, and
// the synthetic salary generator.

#include "dcg/graph_spec.hpp"
#include "dcg/random.hpp"
#include "dcg/table.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dcg {

inline constexpr int kCategoricalThreshold = 10;

class CsvError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ColumnInfo {
  std::string name;
  bool categorical = false;
  std::vector<double> levels;  // sorted distinct values; code i <-> levels[i]

  [[nodiscard]] int classes() const { return static_cast<int>(levels.size()); }
};

// Categorical columns hold codes 0..K-1 in `table`.
struct Dataset {
  Table table;
  std::vector<ColumnInfo> info;

  [[nodiscard]] int rows() const { return table.rows; }
  [[nodiscard]] int cols() const { return table.cols(); }
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  s = s.substr(b, e - b + 1);
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  return s;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, ',')) out.push_back(trim(cur));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  const char* first = s.data();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

}  // namespace detail

// Infers column types: a column whose values are all integers with between 2
// and 10 distinct values becomes categorical.
inline Dataset dataset_from_table(Table t) {
  Dataset d;
  for (int c = 0; c < t.cols(); ++c) {
    ColumnInfo info;
    info.name = t.columns[static_cast<std::size_t>(c)];
    std::set<double> distinct;
    bool integral = true;
    for (int r = 0; r < t.rows && integral; ++r) {
      const double x = t.at(r, c);
      if (x != std::floor(x)) integral = false;
      distinct.insert(x);
      if (static_cast<int>(distinct.size()) > kCategoricalThreshold) integral = false;
    }
    if (integral && distinct.size() >= 2) {
      info.categorical = true;
      info.levels.assign(distinct.begin(), distinct.end());
      for (int r = 0; r < t.rows; ++r) {
        const auto it = std::lower_bound(info.levels.begin(), info.levels.end(), t.at(r, c));
        t.at(r, c) = static_cast<double>(it - info.levels.begin());
      }
    }
    d.info.push_back(std::move(info));
  }
  d.table = std::move(t);
  return d;
}

inline Table read_csv_table(std::istream& in, const std::string& source = "<csv>") {
  std::string line;
  if (!std::getline(in, line)) throw CsvError(source + ": empty file");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  Table t(detail::split_csv_line(line), 0);
  if (t.columns.empty() || (t.columns.size() == 1 && t.columns[0].empty()))
    throw CsvError(source + ": missing header");
  std::set<std::string> seen;
  for (const auto& c : t.columns) {
    if (c.empty()) throw CsvError(source + ": empty column name in header");
    if (!seen.insert(c).second) throw CsvError(source + ": duplicate column '" + c + "'");
  }
  std::vector<double> row(t.columns.size());
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != t.columns.size())
      throw CsvError(source + ": line " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                     " fields, header has " + std::to_string(t.columns.size()));
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (cells[c].empty() || cells[c] == "NA" || cells[c] == "NaN" || cells[c] == "nan")
        throw CsvError(source + ": missing value at row " + std::to_string(t.rows + 1) + ", column '" +
                       t.columns[c] + "'");
      if (!detail::parse_double(cells[c], row[c]) || !std::isfinite(row[c]))
        throw CsvError(source + ": cannot parse '" + cells[c] + "' at row " + std::to_string(t.rows + 1) +
                       ", column '" + t.columns[c] + "'");
    }
    t.append_row(row);
  }
  return t;
}

inline Dataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  return dataset_from_table(read_csv_table(in, path));
}

inline std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline void write_csv(std::ostream& out, const Table& t) {
  for (int c = 0; c < t.cols(); ++c) out << (c ? "," : "") << t.columns[static_cast<std::size_t>(c)];
  out << "\n";
  for (int r = 0; r < t.rows; ++r) {
    for (int c = 0; c < t.cols(); ++c) out << (c ? "," : "") << format_double(t.at(r, c));
    out << "\n";
  }
}

inline void write_csv(const std::string& path, const Table& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  write_csv(out, t);
}

// Table with categorical codes mapped back to their original levels.
inline Table decoded(const Dataset& d) {
  Table t = d.table;
  for (int c = 0; c < t.cols(); ++c) {
    const auto& info = d.info[static_cast<std::size_t>(c)];
    if (!info.categorical) continue;
    for (int r = 0; r < t.rows; ++r)
      t.at(r, c) = info.levels[static_cast<std::size_t>(static_cast<int>(t.at(r, c)))];
  }
  return t;
}

// Complete DAG in column order: node i has parents 0..i-1. Discrete columns
// become bernoulli (2 levels) or categorical; continuous ones get `kind`.
inline GraphSpec complete_graph_spec(const Dataset& d, UnitKind kind, std::uint64_t seed = 0) {
  if (d.cols() == 0) throw std::invalid_argument("dataset has no columns");
  if (kind == UnitKind::Confounder || is_discrete_kind(kind))
    throw std::invalid_argument("continuous unit kind required");
  GraphSpec spec;
  spec.seed = seed;
  for (int c = 0; c < d.cols(); ++c) {
    const auto& info = d.info[static_cast<std::size_t>(c)];
    NodeSpec n;
    n.name = info.name;
    if (info.categorical) {
      n.kind = info.classes() == 2 ? UnitKind::Bernoulli : UnitKind::Categorical;
      n.hyper.classes = info.classes();
      if (kind == UnitKind::GLM) n.hyper.hidden.clear();
    } else {
      n.kind = kind;
      if (kind == UnitKind::GLM) n.hyper.hidden.clear();
    }
    for (int p = 0; p < c; ++p) n.parents.push_back(d.info[static_cast<std::size_t>(p)].name);
    spec.nodes.push_back(std::move(n));
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Synthetic salary data.
//
// Reference SEM (latents interests, experience ~ N(0, 1)):
//   gender    ~ Bernoulli(0.5)                          1 = male
//   age       = 18 + Gamma(4, 5)
//   education = sigmoid(-0.5 + 0.04 (age - 30) + 0.7 interests + 0.4 n1)
//   field     ~ Bernoulli(sigmoid(-1.5 + 2.8 gender + 1.0 interests))
//   seniority = softplus(0.3 + 0.5 gender + 0.3 field + 1.5 education
//                        + 0.5 experience + 0.03 (age - 30) + 0.2 n2)
//   salary    = (15000 + 6000 seniority + 5000 education + 2500 field)
//               * exp(0.1 n3)
// Women are then dropped with probability sigmoid(beta (age - 35)), which
// correlates gender with age in the released sample (beta = 0 drops half of
// them regardless of age).
// ---------------------------------------------------------------------------

// Gives a gender-age correlation of about 0.29.
inline constexpr double kSalaryBeta = 0.1766;

struct SalaryGenConfig {
  int n = 5000;
  std::uint64_t seed = 0;
  double beta = kSalaryBeta;
  // Forces gender for every generated row (before selection) when set to 0 or 1.
  int force_gender = -1;
};

inline const std::vector<std::string>& salary_columns() {
  static const std::vector<std::string> cols{"gender", "age", "education", "field", "seniority", "salary"};
  return cols;
}

inline Dataset gen_salary(const SalaryGenConfig& cfg) {
  if (cfg.n < 1) throw std::invalid_argument("salary generator needs n >= 1");
  if (cfg.beta < 0.0) throw std::invalid_argument("selection strength beta must be >= 0");
  auto sigm = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  auto softplus = [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); };
  Table t(salary_columns(), 0);
  std::uint64_t candidate = 0;
  double row[6];
  while (t.rows < cfg.n) {
    Rng rng = make_rng(cfg.seed, {0x5A1AULL, candidate++});
    const double interests = std_normal(rng);
    const double experience = std_normal(rng);
    double gender = uniform01(rng) < 0.5 ? 1.0 : 0.0;
    if (cfg.force_gender == 0 || cfg.force_gender == 1) gender = cfg.force_gender;
    double gamma = 0.0;
    for (int i = 0; i < 4; ++i) gamma -= std::log(uniform_open(rng));
    const double age = 18.0 + 5.0 * gamma;
    const double education = sigm(-0.5 + 0.04 * (age - 30.0) + 0.7 * interests + 0.4 * std_normal(rng));
    const double field = uniform01(rng) < sigm(-1.5 + 2.8 * gender + 1.0 * interests) ? 1.0 : 0.0;
    const double seniority = softplus(0.3 + 0.5 * gender + 0.3 * field + 1.5 * education + 0.5 * experience +
                                      0.03 * (age - 30.0) + 0.2 * std_normal(rng));
    const double salary =
        (15000.0 + 6000.0 * seniority + 5000.0 * education + 2500.0 * field) * std::exp(0.1 * std_normal(rng));
    const double reject = sigm(cfg.beta * (age - 35.0));
    if (gender == 0.0 && uniform01(rng) < reject) continue;
    row[0] = gender;
    row[1] = age;
    row[2] = education;
    row[3] = field;
    row[4] = seniority;
    row[5] = salary;
    t.append_row(row);
  }
  Dataset d;
  d.table = std::move(t);
  for (const auto& c : salary_columns()) d.info.push_back({c, false, {}});
  d.info[0] = {"gender", true, {0.0, 1.0}};
  d.info[3] = {"field", true, {0.0, 1.0}};
  return d;
}

// Graph to fit on generated salary data: the selection effect and the shared
// `interests` latent appear as confounders.
inline GraphSpec salary_graph_spec(UnitKind continuous = UnitKind::Flow, std::uint64_t seed = 0) {
  auto node = [&](std::string name, UnitKind kind, std::vector<std::string> parents) {
    NodeSpec n;
    n.name = std::move(name);
    n.kind = kind;
    n.parents = std::move(parents);
    if (kind == UnitKind::Bernoulli) n.hyper.classes = 2;
    if (kind == UnitKind::GLM) n.hyper.hidden.clear();
    return n;
  };
  GraphSpec s;
  s.seed = seed;
  s.nodes.push_back(node("selection", UnitKind::Confounder, {}));
  s.nodes.push_back(node("interests", UnitKind::Confounder, {}));
  s.nodes.push_back(node("gender", UnitKind::Bernoulli, {"selection"}));
  s.nodes.push_back(node("age", continuous, {"selection"}));
  s.nodes.push_back(node("education", continuous, {"age", "interests"}));
  s.nodes.push_back(node("field", UnitKind::Bernoulli, {"gender", "interests"}));
  s.nodes.push_back(node("seniority", continuous, {"gender", "age", "education", "field"}));
  s.nodes.push_back(node("salary", continuous, {"education", "field", "seniority"}));
  return s;
}

// Equal mixture of N(-2, 0.5^2) and N(2, 0.5^2).
inline Table gen_bimodal(int n, std::uint64_t seed, const std::string& column = "x") {
  Table t({column}, n);
  for (int i = 0; i < n; ++i) {
    Rng rng = make_rng(seed, {0xB1ULL, static_cast<std::uint64_t>(i)});
    const double mu = uniform01(rng) < 0.5 ? -2.0 : 2.0;
    t.at(i, 0) = mu + 0.5 * std_normal(rng);
  }
  return t;
}

inline double pearson(std::span<const double> x, std::span<const double> y) {
  const auto n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace dcg
