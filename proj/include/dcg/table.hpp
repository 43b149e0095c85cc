#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dcg {

// Row-major matrix of doubles with named columns.
struct Table {
  std::vector<std::string> columns;
  int rows = 0;
  std::vector<double> data;

  Table() = default;
  Table(std::vector<std::string> cols, int n)
      : columns(std::move(cols)), rows(n), data(static_cast<std::size_t>(n) * columns.size(), 0.0) {}

  [[nodiscard]] int cols() const { return static_cast<int>(columns.size()); }

  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * columns.size() + c]; }
  [[nodiscard]] double at(int r, int c) const {
    return data[static_cast<std::size_t>(r) * columns.size() + c];
  }

  [[nodiscard]] std::span<const double> row(int r) const {
    return {data.data() + static_cast<std::size_t>(r) * columns.size(), columns.size()};
  }
  std::span<double> row(int r) {
    return {data.data() + static_cast<std::size_t>(r) * columns.size(), columns.size()};
  }

  [[nodiscard]] int index_of(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return static_cast<int>(i);
    return -1;
  }
  [[nodiscard]] int require(const std::string& name) const {
    const int i = index_of(name);
    if (i < 0) throw std::out_of_range("no column named '" + name + "'");
    return i;
  }

  [[nodiscard]] std::vector<double> column(int c) const {
    std::vector<double> out(static_cast<std::size_t>(rows));
    for (int r = 0; r < rows; ++r) out[static_cast<std::size_t>(r)] = at(r, c);
    return out;
  }
  [[nodiscard]] std::vector<double> column(const std::string& name) const {
    return column(require(name));
  }

  [[nodiscard]] Table select_rows(std::span<const int> indices) const {
    Table out(columns, static_cast<int>(indices.size()));
    for (std::size_t i = 0; i < indices.size(); ++i) {
      auto src = row(indices[i]);
      std::copy(src.begin(), src.end(), out.row(static_cast<int>(i)).begin());
    }
    return out;
  }

  void append_row(std::span<const double> values) {
    if (values.size() != columns.size()) throw std::invalid_argument("append_row: width mismatch");
    data.insert(data.end(), values.begin(), values.end());
    ++rows;
  }
};

}  // namespace dcg
