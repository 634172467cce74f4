#pragma once

// Minimal dense row-major matrix and vector helpers used by the MLP stack.
// Everything is double precision; the patching and interaction diagnostics
// need the numerical headroom.

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vaecirc {

using Vec = std::vector<double>;

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;  // row-major, rows * cols

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  Vec row_vec(std::size_t r) const {
    return Vec(data.begin() + static_cast<std::ptrdiff_t>(r * cols),
               data.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols));
  }

  Vec col_vec(std::size_t c) const {
    Vec out(rows);
    for (std::size_t r = 0; r < rows; ++r) out[r] = data[r * cols + c];
    return out;
  }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

// y = W x
Vec matvec(const Matrix& w, std::span<const double> x);
// y = W^T x
Vec matvec_transposed(const Matrix& w, std::span<const double> x);
// W += a * u v^T
void add_outer(Matrix& w, double a, std::span<const double> u, std::span<const double> v);

inline void axpy(double a, std::span<const double> x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> v);
double norm1(std::span<const double> v);

inline double mean(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

bool all_finite(std::span<const double> v);

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace vaecirc
