#include "vaecirc/tensor.hpp"

namespace vaecirc {

Vec matvec(const Matrix& w, std::span<const double> x) {
  if (x.size() != w.cols) throw std::invalid_argument("matvec: dimension mismatch");
  Vec y(w.rows, 0.0);
  for (std::size_t r = 0; r < w.rows; ++r) {
    const double* wr = w.data.data() + r * w.cols;
    double acc = 0.0;
    for (std::size_t c = 0; c < w.cols; ++c) acc += wr[c] * x[c];
    y[r] = acc;
  }
  return y;
}

Vec matvec_transposed(const Matrix& w, std::span<const double> x) {
  if (x.size() != w.rows) throw std::invalid_argument("matvec_transposed: dimension mismatch");
  Vec y(w.cols, 0.0);
  for (std::size_t r = 0; r < w.rows; ++r) {
    const double* wr = w.data.data() + r * w.cols;
    const double xr = x[r];
    for (std::size_t c = 0; c < w.cols; ++c) y[c] += wr[c] * xr;
  }
  return y;
}

void add_outer(Matrix& w, double a, std::span<const double> u, std::span<const double> v) {
  if (u.size() != w.rows || v.size() != w.cols)
    throw std::invalid_argument("add_outer: dimension mismatch");
  for (std::size_t r = 0; r < w.rows; ++r) {
    double* wr = w.data.data() + r * w.cols;
    const double au = a * u[r];
    for (std::size_t c = 0; c < w.cols; ++c) wr[c] += au * v[c];
  }
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double norm1(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += std::fabs(x);
  return s;
}

bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace vaecirc
