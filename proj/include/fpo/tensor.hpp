#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace fpo {

// Dense row-major matrix of 64-bit reals. Row/column vectors are 1 x n
// and n x 1. All numerics in the library run through this type.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c, double fill = 0.0)
      : rows(r), cols(c), data(static_cast<size_t>(r) * static_cast<size_t>(c), fill) {
    if (r < 0 || c < 0) throw std::invalid_argument("Matrix: negative dimension");
  }

  static Matrix row_vector(const std::vector<double>& v) {
    Matrix m(1, static_cast<int>(v.size()));
    m.data = v;
    return m;
  }

  static Matrix col_vector(const std::vector<double>& v) {
    Matrix m(static_cast<int>(v.size()), 1);
    m.data = v;
    return m;
  }

  static Matrix scalar(double v) {
    Matrix m(1, 1);
    m.data[0] = v;
    return m;
  }

  int size() const { return rows * cols; }

  double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

  double* row_ptr(int r) { return data.data() + static_cast<size_t>(r) * cols; }
  const double* row_ptr(int r) const { return data.data() + static_cast<size_t>(r) * cols; }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  bool all_finite() const {
    for (double v : data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  void require_finite(const char* where) const {
    if (!all_finite()) {
      throw std::runtime_error(std::string("non-finite values in ") + where);
    }
  }
};

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(const std::vector<double>& a) {
  double s = 0.0;
  for (double v : a) s += v * v;
  return std::sqrt(s);
}

}  // namespace fpo
