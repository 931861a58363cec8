#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "connloss/error.hpp"

namespace connloss {

/// Dense row-major matrix. Value semantics; rows are exposed as spans.
template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
      throw Error(ErrorKind::dim_mismatch, "matrix data size does not match shape");
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }
  const T& operator()(std::size_t r, std::size_t c) const {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  template <typename U>
  Matrix<U> cast() const {
    Matrix<U> out(rows_, cols_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

// Kernels below use i-k-j loop order so the innermost loop is a contiguous
// axpy the compiler can vectorize.

/// out = a * b
template <typename T>
void matmul(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  if (a.cols() != b.rows()) throw Error(ErrorKind::dim_mismatch, "matmul: inner dimensions differ");
  out = Matrix<T>(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    T* orow = out.data() + i * n;
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const T aik = a(i, k);
      if (aik == T(0)) continue;
      const T* brow = b.data() + k * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
}

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  Matrix<T> out;
  matmul(a, b, out);
  return out;
}

/// out += a^T * b
template <typename T>
void matmul_tn_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  if (a.rows() != b.rows() || out.rows() != a.cols() || out.cols() != b.cols())
    throw Error(ErrorKind::dim_mismatch, "matmul_tn: shape mismatch");
  const std::size_t n = b.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const T* brow = b.data() + r * n;
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const T ari = a(r, i);
      if (ari == T(0)) continue;
      T* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += ari * brow[j];
    }
  }
}

/// out = a * b^T
template <typename T>
void matmul_nt(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
  if (a.cols() != b.cols()) throw Error(ErrorKind::dim_mismatch, "matmul_nt: shape mismatch");
  out = Matrix<T>(a.rows(), b.rows());
  const std::size_t k = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const T* arow = a.data() + i * k;
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const T* brow = b.data() + j * k;
      T acc = 0;
      for (std::size_t t = 0; t < k; ++t) acc += arow[t] * brow[t];
      out(i, j) = acc;
    }
  }
}

template <typename T>
void add_row_vector(Matrix<T>& m, std::span<const T> v) {
  assert(v.size() == m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    T* row = m.data() + r * m.cols();
    for (std::size_t c = 0; c < m.cols(); ++c) row[c] += v[c];
  }
}

/// out[c] += sum over rows of m(r, c)
template <typename T>
void accumulate_column_sums(const Matrix<T>& m, std::span<T> out) {
  assert(out.size() == m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const T* row = m.data() + r * m.cols();
    for (std::size_t c = 0; c < m.cols(); ++c) out[c] += row[c];
  }
}

template <typename T>
double frobenius_norm(const Matrix<T>& m) {
  double s = 0;
  for (T v : m.values()) s += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(s);
}

/// ||A^T A - I||_F, the orthogonality residual of the columns of A.
template <typename T>
double orthogonality_residual(const Matrix<T>& a) {
  double s = 0;
  for (std::size_t i = 0; i < a.cols(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) {
      double dot = 0;
      for (std::size_t r = 0; r < a.rows(); ++r)
        dot += static_cast<double>(a(r, i)) * static_cast<double>(a(r, j));
      const double d = dot - (i == j ? 1.0 : 0.0);
      s += d * d;
    }
  }
  return std::sqrt(s);
}

}  // namespace connloss
