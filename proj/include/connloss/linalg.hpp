#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "connloss/error.hpp"
#include "connloss/matrix.hpp"

namespace connloss {

struct SvdResult {
  Matrix<double> u;             // m x r, orthonormal columns
  std::vector<double> singular;  // r values, non-increasing
  Matrix<double> v;             // n x r, orthonormal columns
  int sweeps = 0;
};

struct JacobiOptions {
  double tolerance = 1e-12;
  int max_sweeps = 100;
};

namespace detail {

/// Flips each column pair so that the largest-magnitude entry of `primary`'s
/// column is positive (first such entry on ties).
inline void canonicalize_signs(Matrix<double>& primary, Matrix<double>& partner) {
  for (std::size_t c = 0; c < primary.cols(); ++c) {
    std::size_t best = 0;
    for (std::size_t r = 1; r < primary.rows(); ++r)
      if (std::abs(primary(r, c)) > std::abs(primary(best, c))) best = r;
    if (primary(best, c) < 0) {
      for (std::size_t r = 0; r < primary.rows(); ++r) primary(r, c) = -primary(r, c);
      for (std::size_t r = 0; r < partner.rows(); ++r) partner(r, c) = -partner(r, c);
    }
  }
}

/// Fills zero columns (flagged in `missing`) of `q` so all columns are orthonormal.
inline void complete_orthonormal_columns(Matrix<double>& q, const std::vector<bool>& missing) {
  const std::size_t m = q.rows();
  std::size_t candidate = 0;
  for (std::size_t c = 0; c < q.cols(); ++c) {
    if (!missing[c]) continue;
    while (true) {
      if (candidate >= m) throw Error(ErrorKind::numerical, "cannot complete orthonormal basis");
      std::vector<double> v(m, 0.0);
      v[candidate++] = 1.0;
      // Two rounds of Gram-Schmidt against every filled column.
      for (int round = 0; round < 2; ++round) {
        for (std::size_t o = 0; o < q.cols(); ++o) {
          if (o == c || (missing[o] && o > c)) continue;
          double dot = 0;
          for (std::size_t r = 0; r < m; ++r) dot += q(r, o) * v[r];
          for (std::size_t r = 0; r < m; ++r) v[r] -= dot * q(r, o);
        }
      }
      double norm = 0;
      for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
      if (norm < 1e-8) continue;
      for (std::size_t r = 0; r < m; ++r) q(r, c) = v[r] / norm;
      break;
    }
  }
}

}  // namespace detail

/// Thin SVD by one-sided (Hestenes) Jacobi rotations: a = u * diag(s) * v^T.
/// Rank-deficient inputs get u columns completed to an orthonormal set.
/// Throws ErrorKind::numerical if the sweep cap is reached before the largest
/// normalized column correlation drops below the tolerance.
inline SvdResult svd_jacobi(const Matrix<double>& a, const JacobiOptions& options = {}) {
  if (a.rows() < a.cols()) {
    auto t = svd_jacobi(a.transposed(), options);
    std::swap(t.u, t.v);
    return t;
  }
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  // Columns of `a` are stored as rows of `w` so rotations touch contiguous memory.
  Matrix<double> w = a.transposed();
  Matrix<double> vt = Matrix<double>::identity(n);

  int sweep = 0;
  for (;; ++sweep) {
    if (sweep >= options.max_sweeps)
      throw Error(ErrorKind::numerical, "Jacobi SVD did not converge in " + std::to_string(options.max_sweeps) + " sweeps");
    double off = 0;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double* wp = w.row(p).data();
        double* wq = w.row(q).data();
        double alpha = 0, beta = 0, gamma = 0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += wp[i] * wp[i];
          beta += wq[i] * wq[i];
          gamma += wp[i] * wq[i];
        }
        if (gamma == 0 || alpha == 0 || beta == 0) continue;
        const double corr = std::abs(gamma) / std::sqrt(alpha * beta);
        off = std::max(off, corr);
        if (corr <= options.tolerance) continue;
        const double zeta = (beta - alpha) / (2 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1 + zeta * zeta));
        const double c = 1 / std::sqrt(1 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = wp[i], y = wq[i];
          wp[i] = c * x - s * y;
          wq[i] = s * x + c * y;
        }
        double* vp = vt.row(p).data();
        double* vq = vt.row(q).data();
        for (std::size_t i = 0; i < n; ++i) {
          const double x = vp[i], y = vq[i];
          vp[i] = c * x - s * y;
          vq[i] = s * x + c * y;
        }
      }
    }
    if (off <= options.tolerance) break;
  }

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0;
    for (double x : w.row(j)) s += x * x;
    sigma[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::ranges::stable_sort(order, [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  SvdResult out;
  out.sweeps = sweep + 1;
  out.u = Matrix<double>(m, n);
  out.v = Matrix<double>(n, n);
  out.singular.resize(n);
  const double cutoff = (sigma.empty() ? 0.0 : sigma[order[0]]) * 1e-14;
  std::vector<bool> missing(n, false);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    out.singular[k] = sigma[j];
    for (std::size_t i = 0; i < n; ++i) out.v(i, k) = vt(j, i);
    if (sigma[j] <= cutoff || sigma[j] == 0) {
      missing[k] = true;
      out.singular[k] = sigma[j] <= cutoff ? 0.0 : sigma[j];
      continue;
    }
    for (std::size_t i = 0; i < m; ++i) out.u(i, k) = w(j, i) / sigma[j];
  }
  if (std::ranges::any_of(missing, [](bool b) { return b; })) detail::complete_orthonormal_columns(out.u, missing);
  detail::canonicalize_signs(out.v, out.u);
  return out;
}

}  // namespace connloss
