#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "connloss/embstore.hpp"
#include "connloss/error.hpp"
#include "connloss/linalg.hpp"
#include "connloss/matrix.hpp"

namespace connloss {

/// Principal axes of mean-centered data (population covariance).
struct PcaModel {
  std::vector<double> mean;            // length D
  Matrix<double> basis;                // D x target_dim, orthonormal columns
  std::vector<double> variances;       // retained, non-increasing
  std::vector<double> all_variances;   // every component the data supports
  double total_variance = 0;           // trace of the covariance

  double retained_variance() const { return std::accumulate(variances.begin(), variances.end(), 0.0); }
  double residual_variance() const { return total_variance - retained_variance(); }

  Matrix<double> transform(const Matrix<double>& data) const {
    if (data.cols() != mean.size()) throw Error(ErrorKind::dim_mismatch, "PCA transform: dimension mismatch");
    Matrix<double> centered = data;
    for (std::size_t r = 0; r < centered.rows(); ++r)
      for (std::size_t c = 0; c < centered.cols(); ++c) centered(r, c) -= mean[c];
    return matmul(centered, basis);
  }
};

inline Matrix<double> center_columns(const Matrix<double>& data, std::vector<double>* mean_out = nullptr) {
  std::vector<double> mean(data.cols(), 0.0);
  for (std::size_t r = 0; r < data.rows(); ++r)
    for (std::size_t c = 0; c < data.cols(); ++c) mean[c] += data(r, c);
  for (auto& m : mean) m /= static_cast<double>(data.rows());
  Matrix<double> out = data;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) -= mean[c];
  if (mean_out) *mean_out = std::move(mean);
  return out;
}

/// Top `target_dim` principal directions. Each component's largest-magnitude
/// entry is made positive so the basis is deterministic.
inline PcaModel pca_fit(const Matrix<double>& data, std::size_t target_dim) {
  const std::size_t n = data.rows(), d = data.cols();
  if (n < 2) throw Error(ErrorKind::invalid_argument, "PCA needs at least 2 samples");
  if (target_dim < 1 || target_dim > std::min(n - 1, d))
    throw Error(ErrorKind::out_of_range, "target_dim " + std::to_string(target_dim) + " exceeds min(N-1, D) = " +
                                             std::to_string(std::min(n - 1, d)));
  PcaModel model;
  const Matrix<double> centered = center_columns(data, &model.mean);
  // The right singular vectors of the centered data are the principal axes.
  const auto svd = svd_jacobi(centered);

  model.basis = Matrix<double>(d, target_dim);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < target_dim; ++c) model.basis(r, c) = svd.v(r, c);
  Matrix<double> unused(0, target_dim);
  detail::canonicalize_signs(model.basis, unused);

  for (double s : svd.singular) model.all_variances.push_back(s * s / static_cast<double>(n));
  model.variances.assign(model.all_variances.begin(), model.all_variances.begin() + target_dim);
  for (double v : centered.values()) model.total_variance += v * v;
  model.total_variance /= static_cast<double>(n);
  return model;
}

struct ErrorSummary {
  double mean = 0, std = 0, min = 0, max = 0;
};

inline ErrorSummary summarize(const std::vector<double>& values) {
  ErrorSummary s;
  if (values.empty()) return s;
  s.min = std::numeric_limits<double>::infinity();
  s.max = -std::numeric_limits<double>::infinity();
  for (double v : values) {
    s.mean += v;
    s.min = std::min(s.min, v);
    s.max = std::max(s.max, v);
  }
  s.mean /= static_cast<double>(values.size());
  for (double v : values) s.std += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(s.std / static_cast<double>(values.size()));
  return s;
}

struct AlignmentResult {
  std::size_t target_dim = 0;
  Matrix<double> rotation;              // D' x D', applied as T * R
  double scale = 1.0;                   // 1 unless the scaled variant is requested
  std::optional<PcaModel> pca;          // set by align_report
  std::vector<double> errors;           // per-sample L2 distance after alignment
  ErrorSummary summary;
  double orthogonality_residual = 0;    // ||R^T R - I||_F
};

struct ProcrustesOptions {
  bool fit_scale = false;
  JacobiOptions svd;
};

/// Orthogonal R minimizing ||X - T R||_F over mean-centered inputs, from the
/// SVD of the cross-covariance T^T X = U S V^T as R = U V^T.
inline AlignmentResult procrustes_fit(const Matrix<double>& x, const Matrix<double>& t,
                                      const ProcrustesOptions& options = {}) {
  if (x.rows() != t.rows() || x.cols() != t.cols())
    throw Error(ErrorKind::dim_mismatch, "Procrustes inputs must have identical shapes");
  if (x.rows() == 0) throw Error(ErrorKind::invalid_argument, "Procrustes needs at least one sample");
  const Matrix<double> xc = center_columns(x);
  const Matrix<double> tc = center_columns(t);

  Matrix<double> cross(t.cols(), x.cols());
  matmul_tn_acc(tc, xc, cross);
  const auto svd = svd_jacobi(cross, options.svd);

  AlignmentResult result;
  result.target_dim = x.cols();
  matmul_nt(svd.u, svd.v, result.rotation);
  if (options.fit_scale) {
    const double trace = std::accumulate(svd.singular.begin(), svd.singular.end(), 0.0);
    double tnorm = 0;
    for (double v : tc.values()) tnorm += v * v;
    result.scale = tnorm > 0 ? trace / tnorm : 1.0;
  }
  const Matrix<double> aligned = matmul(tc, result.rotation);
  result.errors.resize(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double s = 0;
    for (std::size_t c = 0; c < x.cols(); ++c) {
      const double diff = xc(i, c) - result.scale * aligned(i, c);
      s += diff * diff;
    }
    result.errors[i] = std::sqrt(s);
  }
  result.summary = summarize(result.errors);
  result.orthogonality_residual = orthogonality_residual(result.rotation);
  return result;
}

/// Mean-pool both spaces, project pooled post vectors onto their top-D'
/// principal axes, then align to pooled pre vectors.
inline AlignmentResult align_report(const EmbeddingSet& set, const ProcrustesOptions& options = {}) {
  const Matrix<double> pre = mean_pool(set, Space::pre);
  const Matrix<double> post = mean_pool(set, Space::post);
  auto pca = pca_fit(post, pre.cols());
  auto result = procrustes_fit(pre, pca.transform(post), options);
  result.pca = std::move(pca);
  return result;
}

}  // namespace connloss
