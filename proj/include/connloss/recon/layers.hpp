#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "connloss/error.hpp"
#include "connloss/matrix.hpp"

namespace connloss::recon {

enum class Activation { gelu, relu, identity };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::gelu: return "gelu";
    case Activation::relu: return "relu";
    case Activation::identity: return "identity";
  }
  return "?";
}

inline Activation parse_activation(std::string_view s) {
  if (s == "gelu") return Activation::gelu;
  if (s == "relu") return Activation::relu;
  if (s == "identity" || s == "linear") return Activation::identity;
  throw Error(ErrorKind::invalid_argument, "unknown activation '" + std::string(s) + "'");
}

// Exact (erf) GELU.
template <typename T>
T activate(Activation a, T x) {
  switch (a) {
    case Activation::gelu: return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
    case Activation::relu: return x > T(0) ? x : T(0);
    case Activation::identity: return x;
  }
  return x;
}

template <typename T>
T activate_grad(Activation a, T x) {
  switch (a) {
    case Activation::gelu: {
      const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
      const T pdf = std::exp(T(-0.5) * x * x) * T(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
      return cdf + x * pdf;
    }
    case Activation::relu: return x > T(0) ? T(1) : T(0);
    case Activation::identity: return T(1);
  }
  return T(1);
}

/// out = in * w + b, with w stored (in_features x out_features) and b as 1 x out.
template <typename T>
void linear_forward(const Matrix<T>& in, const Matrix<T>& w, const Matrix<T>& b, Matrix<T>& out) {
  if (in.cols() != w.rows())
    throw Error(ErrorKind::dim_mismatch, "linear layer expects " + std::to_string(w.rows()) + " inputs, got " +
                                             std::to_string(in.cols()));
  matmul(in, w, out);
  add_row_vector<T>(out, b.row(0));
}

/// Accumulates dW, db and returns d(in).
template <typename T>
Matrix<T> linear_backward(const Matrix<T>& in, const Matrix<T>& w, const Matrix<T>& d_out, Matrix<T>& dw, Matrix<T>& db,
                          bool need_input_grad = true) {
  matmul_tn_acc(in, d_out, dw);
  accumulate_column_sums<T>(d_out, db.row(0));
  Matrix<T> d_in;
  if (need_input_grad) matmul_nt(d_out, w, d_in);
  return d_in;
}

/// Inverted dropout mask: entries are 0 or 1/(1-p).
template <typename T>
Matrix<T> dropout_mask(std::size_t rows, std::size_t cols, double p, std::mt19937_64& rng) {
  Matrix<T> mask(rows, cols, T(1));
  if (p <= 0) return mask;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const T keep = T(1.0 / (1.0 - p));
  for (auto& m : mask.values()) m = u(rng) < p ? T(0) : keep;
  return mask;
}

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
struct LayerNormCache {
  Matrix<T> xhat;
  std::vector<T> inv_std;
};

template <typename T>
Matrix<T> layer_norm_forward(const Matrix<T>& x, const Matrix<T>& gamma, const Matrix<T>& beta,
                             LayerNormCache<T>* cache) {
  const std::size_t n = x.cols();
  Matrix<T> y(x.rows(), n);
  Matrix<T> xhat(x.rows(), n);
  std::vector<T> inv_std(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    double mean = 0;
    for (T v : row) mean += v;
    mean /= static_cast<double>(n);
    double var = 0;
    for (T v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const T is = T(1.0 / std::sqrt(var + kLayerNormEps));
    inv_std[r] = is;
    for (std::size_t c = 0; c < n; ++c) {
      xhat(r, c) = T(row[c] - mean) * is;
      y(r, c) = gamma(0, c) * xhat(r, c) + beta(0, c);
    }
  }
  if (cache) *cache = LayerNormCache<T>{std::move(xhat), std::move(inv_std)};
  return y;
}

template <typename T>
Matrix<T> layer_norm_backward(const LayerNormCache<T>& cache, const Matrix<T>& gamma, const Matrix<T>& dy,
                              Matrix<T>& dgamma, Matrix<T>& dbeta) {
  const std::size_t n = dy.cols();
  Matrix<T> dx(dy.rows(), n);
  std::vector<T> dxhat(n);
  for (std::size_t r = 0; r < dy.rows(); ++r) {
    double mean_d = 0, mean_dx = 0;
    for (std::size_t c = 0; c < n; ++c) {
      dgamma(0, c) += dy(r, c) * cache.xhat(r, c);
      dbeta(0, c) += dy(r, c);
      dxhat[c] = dy(r, c) * gamma(0, c);
      mean_d += dxhat[c];
      mean_dx += dxhat[c] * cache.xhat(r, c);
    }
    mean_d /= static_cast<double>(n);
    mean_dx /= static_cast<double>(n);
    for (std::size_t c = 0; c < n; ++c)
      dx(r, c) = cache.inv_std[r] * T(dxhat[c] - mean_d - cache.xhat(r, c) * mean_dx);
  }
  return dx;
}

/// Fixed sinusoidal table: even columns sin(p / 10000^(2i/d)), odd columns cos.
template <typename T>
Matrix<T> sinusoidal_positions(std::size_t length, std::size_t dim) {
  Matrix<T> pe(length, dim);
  for (std::size_t p = 0; p < length; ++p) {
    for (std::size_t c = 0; c < dim; ++c) {
      const double exponent = static_cast<double>(c - c % 2) / static_cast<double>(dim);
      const double angle = static_cast<double>(p) / std::pow(10000.0, exponent);
      pe(p, c) = T(c % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return pe;
}

/// Source token for each output position under nearest-index repetition.
inline std::vector<std::size_t> expansion_sources(std::size_t input_len, std::size_t output_len) {
  std::vector<std::size_t> src(output_len);
  for (std::size_t p = 0; p < output_len; ++p) src[p] = p * input_len / output_len;
  return src;
}

}  // namespace connloss::recon
