#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "connloss/embstore.hpp"
#include "connloss/error.hpp"
#include "connloss/geometry.hpp"
#include "connloss/matrix.hpp"

namespace connloss::synth {

/// Synthetic connector behaviours with known ground truth:
///  identity     post = pre                                  (KNOR = 1)
///  orthogonal   post = pre * Q, Q orthogonal                (pairwise L2 preserved, KNOR = 1 under L2)
///  permuted     post_i = pre_pi(i)                          (KNOR ~ k/(N-1))
///  linear_map   pre = post * A, A full rank                 (exact linear reconstruction exists)
///  noisy        post = pre + noise * N(0, 1)                (degrades retrieval)
///  compressive  post = (2x2 average-pooled pre) * A         (S_post = S_pre / 4)
enum class Kind { identity, orthogonal, permuted, linear_map, noisy, compressive };

inline Kind parse_kind(std::string_view s) {
  if (s == "identity") return Kind::identity;
  if (s == "orthogonal") return Kind::orthogonal;
  if (s == "permuted") return Kind::permuted;
  if (s == "linear-map" || s == "linear_map") return Kind::linear_map;
  if (s == "noisy") return Kind::noisy;
  if (s == "compressive") return Kind::compressive;
  throw Error(ErrorKind::invalid_argument, "unknown synth kind '" + std::string(s) + "'");
}

inline const char* to_string(Kind k) {
  switch (k) {
    case Kind::identity: return "identity";
    case Kind::orthogonal: return "orthogonal";
    case Kind::permuted: return "permuted";
    case Kind::linear_map: return "linear-map";
    case Kind::noisy: return "noisy";
    case Kind::compressive: return "compressive";
  }
  return "?";
}

struct Config {
  Kind kind = Kind::identity;
  std::size_t samples = 100;
  std::uint32_t grid_rows = 2;
  std::uint32_t grid_cols = 2;
  std::size_t pre_dim = 8;
  std::size_t post_dim = 8;   // ignored by kinds that require post_dim == pre_dim
  std::size_t classes = 10;
  double cluster_spread = 3.0;
  double noise = 1.0;
  std::uint64_t seed = 0;
};

struct Result {
  EmbeddingSet set;
  LabelMap labels;
};

/// Random orthogonal matrix: Gram-Schmidt on a Gaussian matrix.
inline Matrix<double> random_orthogonal(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Matrix<double> q(n, n);
  for (auto& v : q.values()) v = g(rng);
  for (std::size_t c = 0; c < n; ++c) {
    for (int round = 0; round < 2; ++round)
      for (std::size_t o = 0; o < c; ++o) {
        double dot = 0;
        for (std::size_t r = 0; r < n; ++r) dot += q(r, c) * q(r, o);
        for (std::size_t r = 0; r < n; ++r) q(r, c) -= dot * q(r, o);
      }
    double norm = 0;
    for (std::size_t r = 0; r < n; ++r) norm += q(r, c) * q(r, c);
    norm = std::sqrt(norm);
    for (std::size_t r = 0; r < n; ++r) q(r, c) /= norm;
  }
  return q;
}

/// Well-conditioned full-rank map (rows x cols) with singular values in [0.5, 1.5].
inline Matrix<double> random_full_rank(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  const auto u = random_orthogonal(rows, rng);
  const auto v = random_orthogonal(cols, rng);
  std::uniform_real_distribution<double> s(0.5, 1.5);
  Matrix<double> a(rows, cols);
  for (std::size_t k = 0; k < std::min(rows, cols); ++k) {
    const double sk = s(rng);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) a(r, c) += u(r, k) * sk * v(c, k);
  }
  return a;
}

inline std::string sample_id(std::size_t i, std::size_t n) {
  const int width = std::max<int>(5, static_cast<int>(std::to_string(n).size()));
  std::string digits = std::to_string(i);
  if (digits.size() < static_cast<std::size_t>(width)) digits.insert(0, width - digits.size(), '0');
  return "s" + digits;
}

/// Clustered Gaussian sequences: class center + per-sample offset + per-patch jitter.
inline SequenceTensor clustered_sequences(std::size_t n, std::size_t seq, std::size_t dim, std::size_t classes,
                                          double spread, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Matrix<double> centers(classes, dim);
  for (auto& v : centers.values()) v = spread * g(rng);
  SequenceTensor t(n, seq, dim);
  std::vector<double> offset(dim);
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& o : offset) o = g(rng);
    for (std::size_t p = 0; p < seq; ++p)
      for (std::size_t d = 0; d < dim; ++d)
        t.at(i, p, d) = static_cast<float>(centers(i % classes, d) + offset[d] + 0.5 * g(rng));
  }
  return t;
}

/// Applies `map` (in_dim x out_dim) to every patch.
inline SequenceTensor apply_map(const SequenceTensor& in, const Matrix<double>& map) {
  SequenceTensor out(in.samples, in.seq_len, map.cols());
  for (std::size_t row = 0; row < in.samples * in.seq_len; ++row) {
    const float* x = in.values.data() + row * in.dim;
    float* y = out.values.data() + row * map.cols();
    for (std::size_t c = 0; c < map.cols(); ++c) {
      double acc = 0;
      for (std::size_t k = 0; k < in.dim; ++k) acc += x[k] * map(k, c);
      y[c] = static_cast<float>(acc);
    }
  }
  return out;
}

inline Result generate(const Config& cfg) {
  if (cfg.samples < 2 || cfg.grid_rows == 0 || cfg.grid_cols == 0 || cfg.pre_dim == 0 || cfg.classes == 0)
    throw Error(ErrorKind::invalid_argument, "synth: samples >= 2 and positive grid, dims and classes required");
  if (cfg.kind == Kind::compressive && (cfg.grid_rows % 2 || cfg.grid_cols % 2))
    throw Error(ErrorKind::invalid_argument, "compressive synth needs even grid dimensions");
  if ((cfg.kind == Kind::linear_map || cfg.kind == Kind::compressive) && cfg.post_dim == 0)
    throw Error(ErrorKind::invalid_argument, "synth: post_dim must be positive");

  std::mt19937_64 rng(cfg.seed);
  const std::size_t n = cfg.samples;
  const std::size_t seq = std::size_t(cfg.grid_rows) * cfg.grid_cols;
  Result r;
  auto& set = r.set;
  set.grid = {cfg.grid_rows, cfg.grid_cols};
  for (std::size_t i = 0; i < n; ++i) {
    set.ids.push_back(sample_id(i, n));
    r.labels[set.ids.back()] = "c" + std::to_string(i % cfg.classes);
  }

  if (cfg.kind == Kind::linear_map) {
    set.post = clustered_sequences(n, seq, cfg.post_dim, cfg.classes, cfg.cluster_spread, rng);
    set.pre = apply_map(set.post, random_full_rank(cfg.post_dim, cfg.pre_dim, rng));
    return r;
  }

  set.pre = clustered_sequences(n, seq, cfg.pre_dim, cfg.classes, cfg.cluster_spread, rng);
  switch (cfg.kind) {
    case Kind::identity:
      set.post = set.pre;
      break;
    case Kind::orthogonal:
      set.post = apply_map(set.pre, random_orthogonal(cfg.pre_dim, rng));
      break;
    case Kind::permuted: {
      std::vector<std::size_t> perm(n);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      set.post = SequenceTensor(n, seq, cfg.pre_dim);
      for (std::size_t i = 0; i < n; ++i) std::ranges::copy(set.pre.sample(perm[i]), set.post.sample(i).begin());
      break;
    }
    case Kind::noisy: {
      std::normal_distribution<double> g;
      set.post = set.pre;
      for (auto& v : set.post.values) v = static_cast<float>(v + cfg.noise * g(rng));
      break;
    }
    case Kind::compressive: {
      const std::size_t rows = cfg.grid_rows / 2, cols = cfg.grid_cols / 2;
      SequenceTensor pooled(n, rows * cols, cfg.pre_dim);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t pr = 0; pr < rows; ++pr)
          for (std::size_t pc = 0; pc < cols; ++pc)
            for (std::size_t d = 0; d < cfg.pre_dim; ++d) {
              double acc = 0;
              for (std::size_t dr = 0; dr < 2; ++dr)
                for (std::size_t dc = 0; dc < 2; ++dc)
                  acc += set.pre.at(i, (2 * pr + dr) * cfg.grid_cols + 2 * pc + dc, d);
              pooled.at(i, pr * cols + pc, d) = static_cast<float>(acc / 4);
            }
      set.post = apply_map(pooled, random_full_rank(cfg.pre_dim, cfg.post_dim, rng));
      break;
    }
    case Kind::linear_map:
      break;
  }
  return r;
}

}  // namespace connloss::synth
