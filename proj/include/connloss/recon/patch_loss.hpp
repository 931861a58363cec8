#pragma once

#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "connloss/embstore.hpp"
#include "connloss/error.hpp"
#include "connloss/matrix.hpp"
#include "connloss/parallel.hpp"
#include "connloss/recon/model.hpp"

namespace connloss::recon {

/// Per-patch reconstruction error for one sample, laid out on the patch grid.
struct PatchLossMap {
  std::string id;
  Matrix<double> squared_error;  // ||original - reconstructed||^2 per patch
  Matrix<double> norm_diff;      // ||original|| - ||reconstructed|| per patch
  double total = 0;              // sum of squared_error

  double mean() const { return squared_error.empty() ? 0.0 : total / static_cast<double>(squared_error.size()); }
};

struct LossEvaluation {
  double total = 0;  // summed over every patch of every evaluated sample
  std::vector<PatchLossMap> maps;

  std::size_t patch_count() const {
    std::size_t n = 0;
    for (const auto& m : maps) n += m.squared_error.size();
    return n;
  }
  double mean_patch_loss() const { return patch_count() ? total / static_cast<double>(patch_count()) : 0.0; }
};

struct LossOptions {
  bool denormalize_norm_diff = false;  // report norm differences in original units
  unsigned threads = 1;
};

/// Per-sample input/target matrices in normalized units.
template <typename T>
struct PreparedSample {
  Matrix<T> input;   // S_post x D
  Matrix<T> target;  // S_pre x D'
};

template <typename T>
PreparedSample<T> prepare_sample(const EmbeddingSet& set, std::size_t row, const NormStats& norms) {
  PreparedSample<T> s{set.post.sample_matrix<T>(row), set.pre.sample_matrix<T>(row)};
  for (std::size_t p = 0; p < s.input.rows(); ++p)
    for (std::size_t d = 0; d < s.input.cols(); ++d)
      s.input(p, d) = T((s.input(p, d) - norms.post_mean[d]) / norms.post_std[d]);
  for (std::size_t p = 0; p < s.target.rows(); ++p)
    for (std::size_t d = 0; d < s.target.cols(); ++d)
      s.target(p, d) = T((s.target(p, d) - norms.pre_mean[d]) / norms.pre_std[d]);
  return s;
}

template <typename T>
void check_compatible(const ReconstructionModel<T>& model, const EmbeddingSet& set, const NormStats& norms) {
  const auto& c = model.config();
  if (c.in_features() != set.post.dim || c.out_features() != set.pre.dim)
    throw Error(ErrorKind::dim_mismatch, "model maps " + std::to_string(c.in_features()) + " -> " +
                                             std::to_string(c.out_features()) + " features but the set has D=" +
                                             std::to_string(set.post.dim) + ", D'=" + std::to_string(set.pre.dim));
  if (c.arch == Arch::mlp && set.post.seq_len != set.pre.seq_len)
    throw Error(ErrorKind::dim_mismatch, "mlp reconstruction requires S_post == S_pre");
  if (c.arch == Arch::seqreg && (c.input_len != set.post.seq_len || c.output_len != set.pre.seq_len))
    throw Error(ErrorKind::dim_mismatch, "seqreg sequence lengths do not match the set");
  if (norms.pre_mean.size() != set.pre.dim || norms.post_mean.size() != set.post.dim)
    throw Error(ErrorKind::dim_mismatch, "norm stats do not match the set dimensions");
}

/// Evaluation-mode loss over `sample_ids` (every sample when empty), in
/// normalized units. The total is the sum over all patches; each map's mean
/// is the per-sample scalar used for correlations.
template <typename T>
LossEvaluation evaluate_loss(const ReconstructionModel<T>& model, const EmbeddingSet& set, const NormStats& norms,
                             const std::vector<std::string>& sample_ids = {}, const LossOptions& options = {}) {
  check_compatible(model, set, norms);
  std::vector<std::size_t> rows;
  if (sample_ids.empty()) {
    rows.resize(set.size());
    std::iota(rows.begin(), rows.end(), 0);
  } else {
    const auto index = set.id_index();
    for (const auto& id : sample_ids) {
      const auto it = index.find(id);
      if (it == index.end()) throw Error(ErrorKind::missing_key, "unknown sample id '" + id + "'");
      rows.push_back(it->second);
    }
  }
  LossEvaluation eval;
  eval.maps.resize(rows.size());
  parallel_for(rows.size(), options.threads, [&](std::size_t k) {
    const std::size_t row = rows[k];
    const auto sample = prepare_sample<T>(set, row, norms);
    const Matrix<T> recon = model.forward(sample.input);
    PatchLossMap map{set.ids[row], Matrix<double>(set.grid.rows, set.grid.cols),
                     Matrix<double>(set.grid.rows, set.grid.cols), 0.0};
    for (std::size_t p = 0; p < recon.rows(); ++p) {
      double sq = 0, orig_norm = 0, recon_norm = 0;
      for (std::size_t d = 0; d < recon.cols(); ++d) {
        double o = sample.target(p, d), r = recon(p, d);
        const double diff = o - r;
        sq += diff * diff;
        if (options.denormalize_norm_diff) {
          o = o * norms.pre_std[d] + norms.pre_mean[d];
          r = r * norms.pre_std[d] + norms.pre_mean[d];
        }
        orig_norm += o * o;
        recon_norm += r * r;
      }
      map.squared_error.values()[p] = sq;
      map.norm_diff.values()[p] = std::sqrt(orig_norm) - std::sqrt(recon_norm);
      map.total += sq;
    }
    eval.maps[k] = std::move(map);
  });
  for (const auto& m : eval.maps) eval.total += m.total;
  return eval;
}

}  // namespace connloss::recon
