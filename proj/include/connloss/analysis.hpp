#pragma once

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "connloss/csv.hpp"
#include "connloss/embstore.hpp"
#include "connloss/error.hpp"
#include "connloss/image.hpp"
#include "connloss/matrix.hpp"
#include "connloss/recon/patch_loss.hpp"

namespace connloss {

/// Ordered (id, value) pairs, e.g. per-sample losses or overlap ratios.
using SampleValues = std::vector<std::pair<std::string, double>>;

/// Externally computed per-sample scores keyed by sample id.
struct ScoreTable {
  std::string kind = "score";
  std::unordered_map<std::string, double> scores;
};

inline SampleValues read_sample_values(const std::filesystem::path& path, const std::string& column) {
  const auto table = csv::read(path);
  const auto id_col = table.column("id");
  const auto value_col = table.column(column);
  SampleValues out;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const double v = csv::parse_number<double>(table.rows[i][value_col], column);
    if (!std::isfinite(v))
      throw Error(ErrorKind::non_finite, path.string() + ":" + std::to_string(table.line_numbers[i]) + ": non-finite value");
    out.emplace_back(table.rows[i][id_col], v);
  }
  return out;
}

inline ScoreTable read_score_table(const std::filesystem::path& path, const std::string& column = "score") {
  ScoreTable table;
  table.kind = column;
  for (auto& [id, v] : read_sample_values(path, column)) table.scores[id] = v;
  return table;
}

struct CorrelationResult {
  double rho = 0;
  double p = 1;
  std::size_t n = 0;
  std::string method;
  std::size_t dropped = 0;
  std::string x_label = "x", y_label = "y";
};

struct SpearmanOptions {
  std::uint64_t seed = 0;
  std::size_t permutations = 100000;  // cap for exact enumeration and sample count otherwise
  std::size_t t_approx_min_n = 20;
};

/// 1-based ranks with ties assigned their average rank.
inline std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::ranges::stable_sort(order, [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = avg;
    i = j + 1;
  }
  return ranks;
}

namespace detail {

inline std::vector<double> centered(std::vector<double> v) {
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  for (auto& x : v) x -= mean;
  return v;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace detail

/// Spearman's rho (Pearson correlation of average ranks) with a two-sided
/// p-value: Student-t approximation for n >= 20, permutation test below that
/// (exhaustive when n! fits within the permutation budget, seeded sampling
/// otherwise).
inline CorrelationResult spearman(std::span<const double> xs, std::span<const double> ys,
                                  const SpearmanOptions& options = {}) {
  if (xs.size() != ys.size()) throw Error(ErrorKind::dim_mismatch, "spearman: inputs have different lengths");
  const std::size_t n = xs.size();
  if (n < 3) throw Error(ErrorKind::invalid_argument, "spearman needs at least 3 pairs");
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(xs[i]) || !std::isfinite(ys[i]))
      throw Error(ErrorKind::non_finite, "spearman: non-finite value at position " + std::to_string(i));

  const auto rx = detail::centered(average_ranks(xs));
  const auto ry = detail::centered(average_ranks(ys));
  const double sxx = detail::dot(rx, rx), syy = detail::dot(ry, ry);
  if (sxx == 0 || syy == 0) throw Error(ErrorKind::invalid_argument, "constant input");
  const double denom = std::sqrt(sxx * syy);
  CorrelationResult result;
  result.n = n;
  result.rho = std::clamp(detail::dot(rx, ry) / denom, -1.0, 1.0);

  if (n >= options.t_approx_min_n) {
    result.method = "t-approximation";
    if (std::abs(result.rho) >= 1.0) {
      result.p = 0.0;
    } else {
      const double dof = static_cast<double>(n - 2);
      const double t = result.rho * std::sqrt(dof / (1 - result.rho * result.rho));
      boost::math::students_t dist(dof);
      result.p = std::clamp(2 * boost::math::cdf(boost::math::complement(dist, std::abs(t))), 0.0, 1.0);
    }
    return result;
  }

  const double observed = std::abs(detail::dot(rx, ry)) * (1 - 1e-12);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  auto permuted_stat = [&] {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += rx[i] * ry[perm[i]];
    return std::abs(s);
  };
  double factorial = 1;
  for (std::size_t i = 2; i <= n; ++i) factorial *= static_cast<double>(i);
  std::size_t extreme = 0;
  if (factorial <= static_cast<double>(options.permutations)) {
    result.method = "exact-permutation";
    do {
      extreme += permuted_stat() >= observed ? 1 : 0;
    } while (std::next_permutation(perm.begin(), perm.end()));
    result.p = static_cast<double>(extreme) / factorial;
  } else {
    result.method = "sampled-permutation";
    std::mt19937_64 rng(options.seed);
    for (std::size_t b = 0; b < options.permutations; ++b) {
      std::shuffle(perm.begin(), perm.end(), rng);
      extreme += permuted_stat() >= observed ? 1 : 0;
    }
    result.p = static_cast<double>(extreme + 1) / static_cast<double>(options.permutations + 1);
  }
  return result;
}

struct JoinedValues {
  std::vector<std::string> ids;
  std::vector<double> losses, scores;
  std::size_t dropped = 0;
};

/// Inner join on id, in the order of `losses`.
inline JoinedValues join_scores(const SampleValues& losses, const ScoreTable& scores) {
  JoinedValues j;
  for (const auto& [id, loss] : losses) {
    const auto it = scores.scores.find(id);
    if (it == scores.scores.end()) {
      ++j.dropped;
      continue;
    }
    j.ids.push_back(id);
    j.losses.push_back(loss);
    j.scores.push_back(it->second);
  }
  std::size_t unmatched_scores = scores.scores.size() - j.ids.size();
  j.dropped += unmatched_scores;
  return j;
}

inline CorrelationResult correlate_loss_scores(const SampleValues& losses, const ScoreTable& scores,
                                               const SpearmanOptions& options = {}) {
  const auto joined = join_scores(losses, scores);
  if (joined.ids.size() < 3)
    throw Error(ErrorKind::invalid_argument, "insufficient overlap: only " + std::to_string(joined.ids.size()) +
                                                 " ids present in both inputs (need >= 3)");
  auto result = spearman(joined.losses, joined.scores, options);
  result.dropped = joined.dropped;
  result.x_label = "loss";
  result.y_label = scores.kind;
  return result;
}

struct QuartileResult {
  std::size_t n = 0;
  std::size_t group_size = 0;
  double low_cutoff = 0;   // largest loss inside the low-loss group
  double high_cutoff = 0;  // smallest loss inside the high-loss group
  double low_loss_mean_score = 0;
  double high_loss_mean_score = 0;
  std::vector<std::string> low_ids, high_ids;
};

/// Mean score of the ceil(n/4) lowest-loss and ceil(n/4) highest-loss samples.
/// Samples are ranked by (loss, id), so tied losses fall on the side their
/// rank puts them.
inline QuartileResult quartile_compare(const SampleValues& losses, const ScoreTable& scores) {
  const auto joined = join_scores(losses, scores);
  const std::size_t n = joined.ids.size();
  if (n < 8) throw Error(ErrorKind::invalid_argument, "need ≥ 8 samples (have " + std::to_string(n) + ")");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::ranges::sort(order, [&](std::size_t a, std::size_t b) {
    if (joined.losses[a] != joined.losses[b]) return joined.losses[a] < joined.losses[b];
    return joined.ids[a] < joined.ids[b];
  });
  QuartileResult q;
  q.n = n;
  q.group_size = (n + 3) / 4;
  for (std::size_t i = 0; i < q.group_size; ++i) {
    const std::size_t lo = order[i], hi = order[n - q.group_size + i];
    q.low_loss_mean_score += joined.scores[lo];
    q.high_loss_mean_score += joined.scores[hi];
    q.low_ids.push_back(joined.ids[lo]);
    q.high_ids.push_back(joined.ids[hi]);
  }
  q.low_loss_mean_score /= static_cast<double>(q.group_size);
  q.high_loss_mean_score /= static_cast<double>(q.group_size);
  q.low_cutoff = joined.losses[order[q.group_size - 1]];
  q.high_cutoff = joined.losses[order[n - q.group_size]];
  return q;
}

/// Binary answer-relevance grids keyed by sample id.
struct MaskSet {
  GridShape grid;
  std::unordered_map<std::string, Matrix<std::uint8_t>> masks;
};

/// Reduces a pixel-resolution mask to the patch grid: a patch is relevant when
/// at least `threshold` of its pixels are set. Inputs already at grid
/// resolution are passed through.
inline Matrix<std::uint8_t> rasterize_mask(const Matrix<double>& pixels, GridShape grid, double threshold = 0.5) {
  const std::size_t h = pixels.rows(), w = pixels.cols();
  Matrix<std::uint8_t> mask(grid.rows, grid.cols);
  if (h == grid.rows && w == grid.cols) {
    for (std::size_t i = 0; i < pixels.size(); ++i) mask.values()[i] = pixels.values()[i] != 0 ? 1 : 0;
    return mask;
  }
  if (h < grid.rows || w < grid.cols)
    throw Error(ErrorKind::dim_mismatch, "mask " + std::to_string(w) + "x" + std::to_string(h) +
                                             " is smaller than the patch grid");
  for (std::size_t r = 0; r < grid.rows; ++r)
    for (std::size_t c = 0; c < grid.cols; ++c) {
      const std::size_t y0 = r * h / grid.rows, y1 = (r + 1) * h / grid.rows;
      const std::size_t x0 = c * w / grid.cols, x1 = (c + 1) * w / grid.cols;
      std::size_t set = 0;
      for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x) set += pixels(y, x) != 0 ? 1 : 0;
      const double frac = static_cast<double>(set) / static_cast<double>((y1 - y0) * (x1 - x0));
      mask(r, c) = frac >= threshold ? 1 : 0;
    }
  return mask;
}

inline Matrix<double> read_mask_file(const std::filesystem::path& path) {
  if (path.extension() == ".pgm") {
    const auto img = read_pgm(path);
    Matrix<double> m(img.height, img.width);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) m.values()[i] = img.pixels[i];
    return m;
  }
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    const auto t = csv::trim(line);
    if (t.empty() || t.front() == '#') continue;
    std::vector<double> row;
    for (const auto& f : csv::split(t)) row.push_back(csv::parse_number<double>(f, "mask value"));
    if (!rows.empty() && row.size() != rows.front().size())
      throw Error(ErrorKind::dim_mismatch, path.string() + ": ragged mask grid");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw Error(ErrorKind::invalid_argument, path.string() + ": empty mask");
  Matrix<double> m(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) std::ranges::copy(rows[r], m.row(r).begin());
  return m;
}

/// Loads every `<id>.pgm` / `<id>.csv` in a directory.
inline MaskSet load_masks(const std::filesystem::path& dir, GridShape grid, double threshold = 0.5) {
  if (!std::filesystem::is_directory(dir)) throw Error(ErrorKind::io, dir.string() + " is not a directory");
  MaskSet set;
  set.grid = grid;
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const auto ext = entry.path().extension();
    if (entry.is_regular_file() && (ext == ".pgm" || ext == ".csv")) files.push_back(entry.path());
  }
  std::ranges::sort(files);
  for (const auto& f : files) set.masks[f.stem().string()] = rasterize_mask(read_mask_file(f), grid, threshold);
  return set;
}

struct MaskSplit {
  std::string id;
  std::size_t relevant_count = 0, irrelevant_count = 0;
  std::optional<double> relevant_mean_loss, irrelevant_mean_loss;
  std::optional<double> relevant_mean_norm_diff, irrelevant_mean_norm_diff;
};

/// Mean per-patch loss and norm difference inside and outside each sample's
/// mask. A side with no patches is left empty. Maps without a mask are skipped.
inline std::vector<MaskSplit> mask_split_loss(std::span<const recon::PatchLossMap> maps, const MaskSet& masks) {
  std::vector<MaskSplit> out;
  for (const auto& map : maps) {
    const auto it = masks.masks.find(map.id);
    if (it == masks.masks.end()) continue;
    const auto& mask = it->second;
    if (mask.rows() != map.squared_error.rows() || mask.cols() != map.squared_error.cols())
      throw Error(ErrorKind::dim_mismatch, "mask for '" + map.id + "' does not match the loss grid");
    MaskSplit s;
    s.id = map.id;
    double loss[2] = {0, 0}, norm[2] = {0, 0};
    std::size_t count[2] = {0, 0};
    for (std::size_t i = 0; i < mask.size(); ++i) {
      const int side = mask.values()[i] ? 1 : 0;
      loss[side] += map.squared_error.values()[i];
      norm[side] += map.norm_diff.values()[i];
      ++count[side];
    }
    s.relevant_count = count[1];
    s.irrelevant_count = count[0];
    if (count[1]) {
      s.relevant_mean_loss = loss[1] / static_cast<double>(count[1]);
      s.relevant_mean_norm_diff = norm[1] / static_cast<double>(count[1]);
    }
    if (count[0]) {
      s.irrelevant_mean_loss = loss[0] / static_cast<double>(count[0]);
      s.irrelevant_mean_norm_diff = norm[0] / static_cast<double>(count[0]);
    }
    out.push_back(std::move(s));
  }
  return out;
}

/// Coordinates (row, col) of the k largest entries; ties go row-major.
inline std::vector<std::pair<std::size_t, std::size_t>> top_loss_patches(const Matrix<double>& grid, std::size_t k) {
  if (k < 1 || k > grid.size())
    throw Error(ErrorKind::out_of_range, "k=" + std::to_string(k) + " outside [1, " + std::to_string(grid.size()) + "]");
  std::vector<std::size_t> idx(grid.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto v = grid.values();
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), [&](std::size_t a, std::size_t b) {
    if (v[a] != v[b]) return v[a] > v[b];
    return a < b;
  });
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < k; ++i) out.emplace_back(idx[i] / grid.cols(), idx[i] % grid.cols());
  return out;
}

inline std::vector<std::pair<std::size_t, std::size_t>> top_loss_patches(const recon::PatchLossMap& map, std::size_t k) {
  return top_loss_patches(map.squared_error, k);
}

}  // namespace connloss
