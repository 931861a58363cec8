#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <iterator>
#include <map>
#include <numeric>
#include <queue>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "connloss/csv.hpp"
#include "connloss/embstore.hpp"
#include "connloss/error.hpp"
#include "connloss/matrix.hpp"
#include "connloss/parallel.hpp"

namespace connloss {

enum class Metric { l2, inner_product };

inline const char* to_string(Metric m) { return m == Metric::l2 ? "l2" : "ip"; }

inline Metric parse_metric(std::string_view s) {
  if (s == "l2" || s == "L2") return Metric::l2;
  if (s == "ip" || s == "inner_product") return Metric::inner_product;
  throw Error(ErrorKind::invalid_argument, "unknown metric '" + std::string(s) + "' (use l2 or ip)");
}

enum class Pooling { mean, flat };

inline const char* to_string(Pooling p) { return p == Pooling::mean ? "mean" : "flat"; }

inline Pooling parse_pooling(std::string_view s) {
  if (s == "mean") return Pooling::mean;
  if (s == "flat") return Pooling::flat;
  throw Error(ErrorKind::invalid_argument, "unknown pooling '" + std::string(s) + "' (use mean or flat)");
}

/// One ranked neighbor. `score` is the squared L2 distance or the inner
/// product, depending on the index metric.
struct Neighbor {
  std::size_t row;
  double score;
  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

struct NeighborResult {
  std::size_t query;
  std::vector<Neighbor> neighbors;

  std::vector<std::size_t> rows() const {
    std::vector<std::size_t> out;
    out.reserve(neighbors.size());
    for (const auto& n : neighbors) out.push_back(n.row);
    return out;
  }
};

/// Exact brute-force index. Immutable once built, so concurrent queries are safe.
class NeighborIndex {
 public:
  /// With `ids`, equal scores are ordered by ascending id; otherwise by row.
  static NeighborIndex build(Matrix<double> vectors, Metric metric, bool normalize = false,
                             std::span<const std::string> ids = {}) {
    if (vectors.rows() < 2) throw Error(ErrorKind::invalid_argument, "need at least 2 vectors");
    if (!ids.empty() && ids.size() != vectors.rows())
      throw Error(ErrorKind::dim_mismatch, "id count does not match the number of vectors");
    for (std::size_t r = 0; r < vectors.rows(); ++r)
      for (double v : vectors.row(r))
        if (!std::isfinite(v)) throw Error(ErrorKind::non_finite, "non-finite value in row " + std::to_string(r));
    if (normalize) {
      for (std::size_t r = 0; r < vectors.rows(); ++r) {
        auto row = vectors.row(r);
        double sq = 0;
        for (double v : row) sq += v * v;
        const double norm = std::sqrt(sq);
        if (norm > 0)
          for (double& v : row) v /= norm;
      }
    }
    std::vector<std::size_t> tie_rank(vectors.rows());
    std::iota(tie_rank.begin(), tie_rank.end(), 0);
    if (!ids.empty()) {
      std::vector<std::size_t> order = tie_rank;
      std::ranges::sort(order, [&](std::size_t a, std::size_t b) { return ids[a] < ids[b]; });
      for (std::size_t i = 0; i < order.size(); ++i) tie_rank[order[i]] = i;
    }
    return NeighborIndex(std::move(vectors), metric, normalize, std::move(tie_rank));
  }

  std::size_t size() const { return vectors_.rows(); }
  std::size_t dim() const { return vectors_.cols(); }
  Metric metric() const { return metric_; }
  bool normalized() const { return normalized_; }
  const Matrix<double>& vectors() const { return vectors_; }

  /// Comparison key between two stored rows.
  double score(std::size_t a, std::size_t b) const {
    const double* x = vectors_.row(a).data();
    const double* y = vectors_.row(b).data();
    double acc = 0;
    if (metric_ == Metric::l2) {
      for (std::size_t d = 0; d < dim(); ++d) {
        const double diff = x[d] - y[d];
        acc += diff * diff;
      }
    } else {
      for (std::size_t d = 0; d < dim(); ++d) acc += x[d] * y[d];
    }
    return acc;
  }

  /// True if `a` ranks strictly ahead of `b`; ties go to the lower id.
  bool ranks_before(const Neighbor& a, const Neighbor& b) const {
    if (a.score != b.score) return metric_ == Metric::l2 ? a.score < b.score : a.score > b.score;
    return tie_rank_[a.row] < tie_rank_[b.row];
  }

  /// Exact top-k for a stored row, excluding the row itself.
  NeighborResult knn(std::size_t query, std::size_t k) const {
    if (query >= size()) throw Error(ErrorKind::out_of_range, "query row " + std::to_string(query) + " out of range");
    if (k < 1 || k > size() - 1)
      throw Error(ErrorKind::out_of_range,
                  "k=" + std::to_string(k) + " outside [1, " + std::to_string(size() - 1) + "]");
    auto worse_on_top = [this](const Neighbor& a, const Neighbor& b) { return ranks_before(a, b); };
    std::priority_queue<Neighbor, std::vector<Neighbor>, decltype(worse_on_top)> heap(worse_on_top);
    for (std::size_t r = 0; r < size(); ++r) {
      if (r == query) continue;
      const Neighbor cand{r, score(query, r)};
      if (heap.size() < k) {
        heap.push(cand);
      } else if (ranks_before(cand, heap.top())) {
        heap.pop();
        heap.push(cand);
      }
    }
    NeighborResult result{query, std::vector<Neighbor>(heap.size())};
    for (std::size_t i = heap.size(); i-- > 0;) {
      result.neighbors[i] = heap.top();
      heap.pop();
    }
    return result;
  }

  std::vector<NeighborResult> knn_all(std::size_t k, unsigned threads = 1) const {
    std::vector<NeighborResult> out(size());
    parallel_for(size(), threads, [&](std::size_t q) { out[q] = knn(q, k); });
    return out;
  }

 private:
  NeighborIndex(Matrix<double> v, Metric m, bool n, std::vector<std::size_t> tie_rank)
      : vectors_(std::move(v)), metric_(m), normalized_(n), tie_rank_(std::move(tie_rank)) {}

  Matrix<double> vectors_;
  Metric metric_;
  bool normalized_;
  std::vector<std::size_t> tie_rank_;
};

/// |a ∩ b| for two neighbor lists (each free of duplicates).
inline std::size_t overlap_count(std::vector<std::size_t> a, std::vector<std::size_t> b) {
  std::ranges::sort(a);
  std::ranges::sort(b);
  std::vector<std::size_t> common;
  std::ranges::set_intersection(a, b, std::back_inserter(common));
  return common.size();
}

struct OverlapRecord {
  std::string id;
  std::size_t k = 0;
  std::size_t shared = 0;
  double ratio() const { return static_cast<double>(shared) / static_cast<double>(k); }
};

struct KnorResult {
  std::size_t k = 0;
  Metric metric = Metric::l2;
  Pooling pooling = Pooling::mean;
  bool normalized = false;
  std::vector<OverlapRecord> per_sample;
  double average = 0;
};

struct KnorOptions {
  Metric metric = Metric::l2;
  Pooling pooling = Pooling::mean;
  bool normalize = false;
  unsigned threads = 1;
};

/// Index vectors for one space under the requested pooling.
inline Matrix<double> index_vectors(const EmbeddingSet& set, Space space, Pooling pooling) {
  if (pooling == Pooling::flat) {
    if (set.pre.seq_len != set.post.seq_len)
      throw Error(ErrorKind::invalid_argument, "flat pooling requires S_pre == S_post");
    return flatten_sequences(set, space);
  }
  return mean_pool(set, space);
}

/// Overlap ratio per sample between two prebuilt indexes over the same rows.
inline KnorResult knor(const NeighborIndex& pre, const NeighborIndex& post, const std::vector<std::string>& ids,
                       std::size_t k, unsigned threads = 1) {
  if (pre.size() != post.size() || pre.size() != ids.size())
    throw Error(ErrorKind::dim_mismatch, "pre and post indexes cover different sample counts");
  KnorResult result;
  result.k = k;
  result.metric = pre.metric();
  result.normalized = pre.normalized();
  result.per_sample.resize(ids.size());
  parallel_for(ids.size(), threads, [&](std::size_t i) {
    const auto a = pre.knn(i, k).rows();
    const auto b = post.knn(i, k).rows();
    result.per_sample[i] = OverlapRecord{ids[i], k, overlap_count(a, b)};
  });
  std::size_t shared_total = 0;
  for (const auto& rec : result.per_sample) shared_total += rec.shared;
  result.average = static_cast<double>(shared_total) / static_cast<double>(k * ids.size());
  return result;
}

inline KnorResult knor(const EmbeddingSet& set, std::size_t k, const KnorOptions& options = {}) {
  if (set.size() < k + 1)
    throw Error(ErrorKind::out_of_range, "KNOR needs N >= k+1 (N=" + std::to_string(set.size()) +
                                             ", k=" + std::to_string(k) + ")");
  const auto pre =
      NeighborIndex::build(index_vectors(set, Space::pre, options.pooling), options.metric, options.normalize, set.ids);
  const auto post =
      NeighborIndex::build(index_vectors(set, Space::post, options.pooling), options.metric, options.normalize, set.ids);
  auto result = knor(pre, post, set.ids, k, options.threads);
  result.pooling = options.pooling;
  return result;
}

using LabelMap = std::unordered_map<std::string, std::string>;

/// CSV with columns `id,class`.
inline LabelMap read_labels(const std::filesystem::path& path) {
  const auto table = csv::read(path);
  const auto id_col = table.column("id");
  const auto class_col = table.column("class");
  LabelMap labels;
  for (const auto& row : table.rows) labels[row[id_col]] = row[class_col];
  return labels;
}

struct RetrievalHit {
  std::string id;
  std::vector<bool> hit;  // parallel to RetrievalReport::ks
};

struct RetrievalReport {
  Space space = Space::pre;
  Metric metric = Metric::l2;
  std::vector<std::size_t> ks;
  std::map<std::size_t, double> recall;
  std::vector<RetrievalHit> per_sample;
};

/// Recall@k with the query excluded from the gallery: a query counts as a hit
/// at k if any of its top-k neighbors shares its class.
inline RetrievalReport retrieval_eval(const EmbeddingSet& set, const LabelMap& labels, Metric metric, Space space,
                                      std::vector<std::size_t> ks, bool normalize = false, unsigned threads = 1) {
  if (ks.empty()) throw Error(ErrorKind::invalid_argument, "no k values given");
  std::ranges::sort(ks);
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  std::vector<const std::string*> cls(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto it = labels.find(set.ids[i]);
    if (it == labels.end()) throw Error(ErrorKind::missing_key, "missing label for id '" + set.ids[i] + "'");
    cls[i] = &it->second;
  }
  const auto index = NeighborIndex::build(mean_pool(set, space), metric, normalize, set.ids);
  const std::size_t kmax = ks.back();

  RetrievalReport report;
  report.space = space;
  report.metric = metric;
  report.ks = ks;
  report.per_sample.resize(set.size());
  parallel_for(set.size(), threads, [&](std::size_t q) {
    const auto result = index.knn(q, kmax);
    RetrievalHit hit{set.ids[q], std::vector<bool>(ks.size(), false)};
    std::size_t first_match = kmax;  // rank position of the first same-class neighbor
    for (std::size_t r = 0; r < result.neighbors.size(); ++r) {
      if (*cls[result.neighbors[r].row] == *cls[q]) {
        first_match = r;
        break;
      }
    }
    for (std::size_t j = 0; j < ks.size(); ++j) hit.hit[j] = first_match < ks[j];
    report.per_sample[q] = std::move(hit);
  });
  for (std::size_t j = 0; j < ks.size(); ++j) {
    std::size_t hits = 0;
    for (const auto& h : report.per_sample) hits += h.hit[j] ? 1 : 0;
    report.recall[ks[j]] = static_cast<double>(hits) / static_cast<double>(set.size());
  }
  return report;
}

}  // namespace connloss
