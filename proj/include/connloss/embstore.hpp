#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "connloss/binio.hpp"
#include "connloss/csv.hpp"
#include "connloss/error.hpp"
#include "connloss/matrix.hpp"

namespace connloss {

enum class Space { pre, post };

inline const char* to_string(Space s) { return s == Space::pre ? "pre" : "post"; }

inline Space parse_space(std::string_view s) {
  if (s == "pre") return Space::pre;
  if (s == "post") return Space::post;
  throw Error(ErrorKind::invalid_argument, "unknown space '" + std::string(s) + "'");
}

/// samples x seq_len x dim block of f32 values, row-major sample-then-patch-then-dim.
struct SequenceTensor {
  std::size_t samples = 0;
  std::size_t seq_len = 0;
  std::size_t dim = 0;
  std::vector<float> values;

  SequenceTensor() = default;
  SequenceTensor(std::size_t n, std::size_t s, std::size_t d, float fill = 0.0f)
      : samples(n), seq_len(s), dim(d), values(n * s * d, fill) {}

  std::size_t sample_stride() const { return seq_len * dim; }
  std::span<float> sample(std::size_t i) { return {values.data() + i * sample_stride(), sample_stride()}; }
  std::span<const float> sample(std::size_t i) const {
    return {values.data() + i * sample_stride(), sample_stride()};
  }
  float& at(std::size_t i, std::size_t p, std::size_t d) { return values[(i * seq_len + p) * dim + d]; }
  float at(std::size_t i, std::size_t p, std::size_t d) const { return values[(i * seq_len + p) * dim + d]; }

  /// One sample as a seq_len x dim matrix.
  template <typename T = float>
  Matrix<T> sample_matrix(std::size_t i) const {
    const auto s = sample(i);
    return Matrix<T>(seq_len, dim, std::vector<T>(s.begin(), s.end()));
  }

  friend bool operator==(const SequenceTensor&, const SequenceTensor&) = default;
};

struct GridShape {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::size_t cells() const { return std::size_t(rows) * cols; }
  friend bool operator==(const GridShape&, const GridShape&) = default;
};

/// Paired pre-/post-projection embeddings with stable sample ids.
struct EmbeddingSet {
  std::vector<std::string> ids;
  SequenceTensor pre;
  SequenceTensor post;
  GridShape grid;

  std::size_t size() const { return ids.size(); }
  const SequenceTensor& space(Space s) const { return s == Space::pre ? pre : post; }
  SequenceTensor& space(Space s) { return s == Space::pre ? pre : post; }

  std::unordered_map<std::string, std::size_t> id_index() const {
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < ids.size(); ++i) index.emplace(ids[i], i);
    return index;
  }

  /// Subset by row positions, preserving the given order.
  EmbeddingSet subset(std::span<const std::size_t> rows) const {
    EmbeddingSet out;
    out.grid = grid;
    out.pre = SequenceTensor(rows.size(), pre.seq_len, pre.dim);
    out.post = SequenceTensor(rows.size(), post.seq_len, post.dim);
    for (std::size_t k = 0; k < rows.size(); ++k) {
      out.ids.push_back(ids.at(rows[k]));
      std::ranges::copy(pre.sample(rows[k]), out.pre.sample(k).begin());
      std::ranges::copy(post.sample(rows[k]), out.post.sample(k).begin());
    }
    return out;
  }

  friend bool operator==(const EmbeddingSet&, const EmbeddingSet&) = default;
};

inline constexpr std::size_t kMaxIdBytes = 256;
inline constexpr std::uint32_t kEmbdVersion = 1;

namespace detail {

inline void check_finite(const SequenceTensor& t, Space space) {
  for (std::size_t i = 0; i < t.values.size(); ++i) {
    if (!std::isfinite(t.values[i])) {
      const std::size_t d = i % t.dim;
      const std::size_t p = (i / t.dim) % t.seq_len;
      const std::size_t s = i / t.sample_stride();
      throw Error(ErrorKind::non_finite, std::string("non-finite value at (") + std::to_string(s) + "," +
                                             std::to_string(p) + "," + std::to_string(d) + ") in " +
                                             to_string(space) + " tensor");
    }
  }
}

}  // namespace detail

/// Checks every EmbeddingSet invariant; throws on the first violation.
inline void validate(const EmbeddingSet& set) {
  const std::size_t n = set.ids.size();
  for (const auto* t : {&set.pre, &set.post}) {
    if (t->samples != n)
      throw Error(ErrorKind::dim_mismatch, "tensor has " + std::to_string(t->samples) + " samples but there are " +
                                               std::to_string(n) + " ids");
    if (t->values.size() != t->samples * t->seq_len * t->dim)
      throw Error(ErrorKind::dim_mismatch, "tensor storage does not match its shape");
  }
  if (set.grid.cells() != set.pre.seq_len)
    throw Error(ErrorKind::dim_mismatch, "grid " + std::to_string(set.grid.rows) + "x" +
                                             std::to_string(set.grid.cols) + " does not cover S_pre=" +
                                             std::to_string(set.pre.seq_len));
  std::unordered_set<std::string_view> seen;
  for (const auto& id : set.ids) {
    if (id.empty()) throw Error(ErrorKind::invalid_argument, "empty sample id");
    if (id.size() > kMaxIdBytes)
      throw Error(ErrorKind::invalid_argument, "id longer than 256 bytes: " + id.substr(0, 32) + "...");
    if (!seen.insert(id).second) throw Error(ErrorKind::duplicate_id, "duplicate id '" + id + "'");
  }
  detail::check_finite(set.pre, Space::pre);
  detail::check_finite(set.post, Space::post);
}

/// Serializes to the EMBD layout (see README). Validation runs first, so an
/// invalid set never produces a partial file.
inline std::vector<std::uint8_t> encode_container(const EmbeddingSet& set) {
  validate(set);
  ByteWriter w;
  w.put_bytes("EMBD");
  w.put<std::uint32_t>(kEmbdVersion);
  for (std::size_t v : {set.size(), set.pre.seq_len, set.pre.dim, set.post.seq_len, set.post.dim})
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
  w.put<std::uint32_t>(set.grid.rows);
  w.put<std::uint32_t>(set.grid.cols);
  for (const auto& id : set.ids) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(id.size()));
    w.put_bytes(id);
  }
  w.put_array<float>(set.pre.values);
  w.put_array<float>(set.post.values);
  w.put_crc();
  return std::move(w.bytes());
}

inline EmbeddingSet decode_container(std::span<const std::uint8_t> bytes) {
  if (bytes.size() >= 4 && std::string_view(reinterpret_cast<const char*>(bytes.data()), 4) != "EMBD")
    throw Error(ErrorKind::bad_magic, "bad magic: not an EMBD container", 0);
  ByteReader r(bytes);
  r.get_string(4, "magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kEmbdVersion)
    throw Error(ErrorKind::version_mismatch,
                "version mismatch: expected " + std::to_string(kEmbdVersion) + ", found " + std::to_string(version), 4);
  const auto n = r.get<std::uint32_t>("N");
  const auto s_pre = r.get<std::uint32_t>("S_pre");
  const auto d_pre = r.get<std::uint32_t>("D'");
  const auto s_post = r.get<std::uint32_t>("S_post");
  const auto d_post = r.get<std::uint32_t>("D");
  GridShape grid{r.get<std::uint32_t>("M1"), r.get<std::uint32_t>("M2")};
  if (grid.cells() != s_pre)
    throw Error(ErrorKind::dim_mismatch, "dim inconsistency: M1*M2 != S_pre", 36);

  EmbeddingSet set;
  set.grid = grid;
  set.ids.reserve(n);
  std::unordered_set<std::string> seen;
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto at = r.position();
    const auto len = r.get<std::uint16_t>("id length");
    auto id = r.get_string(len, "id bytes");
    if (len == 0 || len > kMaxIdBytes)
      throw Error(ErrorKind::invalid_argument, "id length " + std::to_string(len) + " outside [1,256]", at);
    if (!seen.insert(id).second) throw Error(ErrorKind::duplicate_id, "duplicate id '" + id + "'", at);
    set.ids.push_back(std::move(id));
  }

  const std::uint64_t pre_count = std::uint64_t(n) * s_pre * d_pre;
  const std::uint64_t post_count = std::uint64_t(n) * s_post * d_post;
  const std::uint64_t expected = (pre_count + post_count) * 4 + 4;
  if (r.remaining() < expected)
    throw Error(ErrorKind::truncated,
                "truncated payload: need " + std::to_string(expected) + " bytes after id table, have " +
                    std::to_string(r.remaining()),
                bytes.size());
  if (r.remaining() > expected)
    throw Error(ErrorKind::dim_mismatch,
                "dim inconsistency: " + std::to_string(r.remaining() - expected) + " unexpected trailing bytes",
                r.position() + expected);
  verify_trailing_crc(bytes);

  set.pre = SequenceTensor(n, s_pre, d_pre);
  set.post = SequenceTensor(n, s_post, d_post);
  r.get_array<float>(set.pre.values, "pre payload");
  r.get_array<float>(set.post.values, "post payload");
  detail::check_finite(set.pre, Space::pre);
  detail::check_finite(set.post, Space::post);
  return set;
}

inline void write_container(const EmbeddingSet& set, const std::filesystem::path& path) {
  const auto bytes = encode_container(set);
  write_file_bytes(path, bytes);
}

inline EmbeddingSet read_container(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return decode_container(bytes);
}

/// Text variant for hand-written fixtures:
///
///   # grid=2x2            (optional; defaults to a square grid)
///   space,id,patch,v0,v1,...
///   pre,img0,0,0.5,1.0
///
/// Each sample must list patches 0..S-1 in order for both spaces.
inline EmbeddingSet read_container_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());
  struct Rows {
    std::vector<std::vector<float>> pre, post;
  };
  std::vector<std::string> order;
  std::unordered_map<std::string, Rows> by_id;
  std::optional<GridShape> grid;
  std::size_t d_pre = 0, d_post = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto t = csv::trim(line);
    if (t.empty()) continue;
    if (t.front() == '#') {
      const auto pos = t.find("grid=");
      if (pos != std::string_view::npos) {
        const auto dims = csv::split(t.substr(pos + 5), 'x');
        if (dims.size() != 2) throw Error(ErrorKind::invalid_argument, "bad grid comment on line " + std::to_string(line_no));
        grid = GridShape{csv::parse_number<std::uint32_t>(dims[0], "grid rows"),
                         csv::parse_number<std::uint32_t>(dims[1], "grid cols")};
      }
      continue;
    }
    const auto fields = csv::split(t);
    if (fields.size() < 4) throw Error(ErrorKind::invalid_argument, "line " + std::to_string(line_no) + ": too few fields");
    if (fields[0] == "space") continue;
    const Space space = parse_space(fields[0]);
    const auto& id = fields[1];
    const auto patch = csv::parse_number<std::size_t>(fields[2], "patch index");
    std::vector<float> v;
    for (std::size_t i = 3; i < fields.size(); ++i) v.push_back(csv::parse_number<float>(fields[i], "value"));
    auto [it, inserted] = by_id.try_emplace(id);
    if (inserted) order.push_back(id);
    auto& rows = space == Space::pre ? it->second.pre : it->second.post;
    auto& dim = space == Space::pre ? d_pre : d_post;
    if (dim == 0) dim = v.size();
    if (v.size() != dim) throw Error(ErrorKind::dim_mismatch, "line " + std::to_string(line_no) + ": inconsistent dimension");
    if (patch != rows.size())
      throw Error(ErrorKind::invalid_argument, "line " + std::to_string(line_no) + ": patches must be listed in order");
    rows.push_back(std::move(v));
  }
  if (order.empty()) throw Error(ErrorKind::invalid_argument, path.string() + ": no embeddings");
  const std::size_t s_pre = by_id[order[0]].pre.size();
  const std::size_t s_post = by_id[order[0]].post.size();
  if (!grid) {
    const auto side = static_cast<std::uint32_t>(std::lround(std::sqrt(double(s_pre))));
    grid = GridShape{side, side};
  }
  EmbeddingSet set;
  set.grid = *grid;
  set.ids = order;
  set.pre = SequenceTensor(order.size(), s_pre, d_pre);
  set.post = SequenceTensor(order.size(), s_post, d_post);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto& rows = by_id[order[i]];
    if (rows.pre.size() != s_pre || rows.post.size() != s_post)
      throw Error(ErrorKind::dim_mismatch, "sample '" + order[i] + "' has a different sequence length");
    for (std::size_t p = 0; p < s_pre; ++p) std::ranges::copy(rows.pre[p], &set.pre.at(i, p, 0));
    for (std::size_t p = 0; p < s_post; ++p) std::ranges::copy(rows.post[p], &set.post.at(i, p, 0));
  }
  validate(set);
  return set;
}

/// Dispatches on extension: `.csv` uses the text variant, anything else EMBD.
inline EmbeddingSet load_embeddings(const std::filesystem::path& path) {
  if (path.extension() == ".csv") return read_container_csv(path);
  return read_container(path);
}

/// Row i is the mean over the sequence axis of sample i in the given space.
inline Matrix<double> mean_pool(const EmbeddingSet& set, Space space) {
  const auto& t = set.space(space);
  Matrix<double> pooled(t.samples, t.dim);
  for (std::size_t i = 0; i < t.samples; ++i) {
    auto out = pooled.row(i);
    const float* src = t.sample(i).data();
    for (std::size_t p = 0; p < t.seq_len; ++p)
      for (std::size_t d = 0; d < t.dim; ++d) out[d] += src[p * t.dim + d];
    for (auto& v : out) v /= static_cast<double>(t.seq_len);
  }
  return pooled;
}

/// Concatenates each sample's whole sequence into one row (ablation only).
inline Matrix<double> flatten_sequences(const EmbeddingSet& set, Space space) {
  const auto& t = set.space(space);
  Matrix<double> flat(t.samples, t.sample_stride());
  for (std::size_t i = 0; i < t.samples; ++i) std::ranges::copy(t.sample(i), flat.row(i).begin());
  return flat;
}

inline constexpr double kStdFloor = 1e-6;

/// Per-dimension population mean and standard deviation of each space.
struct NormStats {
  std::vector<double> pre_mean, pre_std;
  std::vector<double> post_mean, post_std;

  std::span<const double> mean(Space s) const { return s == Space::pre ? pre_mean : post_mean; }
  std::span<const double> stddev(Space s) const { return s == Space::pre ? pre_std : post_std; }

  friend bool operator==(const NormStats&, const NormStats&) = default;
};

namespace detail {

// Welford's single-pass update over all patches of all samples.
inline void moments(const SequenceTensor& t, std::vector<double>& mean, std::vector<double>& stddev) {
  mean.assign(t.dim, 0.0);
  std::vector<double> m2(t.dim, 0.0);
  std::size_t count = 0;
  for (std::size_t row = 0; row < t.samples * t.seq_len; ++row) {
    ++count;
    const float* x = t.values.data() + row * t.dim;
    for (std::size_t d = 0; d < t.dim; ++d) {
      const double delta = x[d] - mean[d];
      mean[d] += delta / static_cast<double>(count);
      m2[d] += delta * (x[d] - mean[d]);
    }
  }
  stddev.resize(t.dim);
  for (std::size_t d = 0; d < t.dim; ++d)
    stddev[d] = std::max(kStdFloor, std::sqrt(std::max(0.0, m2[d]) / static_cast<double>(count)));
}

}  // namespace detail

inline NormStats compute_norm_stats(const EmbeddingSet& set) {
  if (set.size() == 0) throw Error(ErrorKind::invalid_argument, "norm stats need at least one sample");
  NormStats stats;
  detail::moments(set.pre, stats.pre_mean, stats.pre_std);
  detail::moments(set.post, stats.post_mean, stats.post_std);
  return stats;
}

inline void normalize_in_place(SequenceTensor& t, std::span<const double> mean, std::span<const double> stddev) {
  if (mean.size() != t.dim || stddev.size() != t.dim)
    throw Error(ErrorKind::dim_mismatch, "norm stats dimension does not match tensor");
  for (std::size_t row = 0; row < t.samples * t.seq_len; ++row) {
    float* x = t.values.data() + row * t.dim;
    for (std::size_t d = 0; d < t.dim; ++d) x[d] = static_cast<float>((x[d] - mean[d]) / stddev[d]);
  }
}

inline void denormalize_in_place(SequenceTensor& t, std::span<const double> mean, std::span<const double> stddev) {
  if (mean.size() != t.dim || stddev.size() != t.dim)
    throw Error(ErrorKind::dim_mismatch, "norm stats dimension does not match tensor");
  for (std::size_t row = 0; row < t.samples * t.seq_len; ++row) {
    float* x = t.values.data() + row * t.dim;
    for (std::size_t d = 0; d < t.dim; ++d) x[d] = static_cast<float>(x[d] * stddev[d] + mean[d]);
  }
}

inline EmbeddingSet normalized(EmbeddingSet set, const NormStats& stats) {
  normalize_in_place(set.pre, stats.pre_mean, stats.pre_std);
  normalize_in_place(set.post, stats.post_mean, stats.post_std);
  return set;
}

inline EmbeddingSet denormalized(EmbeddingSet set, const NormStats& stats) {
  denormalize_in_place(set.pre, stats.pre_mean, stats.pre_std);
  denormalize_in_place(set.post, stats.post_mean, stats.post_std);
  return set;
}

}  // namespace connloss
