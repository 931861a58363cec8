// Acceptance checks. One PASS/FAIL line per criterion; a criterion passes only
// when its property holds and it finishes inside its time budget.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <zlib.h>

#include "connloss/analysis.hpp"
#include "connloss/embstore.hpp"
#include "connloss/geometry.hpp"
#include "connloss/procrustes.hpp"
#include "connloss/recon/checkpoint.hpp"
#include "connloss/recon/trainer.hpp"
#include "connloss/synth.hpp"
#include "recon_oracles.hpp"

using namespace connloss;

namespace {

struct Outcome {
  bool ok = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

int failures = 0;

void criterion(int number, const char* name, double budget_s, const std::function<Outcome()>& body) {
  const auto start = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const bool pass = o.ok && secs < budget_s;
  failures += !pass;
  std::printf("%s [%2d] %-28s %s | runtime %.2fs (budget %.0fs)\n", pass ? "PASS" : "FAIL", number, name,
              o.detail.c_str(), secs, budget_s);
  std::fflush(stdout);
}

template <typename Fn>
std::optional<ErrorKind> kind_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  return std::nullopt;
}

EmbeddingSet one_d_set(const std::vector<float>& pre, const std::vector<float>& post) {
  EmbeddingSet s;
  s.grid = {1, 1};
  s.pre = SequenceTensor(pre.size(), 1, 1);
  s.post = SequenceTensor(post.size(), 1, 1);
  s.pre.values = pre;
  s.post.values = post;
  for (std::size_t i = 0; i < pre.size(); ++i) s.ids.push_back("q" + std::to_string(i));
  return s;
}

// ---------------------------------------------------------------------------

Outcome worked_example() {
  // Query q0 and four others on a line. Pre space: q1, q2, q3 nearest;
  // post space: q1, q2, q4 nearest. Two of three shared.
  const auto set = one_d_set({0, 1, 2, 3, 10}, {0, 1, 2, 10, 3});
  const auto pre = NeighborIndex::build(mean_pool(set, Space::pre), Metric::l2, false, set.ids);
  const auto post = NeighborIndex::build(mean_pool(set, Space::post), Metric::l2, false, set.ids);
  const auto r = knor(pre, post, set.ids, 3);
  const auto& q = r.per_sample[0];
  const bool exact = q.shared == 2 && q.k == 3;  // 2/3 as integers, no rounding
  const double ratio = q.ratio();
  const bool rounds = std::lround(ratio * 100) == 67;
  return {exact && ratio == 2.0 / 3.0 && rounds,
          fmt("query overlap %zu/%zu = %.6f (rounds to %.2f)", q.shared, q.k, ratio, ratio)};
}

Outcome identity_orthogonal() {
  bool ok = true;
  std::string detail;
  for (auto kind : {synth::Kind::identity, synth::Kind::orthogonal}) {
    synth::Config c;
    c.kind = kind;
    c.samples = 500;
    c.pre_dim = 64;
    c.grid_rows = 2;
    c.grid_cols = 2;
    c.seed = 17;
    const auto data = synth::generate(c);
    for (std::size_t k : {10, 50, 100}) {
      const auto r = knor(data.set, k);
      ok = ok && r.average == 1.0;
      detail += fmt("%s k=%zu knor=%.6f; ", synth::to_string(kind), k, r.average);
    }
    const auto pre = retrieval_eval(data.set, data.labels, Metric::l2, Space::pre, {1, 5, 10});
    const auto post = retrieval_eval(data.set, data.labels, Metric::l2, Space::post, {1, 5, 10});
    bool same = pre.recall == post.recall;
    for (std::size_t i = 0; i < pre.per_sample.size(); ++i) same = same && pre.per_sample[i].hit == post.per_sample[i].hit;
    ok = ok && same;
    detail += fmt("recall pre==post %s; ", same ? "yes" : "no");
  }
  return {ok, detail + "required knor == 1.0 exactly"};
}

Outcome permuted() {
  const std::size_t n = 200, k = 10, seeds = 20;
  double sum = 0;
  for (std::size_t s = 0; s < seeds; ++s) {
    synth::Config c;
    c.kind = synth::Kind::permuted;
    c.samples = n;
    c.pre_dim = 16;
    c.grid_rows = 2;
    c.grid_cols = 2;
    c.seed = 1000 + s;
    sum += knor(synth::generate(c).set, k).average;
  }
  const double mean = sum / seeds;
  const double p = double(k) / double(n - 1);
  // Per-sample overlap count ~ Binomial(k, p); mean over n samples and all seeds.
  const double sigma = std::sqrt(p * (1 - p) / double(k * n * seeds));
  const double z = (mean - p) / sigma;
  return {std::abs(z) <= 3.0, fmt("mean knor %.5f vs k/(N-1) %.5f, sigma %.5f, z=%.2f (|z| <= 3)", mean, p, sigma, z)};
}

std::vector<std::size_t> full_sort_oracle(const std::vector<std::vector<double>>& v, const std::vector<std::string>& ids,
                                          std::size_t q, std::size_t k, bool l2) {
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t r = 0; r < v.size(); ++r) {
    if (r == q) continue;
    double s = 0;
    for (std::size_t d = 0; d < v[q].size(); ++d) s += l2 ? (v[q][d] - v[r][d]) * (v[q][d] - v[r][d]) : v[q][d] * v[r][d];
    all.emplace_back(l2 ? s : -s, r);
  }
  std::sort(all.begin(), all.end(), [&](const auto& a, const auto& b) {
    return a.first != b.first ? a.first < b.first : ids[a.second] < ids[b.second];
  });
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(all[i].second);
  return out;
}

Outcome knn_exactness() {
  std::mt19937_64 rng(99);
  std::size_t queries = 0, mismatches = 0, instances = 0;
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(2, 1000)(rng);
    const std::size_t dim = std::uniform_int_distribution<std::size_t>(1, 128)(rng);
    const bool l2 = inst % 2 == 0;
    std::normal_distribution<double> g;
    std::vector<std::vector<double>> v(n, std::vector<double>(dim));
    Matrix<double> m(n, dim);
    // Every fifth instance draws from a small integer lattice so exact ties occur.
    const bool lattice = inst % 5 == 4;
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t d = 0; d < dim; ++d) m(r, d) = v[r][d] = lattice ? std::round(g(rng)) : g(rng);
    std::vector<std::string> ids(n);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t r = 0; r < n; ++r) ids[r] = "id" + std::to_string(100000 + order[r]);
    const auto index = NeighborIndex::build(m, l2 ? Metric::l2 : Metric::inner_product, false, ids);
    const std::size_t k = std::uniform_int_distribution<std::size_t>(1, n - 1)(rng);
    for (std::size_t q = 0; q < n; ++q) {
      ++queries;
      if (index.knn(q, k).rows() != full_sort_oracle(v, ids, q, k, l2)) ++mismatches;
    }
    ++instances;
  }
  return {mismatches == 0, fmt("%zu instances, %zu queries, %zu id-sequence mismatches (required 0)", instances,
                               queries, mismatches)};
}

Outcome gradient_check() {
  bool ok = true;
  std::string detail;
  for (auto arch : {recon::Arch::mlp, recon::Arch::seqreg}) {
    double worst_fraction = 1.0;
    std::size_t coords = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto r = oracle::gradient_check(oracle::random_config(arch, seed), seed);
      worst_fraction = std::min(worst_fraction, r.pass_fraction());
      coords += r.coordinates;
    }
    ok = ok && worst_fraction >= 0.99;
    detail += fmt("%s: 5 configs, %zu coords, min fraction within 1e-4 = %.4f; ", recon::to_string(arch), coords,
                  worst_fraction);
  }
  return {ok, detail + "required >= 0.99"};
}

Outcome linear_map_training() {
  synth::Config c;
  c.kind = synth::Kind::linear_map;
  c.samples = 2200;
  c.grid_rows = 2;
  c.grid_cols = 2;
  c.pre_dim = 8;
  c.post_dim = 8;
  c.seed = 5;
  const auto all = synth::generate(c).set;
  std::vector<std::size_t> tr(2000), va(200);
  std::iota(tr.begin(), tr.end(), 0);
  std::iota(va.begin(), va.end(), 2000);
  const auto train_set = all.subset(tr), val_set = all.subset(va);

  recon::TrainerConfig tc;  // lr 1e-4, batch 128, 30 epochs
  tc.learning_rate = 1e-4;
  tc.batch_size = 128;
  tc.max_epochs = 30;
  recon::ModelConfig arch;
  arch.arch = recon::Arch::mlp;
  arch.mlp_dims = {8, 2048, 8};
  const auto r = recon::train<float>(train_set, val_set, tc, arch);

  // Target variance: mean squared distance of a normalized validation target
  // patch from its mean, the loss of the best constant predictor.
  auto val_norm = normalized(val_set, r.norms);
  const auto& t = val_norm.pre;
  double variance = 0;
  const std::size_t rows = t.samples * t.seq_len;
  for (std::size_t d = 0; d < t.dim; ++d) {
    double mean = 0, sq = 0;
    for (std::size_t row = 0; row < rows; ++row) mean += t.values[row * t.dim + d];
    mean /= double(rows);
    for (std::size_t row = 0; row < rows; ++row) sq += std::pow(t.values[row * t.dim + d] - mean, 2);
    variance += sq / double(rows);
  }
  const double ratio = r.best_val_loss / variance;
  return {ratio < 0.01 && r.history.size() <= 30,
          fmt("mlp [8,2048,8], %zu epochs, best val loss %.5f / target variance %.4f = %.4f%% (required < 1%%)",
              r.history.size(), r.best_val_loss, variance, 100 * ratio)};
}

Outcome procrustes_recovery() {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> g;
  Matrix<double> t(100, 16);
  for (auto& v : t.values()) v = g(rng);
  const auto q = synth::random_orthogonal(16, rng);
  const auto x = matmul(t, q);
  const auto clean = procrustes_fit(x, t);
  Matrix<double> xn = x;
  for (auto& v : xn.values()) v += 0.1 * g(rng);
  const auto noisy = procrustes_fit(xn, t);
  const bool ok = clean.summary.mean < 1e-6 && clean.orthogonality_residual < 1e-6 &&
                  noisy.summary.mean > clean.summary.mean;
  return {ok, fmt("mean error %.3g (< 1e-6), ||R^T R - I||_F %.3g (< 1e-6), noisy mean %.4f > clean",
                  clean.summary.mean, clean.orthogonality_residual, noisy.summary.mean)};
}

double rank_then_pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  auto ranks = [n](const std::vector<double>& v) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n; ++i) r[idx[i]] = double(i + 1);
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double m = (n + 1) / 2.0;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (rx[i] - m) * (ry[i] - m);
    sxx += (rx[i] - m) * (rx[i] - m);
    syy += (ry[i] - m) * (ry[i] - m);
  }
  return sxy / std::sqrt(sxx * syy);
}

Outcome spearman_equivalence() {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> g;
  double worst = 0;
  bool signs = true;
  SpearmanOptions fast;
  fast.permutations = 1000;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(3, 50)(rng);
    std::vector<double> x(n), y(n);
    for (auto& v : x) v = g(rng);
    for (auto& v : y) v = g(rng);
    worst = std::max(worst, std::abs(spearman(x, y, fast).rho - rank_then_pearson(x, y)));
    std::vector<double> up(n), down(n);
    for (std::size_t j = 0; j < n; ++j) {
      up[j] = std::exp(x[j]);
      down[j] = -x[j] * 3 + 1;
    }
    signs = signs && spearman(x, up, fast).rho == 1.0 && spearman(x, down, fast).rho == -1.0;
  }
  std::vector<double> x(14), y(14);
  for (std::size_t j = 0; j < 14; ++j) {
    x[j] = g(rng);
    y[j] = x[j] + g(rng);
  }
  SpearmanOptions o;
  o.seed = 2024;
  const auto a = spearman(x, y, o), b = spearman(x, y, o);
  const bool repro = a.p == b.p && a.method == "sampled-permutation";
  return {worst <= 1e-12 && signs && repro,
          fmt("max |rho - oracle| %.3g over 1000 (<= 1e-12); +/-1 exact %s; seeded p %.6f == %.6f (%s)", worst,
              signs ? "yes" : "no", a.p, b.p, a.method.c_str())};
}

Outcome known_correlation() {
  std::mt19937_64 rng(41);
  std::gamma_distribution<double> scale_dist(2.0, 1.0);
  std::exponential_distribution<double> patch(1.0);
  SampleValues losses;
  std::vector<double> means;
  for (std::size_t i = 0; i < 200; ++i) {
    const double s = scale_dist(rng);
    recon::PatchLossMap m{"img" + std::to_string(i), Matrix<double>(24, 24), Matrix<double>(24, 24), 0};
    for (auto& v : m.squared_error.values()) m.total += (v = s * patch(rng));
    losses.emplace_back(m.id, m.mean());
    means.push_back(m.mean());
  }
  double mu = std::accumulate(means.begin(), means.end(), 0.0) / 200, sd = 0;
  for (double v : means) sd += (v - mu) * (v - mu) / 200;
  sd = std::sqrt(sd);
  std::normal_distribution<double> noise(0.0, 0.5 * sd);
  ScoreTable scores;
  for (const auto& [id, l] : losses) scores.scores[id] = -l + noise(rng);
  const auto r = correlate_loss_scores(losses, scores);
  return {r.rho < -0.8 && r.p < 0.01,
          fmt("n=%zu rho %.4f (< -0.8), p %.3g (< 0.01), %s", r.n, r.rho, r.p, r.method.c_str())};
}

Outcome mask_recombination() {
  std::mt19937_64 rng(51);
  std::uniform_int_distribution<std::size_t> side(1, 24);
  std::uniform_real_distribution<double> u(0, 1);
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t rows = side(rng), cols = side(rng);
    const double density = i % 10 == 0 ? (i % 20 == 0 ? 1.0 : 0.0) : u(rng);
    recon::PatchLossMap m{"s", Matrix<double>(rows, cols), Matrix<double>(rows, cols), 0};
    for (auto& v : m.squared_error.values()) m.total += (v = std::exp(4 * u(rng)));
    MaskSet masks;
    masks.grid = {std::uint32_t(rows), std::uint32_t(cols)};
    Matrix<std::uint8_t> mask(rows, cols);
    for (auto& v : mask.values()) v = u(rng) < density;
    masks.masks["s"] = mask;
    const std::vector<recon::PatchLossMap> maps{m};
    const auto s = mask_split_loss(maps, masks).at(0);
    const double recombined = s.relevant_mean_loss.value_or(0) * double(s.relevant_count) +
                              s.irrelevant_mean_loss.value_or(0) * double(s.irrelevant_count);
    double grid_sum = 0;
    for (double v : m.squared_error.values()) grid_sum += v;
    worst = std::max(worst, std::abs(recombined - grid_sum) / grid_sum);
  }
  return {worst <= 1e-9, fmt("100 grid/mask pairs, max relative error %.3g (<= 1e-9)", worst)};
}

Outcome round_trips() {
  std::vector<std::string> failed;
  auto expect = [&](bool cond, const std::string& what) {
    if (!cond) failed.push_back(what);
  };

  synth::Config c;
  c.kind = synth::Kind::noisy;
  c.samples = 50;
  c.seed = 61;
  auto set = synth::generate(c).set;
  set.ids[3] = "img_\xc3\xa9t\xc3\xa9";  // non-ASCII id bytes
  const auto bytes = encode_container(set);
  const auto back = decode_container(bytes);
  expect(back.ids == set.ids && back.pre == set.pre && back.post == set.post && encode_container(back) == bytes,
         "embd round trip");

  auto corrupt = [&](auto mutate, ErrorKind expected, const std::string& what, auto decode) {
    auto b = bytes;
    mutate(b);
    const auto k = kind_of([&] { decode(b); });
    expect(k == expected, what);
  };
  const auto dec = [](const std::vector<std::uint8_t>& b) { decode_container(b); };
  corrupt([](auto& b) { b[0] = 'X'; }, ErrorKind::bad_magic, "embd bad magic", dec);
  corrupt([](auto& b) { b[4] = 9; }, ErrorKind::version_mismatch, "embd version", dec);
  corrupt([](auto& b) { b.resize(b.size() - 37); }, ErrorKind::truncated, "embd truncated", dec);
  corrupt([](auto& b) { b[28] += 1; }, ErrorKind::dim_mismatch, "embd dim mismatch", dec);
  corrupt([](auto& b) { b[b.size() - 20] ^= 0x10; }, ErrorKind::checksum, "embd checksum", dec);
  {
    auto dup = set;
    dup.ids[7] = dup.ids[8] + "x";
    auto b = encode_container(dup);
    dup.ids[7] = dup.ids[8];
    expect(kind_of([&] { encode_container(dup); }) == ErrorKind::duplicate_id, "embd duplicate id on write");
    const std::string needle = set.ids[8] + "x";
    const auto pos = std::search(b.begin(), b.end(), needle.begin(), needle.end()) - b.begin();
    // Drop the trailing 'x' so the two ids collide.
    b[pos - 2] -= 1;
    b.erase(b.begin() + pos + needle.size() - 1);
    const auto body = std::span<const std::uint8_t>(b).first(b.size() - 4);
    const std::uint32_t crc = static_cast<std::uint32_t>(crc32(0, body.data(), static_cast<uInt>(body.size())));
    for (int i = 0; i < 4; ++i) b[b.size() - 4 + i] = static_cast<std::uint8_t>(crc >> (8 * i));
    expect(kind_of([&] { decode_container(b); }) == ErrorKind::duplicate_id, "embd duplicate id on read");
  }

  for (auto arch : {recon::Arch::mlp, recon::Arch::seqreg}) {
    auto cfg = oracle::random_config(arch, 3);
    const auto model = recon::ReconstructionModel<float>::create(cfg, 8);
    NormStats norms = compute_norm_stats(set);
    std::optional<NormStats> with;
    if (arch == recon::Arch::mlp) {
      norms.pre_mean.resize(cfg.out_features());
      norms.pre_std.assign(cfg.out_features(), 2.0);
      norms.post_mean.resize(cfg.in_features());
      norms.post_std.assign(cfg.in_features(), 0.5);
      with = norms;
    }
    const auto ck = recon::encode_checkpoint(model, with);
    const auto loaded = recon::decode_checkpoint<float>(ck);
    bool same = loaded.norms == with && recon::encode_checkpoint(loaded.model, loaded.norms) == ck;
    for (std::size_t i = 0; i < model.parameters().size(); ++i)
      same = same && loaded.model.parameters()[i].value == model.parameters()[i].value;
    const std::string tag = std::string("checkpoint ") + recon::to_string(arch);
    expect(same, tag + " round trip");
    const auto cdec = [](const std::vector<std::uint8_t>& b) { recon::decode_checkpoint<float>(b); };
    auto cc = [&](auto mutate, ErrorKind expected, const std::string& what) {
      auto b = ck;
      mutate(b);
      expect(kind_of([&] { cdec(b); }) == expected, tag + " " + what);
    };
    cc([](auto& b) { b[1] = 'Z'; }, ErrorKind::bad_magic, "bad magic");
    cc([](auto& b) { b[4] = 77; }, ErrorKind::version_mismatch, "version");
    cc([](auto& b) { b.resize(b.size() - 9); }, ErrorKind::truncated, "truncated");
    cc([](auto& b) { b[32] += 1; }, ErrorKind::dim_mismatch, "shape mismatch");
    cc([](auto& b) { b[b.size() - 6] ^= 0x01; }, ErrorKind::checksum, "checksum");
  }

  std::string detail = "embd + mlp/seqreg checkpoints bit-exact; bad magic, version, truncated, dim mismatch, "
                       "checksum, duplicate id distinct";
  if (!failed.empty()) {
    detail = "failed:";
    for (const auto& f : failed) detail += " [" + f + "]";
  }
  return {failed.empty(), detail};
}

}  // namespace

int main() {
  criterion(1, "worked-example-overlap", 1, worked_example);
  criterion(2, "identity-orthogonal-knor", 10, identity_orthogonal);
  criterion(3, "permuted-knor-expectation", 30, permuted);
  criterion(4, "knn-exactness", 60, knn_exactness);
  criterion(5, "gradient-check", 120, gradient_check);
  criterion(6, "linear-map-reconstruction", 300, linear_map_training);
  criterion(7, "procrustes-recovery", 5, procrustes_recovery);
  criterion(8, "spearman-oracle", 30, spearman_equivalence);
  criterion(9, "known-correlation", 10, known_correlation);
  criterion(10, "mask-split-recombination", 5, mask_recombination);
  criterion(11, "container-round-trips", 5, round_trips);
  std::printf("%d of 11 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
