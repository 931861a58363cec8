#include <gtest/gtest.h>

#include <boost/math/special_functions/beta.hpp>
#include <fstream>
#include <numeric>
#include <random>

#include "connloss/analysis.hpp"
#include "connloss/image.hpp"
#include "helpers.hpp"

using namespace connloss;
using testutil::error_kind_of;

namespace {

// Rank by counting smaller elements (tie-free inputs only), then Pearson.
double rank_pearson_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  std::vector<double> rx(n), ry(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      rx[i] += x[j] < x[i];
      ry[i] += y[j] < y[i];
    }
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

SampleValues values(const std::vector<double>& v, const std::string& prefix = "s") {
  SampleValues out;
  for (std::size_t i = 0; i < v.size(); ++i) out.emplace_back(prefix + std::to_string(i), v[i]);
  return out;
}

ScoreTable scores(const std::vector<double>& v, const std::string& prefix = "s") {
  ScoreTable t;
  for (std::size_t i = 0; i < v.size(); ++i) t.scores[prefix + std::to_string(i)] = v[i];
  return t;
}

recon::PatchLossMap random_map(std::size_t r, std::size_t c, std::mt19937_64& rng, const std::string& id) {
  std::uniform_real_distribution<double> u(0, 5);
  std::normal_distribution<double> g;
  recon::PatchLossMap m{id, Matrix<double>(r, c), Matrix<double>(r, c), 0};
  for (auto& v : m.squared_error.values()) m.total += (v = u(rng));
  for (auto& v : m.norm_diff.values()) v = g(rng);
  return m;
}

}  // namespace

TEST(Spearman, MonotoneAndAntiMonotone) {
  const std::vector<double> x{0.3, 1.5, 2.0, 7.0, 9.5, 11.0};
  std::vector<double> up, down;
  for (double v : x) {
    up.push_back(std::exp(v));
    down.push_back(-v * v);
  }
  EXPECT_EQ(spearman(x, up).rho, 1.0);
  EXPECT_EQ(spearman(x, down).rho, -1.0);
}

TEST(Spearman, WorkedExample) {
  const std::vector<double> x{1, 2, 3, 4, 5}, y{2, 1, 4, 3, 5};
  const auto r = spearman(x, y);
  EXPECT_NEAR(r.rho, rank_pearson_oracle(x, y), 1e-15);
  EXPECT_NEAR(r.rho, 0.8, 1e-15);
  EXPECT_EQ(r.method, "exact-permutation");
  // Exhaustive count of permutations with |rho| >= 0.8: sum d^2 <= 4.
  std::vector<int> perm{0, 1, 2, 3, 4};
  std::size_t extreme = 0, total = 0;
  do {
    double d2 = 0;
    for (int i = 0; i < 5; ++i) d2 += std::pow(i - perm[i], 2);
    const double rho = 1 - 6 * d2 / (5.0 * 24);
    extreme += std::abs(rho) >= 0.8 - 1e-12;
    ++total;
  } while (std::next_permutation(perm.begin(), perm.end()));
  EXPECT_DOUBLE_EQ(r.p, double(extreme) / total);
}

TEST(Spearman, RandomTieFreeMatchOracle) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  SpearmanOptions o;
  o.permutations = 200;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 3 + trial % 48;
    std::vector<double> x(n), y(n);
    for (auto& v : x) v = g(rng);
    for (auto& v : y) v = g(rng);
    EXPECT_NEAR(spearman(x, y, o).rho, rank_pearson_oracle(x, y), 1e-12);
  }
}

TEST(Spearman, AverageRanksForTies) {
  const std::vector<double> v{10, 20, 20, 5, 20};
  EXPECT_EQ(average_ranks(v), (std::vector<double>{2, 4, 4, 1, 4}));
  const std::vector<double> x{1, 2, 2, 3}, y{1, 2, 3, 4};
  // Pearson on ranks {1, 2.5, 2.5, 4} vs {1, 2, 3, 4}.
  EXPECT_NEAR(spearman(x, y).rho, 4.5 / std::sqrt(4.5 * 5.0), 1e-15);
}

TEST(Spearman, TApproximationPValue) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  std::vector<double> x(40), y(40);
  for (std::size_t i = 0; i < 40; ++i) {
    x[i] = g(rng);
    y[i] = x[i] + 2 * g(rng);
  }
  const auto r = spearman(x, y);
  EXPECT_EQ(r.method, "t-approximation");
  const double dof = 38, t2 = r.rho * r.rho * dof / (1 - r.rho * r.rho);
  EXPECT_NEAR(r.p, boost::math::ibeta(dof / 2, 0.5, dof / (dof + t2)), 1e-12);
}

TEST(Spearman, SampledPermutationReproducible) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  std::vector<double> x(15), y(15);
  for (std::size_t i = 0; i < 15; ++i) {
    x[i] = g(rng);
    y[i] = 0.5 * x[i] + g(rng);
  }
  SpearmanOptions o;
  o.seed = 42;
  o.permutations = 5000;
  const auto a = spearman(x, y, o), b = spearman(x, y, o);
  EXPECT_EQ(a.method, "sampled-permutation");
  EXPECT_EQ(a.p, b.p);
  EXPECT_GT(a.p, 0.0);
  EXPECT_LE(a.p, 1.0);
  o.seed = 43;
  EXPECT_NEAR(spearman(x, y, o).p, a.p, 0.05);
}

TEST(Spearman, Errors) {
  const std::vector<double> c{1, 1, 1, 1}, y{1, 2, 3, 4};
  const auto msg = testutil::error_message_of([&] { spearman(c, y); });
  EXPECT_NE(msg.find("constant input"), std::string::npos);
  EXPECT_EQ(error_kind_of([&] { spearman(std::vector<double>{1, 2}, std::vector<double>{1, 2}); }),
            ErrorKind::invalid_argument);
  EXPECT_EQ(error_kind_of([&] { spearman(y, std::vector<double>{1, 2, 3}); }), ErrorKind::dim_mismatch);
}

TEST(Correlate, NegationAndJoin) {
  const auto l = values({0.1, 0.5, 0.2, 0.9, 0.3});
  auto s = scores({-0.1, -0.5, -0.2, -0.9, -0.3});
  s.scores["extra"] = 4;
  const auto r = correlate_loss_scores(l, s);
  EXPECT_EQ(r.rho, -1.0);
  EXPECT_EQ(r.n, 5u);
  EXPECT_EQ(r.dropped, 1u);
  EXPECT_EQ(error_kind_of([&] { correlate_loss_scores(l, scores({1, 2, 3}, "t")); }), ErrorKind::invalid_argument);
}

TEST(Correlate, NoisyNegativeRelation) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  std::normal_distribution<double> g(0, 0.05);
  std::vector<double> loss(200), score(200);
  for (std::size_t i = 0; i < 200; ++i) {
    loss[i] = u(rng);
    score[i] = -loss[i] + g(rng);
  }
  const auto r = correlate_loss_scores(values(loss), scores(score));
  EXPECT_LT(r.rho, -0.8);
  EXPECT_LT(r.p, 0.01);
}

TEST(Quartiles, HandComputedEightPoints) {
  const std::vector<double> loss{5, 1, 8, 3, 7, 2, 6, 4};
  std::vector<double> score;
  for (double l : loss) score.push_back(-l);
  const auto q = quartile_compare(values(loss), scores(score));
  EXPECT_EQ(q.group_size, 2u);
  EXPECT_EQ(q.low_loss_mean_score, -1.5);
  EXPECT_EQ(q.high_loss_mean_score, -7.5);
  EXPECT_EQ(q.low_cutoff, 2.0);
  EXPECT_EQ(q.high_cutoff, 7.0);
  EXPECT_EQ(q.low_loss_mean_score - q.high_loss_mean_score, 6.0);
}

TEST(Quartiles, ConstantScoresAndPartition) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> u(0, 5);  // many ties
  std::vector<double> loss(23);
  for (auto& l : loss) l = u(rng);
  const auto q = quartile_compare(values(loss), scores(std::vector<double>(23, 0.7)));
  EXPECT_EQ(q.low_loss_mean_score, q.high_loss_mean_score);
  EXPECT_EQ(q.group_size, 6u);
  std::set<std::string> low(q.low_ids.begin(), q.low_ids.end()), high(q.high_ids.begin(), q.high_ids.end());
  for (const auto& id : low) EXPECT_FALSE(high.count(id));
  EXPECT_LE(q.low_cutoff, q.high_cutoff);
}

TEST(Quartiles, NeedsEight) {
  const auto msg =
      testutil::error_message_of([] { quartile_compare(values({1, 2, 3, 4, 5, 6, 7}), scores({1, 2, 3, 4, 5, 6, 7})); });
  EXPECT_NE(msg.find("need ≥ 8 samples"), std::string::npos);
}

TEST(Masks, RasterizeThreshold) {
  Matrix<double> px(4, 4);
  // Top-left 2x2 cell: 2 of 4 pixels set (50%); top-right: 1 of 4.
  px(0, 0) = px(1, 1) = 255;
  px(0, 2) = 1;
  const auto m = rasterize_mask(px, {2, 2});
  EXPECT_EQ(m(0, 0), 1);
  EXPECT_EQ(m(0, 1), 0);
  EXPECT_EQ(rasterize_mask(px, {2, 2}, 0.6)(0, 0), 0);
  EXPECT_EQ(rasterize_mask(Matrix<double>(2, 2, {0, 3, 0, 0}), {2, 2})(0, 1), 1);
  EXPECT_EQ(error_kind_of([&] { rasterize_mask(Matrix<double>(1, 4), {2, 2}); }), ErrorKind::dim_mismatch);
}

TEST(Masks, LoadFromPgmAndCsv) {
  const auto dir = testutil::scratch_dir();
  GrayImage img{8, 4, 255, std::vector<std::uint16_t>(32, 0)};
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) img.pixels[y * 8 + x] = 255;  // left half
  write_pgm(dir / "a.pgm", img);
  std::ofstream(dir / "b.csv") << "0,1\n1,0\n";
  std::ofstream(dir / "ignored.txt") << "x";
  const auto set = load_masks(dir, {2, 2});
  ASSERT_EQ(set.masks.size(), 2u);
  EXPECT_EQ(set.masks.at("a"), Matrix<std::uint8_t>(2, 2, {1, 0, 1, 0}));
  EXPECT_EQ(set.masks.at("b"), Matrix<std::uint8_t>(2, 2, {0, 1, 1, 0}));
}

TEST(MaskSplit, Examples) {
  recon::PatchLossMap m{"a", Matrix<double>(2, 3, 2.0), Matrix<double>(2, 3, -1.0), 12};
  MaskSet masks;
  masks.grid = {2, 3};
  masks.masks["a"] = Matrix<std::uint8_t>(2, 3, 1);
  std::vector<recon::PatchLossMap> maps{m};
  auto s = mask_split_loss(maps, masks);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(*s[0].relevant_mean_loss, 2.0);
  EXPECT_FALSE(s[0].irrelevant_mean_loss.has_value());
  masks.masks["a"] = Matrix<std::uint8_t>(2, 3, {1, 0, 0, 1, 1, 0});
  s = mask_split_loss(maps, masks);
  EXPECT_EQ(*s[0].relevant_mean_loss, 2.0);
  EXPECT_EQ(*s[0].irrelevant_mean_loss, 2.0);
  EXPECT_EQ(*s[0].irrelevant_mean_norm_diff, -1.0);
  masks.masks["a"] = Matrix<std::uint8_t>(3, 2, 1);
  EXPECT_EQ(error_kind_of([&] { mask_split_loss(maps, masks); }), ErrorKind::dim_mismatch);
  masks.masks.clear();
  EXPECT_TRUE(mask_split_loss(maps, masks).empty());
}

TEST(MaskSplit, MatchesMaskedAverageOracle) {
  std::mt19937_64 rng(6);
  std::bernoulli_distribution coin(0.3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<recon::PatchLossMap> maps{random_map(5, 7, rng, "x")};
    MaskSet masks;
    Matrix<std::uint8_t> mask(5, 7);
    for (auto& v : mask.values()) v = coin(rng);
    mask(0, 0) = 1;
    mask(4, 6) = 0;
    masks.masks["x"] = mask;
    const auto s = mask_split_loss(maps, masks)[0];
    double in = 0, out = 0, nin = 0, nout = 0;
    std::size_t cin = 0, cout = 0;
    for (std::size_t r = 0; r < 5; ++r)
      for (std::size_t c = 0; c < 7; ++c) {
        if (mask(r, c)) {
          in += maps[0].squared_error(r, c), nin += maps[0].norm_diff(r, c), ++cin;
        } else {
          out += maps[0].squared_error(r, c), nout += maps[0].norm_diff(r, c), ++cout;
        }
      }
    EXPECT_NEAR(*s.relevant_mean_loss, in / cin, 1e-9 * in / cin);
    EXPECT_NEAR(*s.irrelevant_mean_loss, out / cout, 1e-9 * out / cout);
    EXPECT_NEAR(*s.relevant_mean_norm_diff, nin / cin, 1e-9);
    EXPECT_NEAR(*s.irrelevant_mean_norm_diff, nout / cout, 1e-9);
    EXPECT_EQ(s.relevant_count + s.irrelevant_count, 35u);
  }
}

TEST(TopLoss, Examples) {
  Matrix<double> g(3, 3, 1.0);
  g(2, 1) = 9;
  EXPECT_EQ(top_loss_patches(g, 1).front(), std::make_pair(std::size_t(2), std::size_t(1)));
  const Matrix<double> flat(3, 3, 0.5);
  const std::vector<std::pair<std::size_t, std::size_t>> first3{{0, 0}, {0, 1}, {0, 2}};
  EXPECT_EQ(top_loss_patches(flat, 3), first3);
  EXPECT_EQ(error_kind_of([&] { top_loss_patches(flat, 0); }), ErrorKind::out_of_range);
  EXPECT_EQ(error_kind_of([&] { top_loss_patches(flat, 10); }), ErrorKind::out_of_range);
}

TEST(TopLoss, MatchesFullSort) {
  std::mt19937_64 rng(7);
  const auto m = random_map(24, 24, rng, "big");
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t i = 0; i < 576; ++i) all.emplace_back(-m.squared_error.values()[i], i);
  std::ranges::sort(all);
  const auto top = top_loss_patches(m, 10);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(top[i].first, all[i].second / 24);
    EXPECT_EQ(top[i].second, all[i].second % 24);
  }
}

TEST(ScoresFile, ReadsNamedColumn) {
  const auto path = testutil::scratch_dir() / "s.csv";
  std::ofstream(path) << "id,score,other\na,0.5,1\nb,0.25,2\n";
  const auto t = read_score_table(path);
  EXPECT_EQ(t.scores.at("b"), 0.25);
  EXPECT_EQ(read_sample_values(path, "other")[1].second, 2.0);
  EXPECT_EQ(error_kind_of([&] { read_sample_values(path, "missing"); }), ErrorKind::missing_key);
}
