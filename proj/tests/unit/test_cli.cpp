#include <gtest/gtest.h>

#include <json.hpp>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "connloss/csv.hpp"
#include "connloss/embstore.hpp"
#include "connloss/image.hpp"
#include "helpers.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(CONNLOSS_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

json load(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

json strip_timestamp(json j) {
  j.erase("timestamp");
  return j;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = testutil::scratch_dir();
    out = "--out-dir " + q(dir) + " --seed 7";
    ASSERT_EQ(run(out + " synth --kind orthogonal --samples 60 --grid-rows 2 --grid-cols 2 --pre-dim 8 --labels-out "
                        "labels.csv"),
              0);
    embd = dir / "synth.embd";
  }
  fs::path dir, embd;
  std::string out;
};

}  // namespace

TEST_F(Cli, SynthWritesReadableStore) {
  const auto set = connloss::load_embeddings(embd);
  EXPECT_EQ(set.size(), 60u);
  EXPECT_EQ(set.pre.seq_len, 4u);
  EXPECT_TRUE(fs::exists(dir / "labels.csv"));
}

TEST_F(Cli, KnorOrthogonalIsOne) {
  ASSERT_EQ(run(out + " knor -i " + q(embd) + " --k 5 10"), 0);
  const auto r = load(dir / "knor_k10.json");
  EXPECT_EQ(r["average"].get<double>(), 1.0);
  EXPECT_EQ(r["meta"]["seed"].get<int>(), 7);
  EXPECT_EQ(r["meta"]["inputs"][0]["crc32"].get<std::string>().size(), 8u);
  const auto table = connloss::csv::read(dir / "knor_k5.csv");
  EXPECT_EQ(table.header, (std::vector<std::string>{"id", "ratio"}));
  EXPECT_EQ(table.rows.size(), 60u);
}

TEST_F(Cli, RerunGivesIdenticalReports) {
  ASSERT_EQ(run(out + " knor -i " + q(embd) + " --k 5"), 0);
  const auto first = load(dir / "knor_k5.json");
  ASSERT_EQ(run(out + " knor -i " + q(embd) + " --k 5"), 0);
  EXPECT_EQ(strip_timestamp(first), strip_timestamp(load(dir / "knor_k5.json")));
}

TEST_F(Cli, RetrieveBothSpaces) {
  ASSERT_EQ(run(out + " retrieve -i " + q(embd) + " --labels " + q(dir / "labels.csv") + " --metrics l2"), 0);
  for (const char* space : {"pre", "post"}) {
    const auto r = load(dir / (std::string("retrieval_") + space + "_l2.json"));
    EXPECT_EQ(r["recall"]["1"].get<double>(), 1.0) << space;
  }
}

TEST_F(Cli, TrainEvalCorrelateHeatmap) {
  ASSERT_EQ(run(out + " recon-train --train " + q(embd) + " --hidden-dims 16 --epochs 2 --batch 16"), 0);
  const auto train = load(dir / "train_report.json");
  EXPECT_GT(train["parameters"].get<int>(), 0);
  EXPECT_TRUE(fs::exists(dir / "loss_history.csv"));

  ASSERT_EQ(run(out + " recon-eval -i " + q(embd) + " --model " + q(dir / "model.rcpt")), 0);
  const auto losses = connloss::csv::read(dir / "per_sample_loss.csv");
  ASSERT_EQ(losses.rows.size(), 60u);
  const auto maps = load(dir / "loss_maps.json");
  EXPECT_EQ(maps["samples"].size(), 60u);
  EXPECT_EQ(maps["samples"][0]["squared_error"].size(), 4u);

  {
    std::ofstream s(dir / "scores.csv");
    s << "id,score\n";
    const auto c = losses.column("mean_loss");
    for (const auto& row : losses.rows) s << row[0] << "," << -std::stod(row[c]) << "\n";
  }
  fs::create_directories(dir / "masks");
  std::ofstream(dir / "masks" / "s00000.csv") << "1,0\n0,1\n";
  ASSERT_EQ(run(out + " correlate --losses " + q(dir / "per_sample_loss.csv") + " --scores " + q(dir / "scores.csv") +
                " --maps " + q(dir / "loss_maps.json") + " --masks " + q(dir / "masks")),
            0);
  const auto corr = load(dir / "correlation.json");
  EXPECT_EQ(corr["correlation"]["rho"].get<double>(), -1.0);
  EXPECT_EQ(corr["mask_split"]["per_sample"].size(), 1u);
  EXPECT_GT(corr["quartiles"]["low_loss_mean_score"].get<double>(),
            corr["quartiles"]["high_loss_mean_score"].get<double>());

  ASSERT_EQ(run(out + " heatmap --maps " + q(dir / "loss_maps.json") + " --ids s00001 --top-k 1 --cell-px 8"), 0);
  const auto img = connloss::read_ppm(dir / "heatmap_s00001.ppm");
  EXPECT_EQ(img.width, 16u);
  EXPECT_TRUE(fs::exists(dir / "grid_s00001.csv"));

  connloss::write_ppm(dir / "bg.ppm", connloss::RgbImage(32, 32));
  ASSERT_EQ(run(out + " heatmap --maps " + q(dir / "loss_maps.json") + " --ids s00001 --top-k 2 --image " + q(dir / "bg.ppm")), 0);
  EXPECT_EQ(connloss::read_ppm(dir / "overlay_s00001.ppm").width, 32u);
  connloss::write_ppm(dir / "wide.ppm", connloss::RgbImage(32, 16));
  EXPECT_NE(run(out + " heatmap --maps " + q(dir / "loss_maps.json") + " --ids s00001 --top-k 2 --image " + q(dir / "wide.ppm")),
            0);
}

TEST_F(Cli, ProcrustesOrthogonalIsNearZero) {
  ASSERT_EQ(run(out + " procrustes -i " + q(embd)), 0);
  const auto r = load(dir / "procrustes.json");
  EXPECT_LT(r["mean"].get<double>(), 1e-5);
  EXPECT_LT(r["orthogonality_residual"].get<double>(), 1e-6);
  EXPECT_EQ(connloss::csv::read(dir / "procrustes_errors.csv").rows.size(), 60u);
}

TEST_F(Cli, JsonConfigFile) {
  std::ofstream(dir / "cfg.json") << R"({"seed": 11, "knor": {"k": [3], "metric": "ip"}})";
  ASSERT_EQ(run("--out-dir " + q(dir) + " --config " + q(dir / "cfg.json") + " knor -i " + q(embd)), 0);
  const auto r = load(dir / "knor_k3.json");
  EXPECT_EQ(r["metric"], "ip");
  EXPECT_EQ(r["meta"]["seed"].get<int>(), 11);
}

TEST_F(Cli, ErrorsExitNonZero) {
  EXPECT_NE(run(out + " knor -i " + q(dir / "missing.embd")), 0);
  EXPECT_EQ(run(out + " knor -i " + q(dir / "labels.csv")), 2);
  EXPECT_NE(run(out + " knor -i " + q(embd) + " --k 60"), 0);
  EXPECT_NE(run(out + " synth --kind bogus"), 0);
  EXPECT_NE(run(out + " bogus-subcommand"), 0);
}
