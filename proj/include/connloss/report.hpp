#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "connloss/analysis.hpp"
#include "connloss/binio.hpp"
#include "connloss/error.hpp"
#include "connloss/geometry.hpp"
#include "connloss/procrustes.hpp"
#include "connloss/recon/patch_loss.hpp"

namespace connloss::report {

using json = nlohmann::ordered_json;

inline json to_json(const KnorResult& r) {
  json per_sample = json::array();
  for (const auto& rec : r.per_sample) per_sample.push_back({{"id", rec.id}, {"ratio", rec.ratio()}});
  return {{"k", r.k},
          {"metric", to_string(r.metric)},
          {"pooling", to_string(r.pooling)},
          {"normalized", r.normalized},
          {"per_sample", std::move(per_sample)},
          {"average", r.average}};
}

inline json to_json(const RetrievalReport& r) {
  json recall = json::object();
  for (const auto& [k, v] : r.recall) recall[std::to_string(k)] = v;
  json hits = json::array();
  for (const auto& h : r.per_sample) {
    json per_k = json::object();
    for (std::size_t j = 0; j < r.ks.size(); ++j) per_k[std::to_string(r.ks[j])] = h.hit[j] ? 1 : 0;
    hits.push_back({{"id", h.id}, {"hits", std::move(per_k)}});
  }
  return {{"space", to_string(r.space)},
          {"metric", to_string(r.metric)},
          {"recall", std::move(recall)},
          {"per_sample_hits", std::move(hits)}};
}

inline json to_json(const AlignmentResult& r) {
  return {{"target_dim", r.target_dim},
          {"mean", r.summary.mean},
          {"std", r.summary.std},
          {"min", r.summary.min},
          {"max", r.summary.max},
          {"orthogonality_residual", r.orthogonality_residual},
          {"scale", r.scale}};
}

inline json to_json(const CorrelationResult& r) {
  return {{"rho", r.rho}, {"p", r.p}, {"n", r.n}, {"method", r.method}, {"dropped", r.dropped},
          {"x", r.x_label},  {"y", r.y_label}};
}

inline json to_json(const QuartileResult& q) {
  return {{"n", q.n},
          {"group_size", q.group_size},
          {"low_loss_mean_score", q.low_loss_mean_score},
          {"high_loss_mean_score", q.high_loss_mean_score},
          {"quartile_cutoffs", {{"low", q.low_cutoff}, {"high", q.high_cutoff}}}};
}

inline json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline json to_json(const MaskSplit& s) {
  return {{"id", s.id},
          {"relevant_count", s.relevant_count},
          {"irrelevant_count", s.irrelevant_count},
          {"relevant_mean_loss", optional_number(s.relevant_mean_loss)},
          {"irrelevant_mean_loss", optional_number(s.irrelevant_mean_loss)},
          {"relevant_mean_norm_diff", optional_number(s.relevant_mean_norm_diff)},
          {"irrelevant_mean_norm_diff", optional_number(s.irrelevant_mean_norm_diff)}};
}

/// Loss-map file: {"grid": [M1, M2], "units": ..., "samples": [{id, total,
/// mean, squared_error: [row-major], norm_diff: [row-major]}]}.
inline json loss_maps_to_json(const std::vector<recon::PatchLossMap>& maps, GridShape grid, bool denormalized) {
  json samples = json::array();
  for (const auto& m : maps)
    samples.push_back({{"id", m.id},
                       {"total", m.total},
                       {"mean", m.mean()},
                       {"squared_error", m.squared_error.storage()},
                       {"norm_diff", m.norm_diff.storage()}});
  return {{"grid", {grid.rows, grid.cols}},
          {"units", {{"squared_error", "normalized"}, {"norm_diff", denormalized ? "original" : "normalized"}}},
          {"samples", std::move(samples)}};
}

inline std::vector<recon::PatchLossMap> loss_maps_from_json(const json& j, GridShape* grid_out = nullptr) {
  try {
    const GridShape grid{j.at("grid").at(0).get<std::uint32_t>(), j.at("grid").at(1).get<std::uint32_t>()};
    if (grid_out) *grid_out = grid;
    std::vector<recon::PatchLossMap> maps;
    for (const auto& s : j.at("samples")) {
      recon::PatchLossMap m;
      m.id = s.at("id").get<std::string>();
      auto sq = s.at("squared_error").get<std::vector<double>>();
      auto nd = s.at("norm_diff").get<std::vector<double>>();
      if (sq.size() != grid.cells() || nd.size() != grid.cells())
        throw Error(ErrorKind::dim_mismatch, "loss map for '" + m.id + "' does not match the grid");
      m.squared_error = Matrix<double>(grid.rows, grid.cols, std::move(sq));
      m.norm_diff = Matrix<double>(grid.rows, grid.cols, std::move(nd));
      m.total = s.at("total").get<double>();
      maps.push_back(std::move(m));
    }
    return maps;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::invalid_argument, std::string("malformed loss-map file: ") + e.what());
  }
}

inline json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::invalid_argument, path.string() + ": " + e.what());
  }
}

inline void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

/// Provenance block shared by every report. Everything except `timestamp`
/// depends only on the inputs and configuration.
inline json metadata(const std::string& command, const std::string& version, const json& config, std::uint64_t seed,
                     const std::vector<std::filesystem::path>& inputs) {
  json files = json::array();
  for (const auto& p : inputs) {
    char crc[16];
    std::snprintf(crc, sizeof(crc), "%08x", file_crc32(p));
    files.push_back({{"path", p.string()}, {"crc32", crc}});
  }
  return {{"tool", "connloss"}, {"version", version}, {"command", command},
          {"seed", seed},       {"config", config},   {"inputs", std::move(files)}};
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace connloss::report
