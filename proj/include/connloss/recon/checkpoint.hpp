#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "connloss/binio.hpp"
#include "connloss/embstore.hpp"
#include "connloss/error.hpp"
#include "connloss/recon/model.hpp"

namespace connloss::recon {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// A model plus the normalization statistics it was trained against.
template <typename T>
struct Checkpoint {
  ReconstructionModel<T> model;
  std::optional<NormStats> norms;
};

struct TensorShape {
  std::string name;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  friend bool operator==(const TensorShape&, const TensorShape&) = default;
};

namespace detail {

inline std::vector<std::uint32_t> config_words(const ModelConfig& c) {
  if (c.arch == Arch::mlp) return {c.mlp_dims.begin(), c.mlp_dims.end()};
  return {static_cast<std::uint32_t>(c.input_dim), static_cast<std::uint32_t>(c.output_dim),
          static_cast<std::uint32_t>(c.input_len), static_cast<std::uint32_t>(c.output_len),
          static_cast<std::uint32_t>(c.hidden),    static_cast<std::uint32_t>(c.ffn),
          static_cast<std::uint32_t>(c.layers),    static_cast<std::uint32_t>(c.heads)};
}

inline void put_doubles(ByteWriter& w, const std::vector<double>& v) { w.put_array<double>(v); }

inline std::vector<double> get_doubles(ByteReader& r, std::size_t n, const char* what) {
  std::vector<double> v(n);
  r.get_array<double>(v, what);
  return v;
}

}  // namespace detail

/// Layout (little-endian):
///   "RCPT" | version u32 | arch u32 | activation u32 | dropout f64 |
///   n_config u32 | config u32[n] |
///   has_norms u32 | [D' u32 | D u32 | pre_mean f64[D'] | pre_std f64[D'] | post_mean f64[D] | post_std f64[D]] |
///   n_tensors u32 | n x (name_len u16 | name | rows u32 | cols u32) |
///   f32 payload in table order | CRC32
template <typename T>
std::vector<std::uint8_t> encode_checkpoint(const ReconstructionModel<T>& model, const std::optional<NormStats>& norms) {
  const auto& c = model.config();
  ByteWriter w;
  w.put_bytes("RCPT");
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.arch));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.activation));
  w.put<double>(c.dropout);
  const auto words = detail::config_words(c);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(words.size()));
  for (auto v : words) w.put<std::uint32_t>(v);
  w.put<std::uint32_t>(norms ? 1 : 0);
  if (norms) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(norms->pre_mean.size()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(norms->post_mean.size()));
    detail::put_doubles(w, norms->pre_mean);
    detail::put_doubles(w, norms->pre_std);
    detail::put_doubles(w, norms->post_mean);
    detail::put_doubles(w, norms->post_std);
  }
  const auto& params = model.parameters();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(p.name.size()));
    w.put_bytes(p.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.value.rows()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.value.cols()));
  }
  for (const auto& p : params) {
    if constexpr (std::is_same_v<T, float>) {
      w.put_array<float>(p.value.values());
    } else {
      for (T v : p.value.values()) w.put<float>(static_cast<float>(v));
    }
  }
  w.put_crc();
  return std::move(w.bytes());
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ReconstructionModel<T>& model,
                     const std::optional<NormStats>& norms = std::nullopt) {
  write_file_bytes(path, encode_checkpoint(model, norms));
}

struct CheckpointHeader {
  ModelConfig config;
  std::optional<NormStats> norms;
  std::vector<TensorShape> shapes;
  std::size_t payload_offset = 0;
};

inline CheckpointHeader decode_checkpoint_header(ByteReader& r, std::span<const std::uint8_t> bytes) {
  if (bytes.size() >= 4 && std::string_view(reinterpret_cast<const char*>(bytes.data()), 4) != "RCPT")
    throw Error(ErrorKind::bad_magic, "bad magic: not an RCPT checkpoint", 0);
  r.get_string(4, "magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw Error(ErrorKind::version_mismatch, "version mismatch: expected " + std::to_string(kCheckpointVersion) +
                                                 ", found " + std::to_string(version), 4);
  CheckpointHeader h;
  const auto arch = r.get<std::uint32_t>("arch");
  if (arch > 1) throw Error(ErrorKind::invalid_argument, "unknown architecture tag " + std::to_string(arch), 8);
  h.config.arch = static_cast<Arch>(arch);
  const auto act = r.get<std::uint32_t>("activation");
  if (act > 2) throw Error(ErrorKind::invalid_argument, "unknown activation tag " + std::to_string(act), 12);
  h.config.activation = static_cast<Activation>(act);
  h.config.dropout = r.get<double>("dropout");
  const auto n_words = r.get<std::uint32_t>("config length");
  std::vector<std::uint32_t> words(n_words);
  for (auto& v : words) v = r.get<std::uint32_t>("config");
  if (h.config.arch == Arch::mlp) {
    h.config.mlp_dims.assign(words.begin(), words.end());
  } else {
    if (words.size() != 8) throw Error(ErrorKind::dim_mismatch, "seqreg config needs 8 fields");
    auto& c = h.config;
    c.input_dim = words[0], c.output_dim = words[1], c.input_len = words[2], c.output_len = words[3];
    c.hidden = words[4], c.ffn = words[5], c.layers = words[6], c.heads = words[7];
  }
  if (r.get<std::uint32_t>("norm flag") != 0) {
    const auto dp = r.get<std::uint32_t>("norm dims");
    const auto d = r.get<std::uint32_t>("norm dims");
    NormStats n;
    n.pre_mean = detail::get_doubles(r, dp, "norm stats");
    n.pre_std = detail::get_doubles(r, dp, "norm stats");
    n.post_mean = detail::get_doubles(r, d, "norm stats");
    n.post_std = detail::get_doubles(r, d, "norm stats");
    h.norms = std::move(n);
  }
  const auto n_tensors = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    TensorShape s;
    s.name = r.get_string(r.get<std::uint16_t>("name length"), "tensor name");
    s.rows = r.get<std::uint32_t>("rows");
    s.cols = r.get<std::uint32_t>("cols");
    h.shapes.push_back(std::move(s));
  }
  h.payload_offset = r.position();
  return h;
}

template <typename T = float>
Checkpoint<T> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  auto header = decode_checkpoint_header(r, bytes);
  header.config.validate();
  auto model = ReconstructionModel<T>::zeros(header.config);
  auto& params = model.parameters();
  if (params.size() != header.shapes.size())
    throw Error(ErrorKind::dim_mismatch, "shape mismatch: checkpoint has " + std::to_string(header.shapes.size()) +
                                             " tensors, configuration implies " + std::to_string(params.size()));
  std::uint64_t payload = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& s = header.shapes[i];
    if (s.name != params[i].name || s.rows != params[i].value.rows() || s.cols != params[i].value.cols())
      throw Error(ErrorKind::dim_mismatch, "shape mismatch for tensor '" + s.name + "'");
    payload += std::uint64_t(s.rows) * s.cols * 4;
  }
  if (r.remaining() < payload + 4)
    throw Error(ErrorKind::truncated, "truncated payload: checkpoint is missing parameter data", bytes.size());
  if (r.remaining() > payload + 4)
    throw Error(ErrorKind::dim_mismatch, "unexpected trailing bytes in checkpoint", r.position() + payload + 4);
  verify_trailing_crc(bytes);
  for (auto& p : params) {
    if constexpr (std::is_same_v<T, float>) {
      r.get_array<float>(p.value.values(), "parameters");
    } else {
      for (auto& v : p.value.values()) v = static_cast<T>(r.get<float>("parameters"));
    }
  }
  if (!model.all_finite()) throw Error(ErrorKind::non_finite, "checkpoint contains non-finite parameters");
  return {std::move(model), std::move(header.norms)};
}

template <typename T = float>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return decode_checkpoint<T>(bytes);
}

/// Shape table of a checkpoint file without materializing the parameters.
inline std::vector<TensorShape> read_checkpoint_shapes(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  ByteReader r(bytes);
  return decode_checkpoint_header(r, bytes).shapes;
}

}  // namespace connloss::recon
