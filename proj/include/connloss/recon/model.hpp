#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "connloss/error.hpp"
#include "connloss/matrix.hpp"
#include "connloss/recon/layers.hpp"

namespace connloss::recon {

enum class Arch : std::uint32_t { mlp = 0, seqreg = 1 };

inline const char* to_string(Arch a) { return a == Arch::mlp ? "mlp" : "seqreg"; }

inline Arch parse_arch(std::string_view s) {
  if (s == "mlp") return Arch::mlp;
  if (s == "seqreg") return Arch::seqreg;
  throw Error(ErrorKind::invalid_argument, "unknown architecture '" + std::string(s) + "' (use mlp or seqreg)");
}

/// Architecture description. `mlp_dims` is used by the MLP (input, hidden...,
/// output); the remaining sizes describe the sequence regressor.
struct ModelConfig {
  Arch arch = Arch::mlp;
  Activation activation = Activation::gelu;
  double dropout = 0.1;

  std::vector<std::size_t> mlp_dims;

  std::size_t input_dim = 0;   // D
  std::size_t output_dim = 0;  // D'
  std::size_t input_len = 0;   // S_post
  std::size_t output_len = 0;  // S_pre
  std::size_t hidden = 2048;
  std::size_t ffn = 2048;
  std::size_t layers = 4;
  std::size_t heads = 8;

  std::size_t in_features() const { return arch == Arch::mlp ? mlp_dims.front() : input_dim; }
  std::size_t out_features() const { return arch == Arch::mlp ? mlp_dims.back() : output_dim; }

  void validate() const {
    if (!(dropout >= 0 && dropout < 1)) throw Error(ErrorKind::invalid_argument, "dropout must be in [0, 1)");
    if (arch == Arch::mlp) {
      if (mlp_dims.size() < 2) throw Error(ErrorKind::invalid_argument, "mlp needs at least input and output dims");
      for (auto d : mlp_dims)
        if (d == 0) throw Error(ErrorKind::invalid_argument, "mlp layer dims must be positive");
      return;
    }
    for (auto d : {input_dim, output_dim, input_len, output_len, hidden, ffn, layers, heads})
      if (d == 0) throw Error(ErrorKind::invalid_argument, "seqreg sizes must be positive");
    if (hidden % heads != 0)
      throw Error(ErrorKind::invalid_argument, "hidden width " + std::to_string(hidden) +
                                                   " is not divisible by head count " + std::to_string(heads));
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Three-layer MLP sized for a length-preserving connector (4096 -> 1024 at
/// full scale, about 27M parameters).
inline ModelConfig mlp_preset(std::size_t input_dim, std::size_t output_dim, std::size_t hidden = 2048) {
  ModelConfig c;
  c.arch = Arch::mlp;
  c.mlp_dims = {input_dim, hidden, hidden, output_dim};
  return c;
}

inline ModelConfig llava_preset() {
  ModelConfig c;
  c.arch = Arch::mlp;
  c.mlp_dims = {4096, 4096, 2048, 1024};
  return c;
}

/// Full-size transformer regressor (16 layers, 16 heads, width 2048).
inline ModelConfig transformer_preset(std::size_t input_dim, std::size_t output_dim, std::size_t input_len,
                                      std::size_t output_len) {
  ModelConfig c;
  c.arch = Arch::seqreg;
  c.input_dim = input_dim;
  c.output_dim = output_dim;
  c.input_len = input_len;
  c.output_len = output_len;
  c.hidden = 2048;
  c.ffn = 8192;
  c.layers = 16;
  c.heads = 16;
  return c;
}

template <typename T>
struct NamedTensor {
  std::string name;
  Matrix<T> value;
};

/// One training pair; `dropout_seed` drives that sample's dropout masks so
/// results do not depend on how a batch is partitioned.
template <typename T>
struct Example {
  const Matrix<T>* input;
  const Matrix<T>* target;
  std::uint64_t dropout_seed = 0;
};

template <typename T>
using Gradients = std::vector<Matrix<T>>;

template <typename T>
class ReconstructionModel {
 public:
  ReconstructionModel() = default;

  /// Zero-filled parameters (layer-norm scales set to 1).
  static ReconstructionModel zeros(const ModelConfig& config) {
    config.validate();
    ReconstructionModel m;
    m.config_ = config;
    m.allocate();
    return m;
  }

  /// Glorot-uniform weights, zero biases, unit layer-norm scales.
  static ReconstructionModel create(const ModelConfig& config, std::uint64_t seed) {
    auto m = zeros(config);
    std::mt19937_64 rng(seed);
    for (auto& p : m.params_) {
      if (!p.name.ends_with(".weight")) continue;
      const double limit = std::sqrt(6.0 / static_cast<double>(p.value.rows() + p.value.cols()));
      std::uniform_real_distribution<double> u(-limit, limit);
      for (auto& v : p.value.values()) v = T(u(rng));
    }
    return m;
  }

  const ModelConfig& config() const { return config_; }
  void set_dropout(double p) {
    config_.dropout = p;
    config_.validate();
  }

  std::vector<NamedTensor<T>>& parameters() { return params_; }
  const std::vector<NamedTensor<T>>& parameters() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  Gradients<T> zero_gradients() const {
    Gradients<T> g;
    g.reserve(params_.size());
    for (const auto& p : params_) g.emplace_back(p.value.rows(), p.value.cols());
    return g;
  }

  bool all_finite() const {
    for (const auto& p : params_)
      for (T v : p.value.values())
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  /// Evaluation-mode forward pass (no dropout) for one sample.
  Matrix<T> forward(const Matrix<T>& input) const {
    check_input(input);
    return config_.arch == Arch::mlp ? mlp_forward(input, nullptr, nullptr) : seq_forward(input, nullptr, nullptr);
  }

  /// Adds the gradient of the summed per-patch squared error over `batch` to
  /// `grads` and returns that summed loss. With `training` set, dropout is
  /// active using each example's seed.
  double accumulate_gradients(std::span<const Example<T>> batch, Gradients<T>& grads, bool training) const {
    if (grads.size() != params_.size()) throw Error(ErrorKind::dim_mismatch, "gradient buffer does not match model");
    for (const auto& ex : batch) {
      check_input(*ex.input);
      check_target(*ex.target);
    }
    return config_.arch == Arch::mlp ? mlp_backward(batch, grads, training) : seq_backward(batch, grads, training);
  }

  template <typename U>
  ReconstructionModel<U> cast() const {
    auto out = ReconstructionModel<U>::zeros(config_);
    for (std::size_t i = 0; i < params_.size(); ++i) out.parameters()[i].value = params_[i].value.template cast<U>();
    return out;
  }

  /// Warning text when this model has fewer parameters than the connector it inverts.
  std::optional<std::string> capacity_warning(std::optional<std::size_t> connector_params) const {
    if (!connector_params || parameter_count() >= *connector_params) return std::nullopt;
    return "reconstruction model has " + std::to_string(parameter_count()) +
           " parameters, fewer than the connector's " + std::to_string(*connector_params);
  }

 private:
  // Per-layer parameter offsets for the sequence regressor.
  enum SeqSlot : std::size_t {
    kQw, kQb, kKw, kKb, kVw, kVb, kOw, kOb, kLn1g, kLn1b, kF1w, kF1b, kF2w, kF2b, kLn2g, kLn2b, kSlots
  };

  void add(std::string name, std::size_t rows, std::size_t cols, T fill = T(0)) {
    params_.push_back({std::move(name), Matrix<T>(rows, cols, fill)});
  }

  void allocate() {
    params_.clear();
    if (config_.arch == Arch::mlp) {
      const auto& d = config_.mlp_dims;
      for (std::size_t l = 0; l + 1 < d.size(); ++l) {
        add("layer" + std::to_string(l) + ".weight", d[l], d[l + 1]);
        add("layer" + std::to_string(l) + ".bias", 1, d[l + 1]);
      }
      return;
    }
    const auto h = config_.hidden, f = config_.ffn;
    add("in_proj.weight", config_.input_dim, h);
    add("in_proj.bias", 1, h);
    for (std::size_t l = 0; l < config_.layers; ++l) {
      const std::string p = "enc" + std::to_string(l) + ".";
      for (const char* proj : {"attn.q", "attn.k", "attn.v", "attn.out"}) {
        add(p + proj + ".weight", h, h);
        add(p + proj + ".bias", 1, h);
      }
      add(p + "ln1.gamma", 1, h, T(1));
      add(p + "ln1.beta", 1, h);
      add(p + "ffn1.weight", h, f);
      add(p + "ffn1.bias", 1, f);
      add(p + "ffn2.weight", f, h);
      add(p + "ffn2.bias", 1, h);
      add(p + "ln2.gamma", 1, h, T(1));
      add(p + "ln2.beta", 1, h);
    }
    add("out_proj.weight", h, config_.output_dim);
    add("out_proj.bias", 1, config_.output_dim);
  }

  void check_input(const Matrix<T>& input) const {
    if (input.cols() != config_.in_features())
      throw Error(ErrorKind::dim_mismatch, "input has " + std::to_string(input.cols()) + " features, model expects " +
                                               std::to_string(config_.in_features()));
    if (config_.arch == Arch::seqreg && input.rows() != config_.input_len)
      throw Error(ErrorKind::dim_mismatch, "input has " + std::to_string(input.rows()) + " tokens, model expects " +
                                               std::to_string(config_.input_len));
  }

  void check_target(const Matrix<T>& target) const {
    if (target.cols() != config_.out_features())
      throw Error(ErrorKind::dim_mismatch, "target has " + std::to_string(target.cols()) +
                                               " features, model produces " + std::to_string(config_.out_features()));
  }

  const Matrix<T>& param(std::size_t i) const { return params_[i].value; }

  // ---------------------------------------------------------------- MLP

  struct MlpCache {
    std::vector<Matrix<T>> inputs;   // input to each layer
    std::vector<Matrix<T>> pre_act;  // hidden pre-activations
    std::vector<Matrix<T>> masks;    // dropout masks (training only)
  };

  // Rows of `input` are independent patches. `row_seeds`, when given, holds
  // one (seed, rows) pair per stacked sample for dropout.
  Matrix<T> mlp_forward(const Matrix<T>& input, MlpCache* cache,
                        const std::vector<std::pair<std::uint64_t, std::size_t>>* row_seeds) const {
    const std::size_t n_layers = config_.mlp_dims.size() - 1;
    Matrix<T> h = input;
    for (std::size_t l = 0; l < n_layers; ++l) {
      Matrix<T> z;
      linear_forward(h, param(2 * l), param(2 * l + 1), z);
      if (cache) cache->inputs.push_back(std::move(h));
      if (l + 1 == n_layers) return z;
      if (cache) cache->pre_act.push_back(z);
      for (auto& v : z.values()) v = activate(config_.activation, v);
      if (row_seeds && config_.dropout > 0) {
        Matrix<T> mask(z.rows(), z.cols());
        std::size_t row = 0;
        for (const auto& [seed, rows] : *row_seeds) {
          std::mt19937_64 rng(seed ^ (0x9e3779b97f4a7c15ULL * (l + 1)));
          const auto block = dropout_mask<T>(rows, z.cols(), config_.dropout, rng);
          std::ranges::copy(block.values(), mask.row(row).begin());
          row += rows;
        }
        for (std::size_t i = 0; i < z.size(); ++i) z.values()[i] *= mask.values()[i];
        if (cache) cache->masks.push_back(std::move(mask));
      }
      h = std::move(z);
    }
    return h;
  }

  double mlp_backward(std::span<const Example<T>> batch, Gradients<T>& grads, bool training) const {
    if (batch.empty()) return 0;
    std::size_t rows = 0;
    for (const auto& ex : batch) {
      if (ex.input->rows() != ex.target->rows())
        throw Error(ErrorKind::dim_mismatch, "mlp requires equal input and target sequence lengths");
      rows += ex.input->rows();
    }
    Matrix<T> x(rows, config_.in_features());
    Matrix<T> target(rows, config_.out_features());
    std::vector<std::pair<std::uint64_t, std::size_t>> seeds;
    std::size_t at = 0;
    for (const auto& ex : batch) {
      std::ranges::copy(ex.input->values(), x.row(at).begin());
      std::ranges::copy(ex.target->values(), target.row(at).begin());
      seeds.emplace_back(ex.dropout_seed, ex.input->rows());
      at += ex.input->rows();
    }
    MlpCache cache;
    Matrix<T> y = mlp_forward(x, &cache, training ? &seeds : nullptr);

    double loss = 0;
    Matrix<T> dy(y.rows(), y.cols());
    for (std::size_t i = 0; i < y.size(); ++i) {
      const T diff = y.values()[i] - target.values()[i];
      loss += static_cast<double>(diff) * static_cast<double>(diff);
      dy.values()[i] = T(2) * diff;
    }
    const std::size_t n_layers = config_.mlp_dims.size() - 1;
    const bool dropped = training && config_.dropout > 0;
    for (std::size_t l = n_layers; l-- > 0;) {
      Matrix<T> dh = linear_backward(cache.inputs[l], param(2 * l), dy, grads[2 * l], grads[2 * l + 1], l > 0);
      if (l == 0) break;
      const auto& z = cache.pre_act[l - 1];
      for (std::size_t i = 0; i < dh.size(); ++i) {
        T g = dh.values()[i] * activate_grad(config_.activation, z.values()[i]);
        if (dropped) g *= cache.masks[l - 1].values()[i];
        dh.values()[i] = g;
      }
      dy = std::move(dh);
    }
    return loss;
  }

  // ---------------------------------------------------------- seqreg

  struct LayerCache {
    Matrix<T> input;
    Matrix<T> q, k, v;
    std::vector<Matrix<T>> probs;  // per head, S x S
    Matrix<T> attn_concat;
    LayerNormCache<T> ln1;
    Matrix<T> y1;
    Matrix<T> ffn_pre;
    Matrix<T> ffn_act;  // after activation and dropout
    Matrix<T> mask;
    LayerNormCache<T> ln2;
  };

  struct SeqCache {
    Matrix<T> input;
    std::vector<LayerCache> layers;
    Matrix<T> final_hidden;
  };

  std::size_t slot(std::size_t layer, SeqSlot s) const { return 2 + layer * kSlots + s; }

  Matrix<T> encoder_layer(const Matrix<T>& x, std::size_t l, LayerCache* cache, std::mt19937_64* rng) const {
    const std::size_t s = x.rows(), h = config_.hidden, heads = config_.heads, dh = h / heads;
    Matrix<T> q, k, v;
    linear_forward(x, param(slot(l, kQw)), param(slot(l, kQb)), q);
    linear_forward(x, param(slot(l, kKw)), param(slot(l, kKb)), k);
    linear_forward(x, param(slot(l, kVw)), param(slot(l, kVb)), v);
    const T scale = T(1.0 / std::sqrt(static_cast<double>(dh)));
    Matrix<T> concat(s, h);
    std::vector<Matrix<T>> probs;
    for (std::size_t head = 0; head < heads; ++head) {
      const std::size_t c0 = head * dh;
      Matrix<T> p(s, s);
      for (std::size_t i = 0; i < s; ++i) {
        T max_score = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < s; ++j) {
          T acc = 0;
          for (std::size_t c = 0; c < dh; ++c) acc += q(i, c0 + c) * k(j, c0 + c);
          p(i, j) = acc * scale;
          max_score = std::max(max_score, p(i, j));
        }
        T denom = 0;
        for (std::size_t j = 0; j < s; ++j) {
          p(i, j) = std::exp(p(i, j) - max_score);
          denom += p(i, j);
        }
        for (std::size_t j = 0; j < s; ++j) p(i, j) /= denom;
        for (std::size_t j = 0; j < s; ++j) {
          const T pij = p(i, j);
          for (std::size_t c = 0; c < dh; ++c) concat(i, c0 + c) += pij * v(j, c0 + c);
        }
      }
      if (cache) probs.push_back(std::move(p));
    }
    Matrix<T> attn;
    linear_forward(concat, param(slot(l, kOw)), param(slot(l, kOb)), attn);
    for (std::size_t i = 0; i < attn.size(); ++i) attn.values()[i] += x.values()[i];
    LayerNormCache<T> ln1;
    Matrix<T> y1 = layer_norm_forward(attn, param(slot(l, kLn1g)), param(slot(l, kLn1b)), cache ? &ln1 : nullptr);

    Matrix<T> f1;
    linear_forward(y1, param(slot(l, kF1w)), param(slot(l, kF1b)), f1);
    Matrix<T> act = f1;
    for (auto& a : act.values()) a = activate(config_.activation, a);
    Matrix<T> mask;
    if (rng && config_.dropout > 0) {
      mask = dropout_mask<T>(act.rows(), act.cols(), config_.dropout, *rng);
      for (std::size_t i = 0; i < act.size(); ++i) act.values()[i] *= mask.values()[i];
    }
    Matrix<T> f2;
    linear_forward(act, param(slot(l, kF2w)), param(slot(l, kF2b)), f2);
    for (std::size_t i = 0; i < f2.size(); ++i) f2.values()[i] += y1.values()[i];
    LayerNormCache<T> ln2;
    Matrix<T> y2 = layer_norm_forward(f2, param(slot(l, kLn2g)), param(slot(l, kLn2b)), cache ? &ln2 : nullptr);
    if (cache) {
      *cache = LayerCache{x, std::move(q), std::move(k), std::move(v), std::move(probs), std::move(concat),
                          std::move(ln1), std::move(y1), std::move(f1), std::move(act), std::move(mask), std::move(ln2)};
    }
    return y2;
  }

  Matrix<T> seq_forward(const Matrix<T>& input, SeqCache* cache, std::mt19937_64* rng) const {
    Matrix<T> tokens;
    linear_forward(input, param(0), param(1), tokens);
    const auto src = expansion_sources(config_.input_len, config_.output_len);
    Matrix<T> x = sinusoidal_positions<T>(config_.output_len, config_.hidden);
    for (std::size_t p = 0; p < src.size(); ++p) {
      auto dst = x.row(p);
      const auto from = tokens.row(src[p]);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += from[c];
    }
    if (cache) {
      cache->input = input;
      cache->layers.resize(config_.layers);
    }
    for (std::size_t l = 0; l < config_.layers; ++l)
      x = encoder_layer(x, l, cache ? &cache->layers[l] : nullptr, rng);
    const std::size_t out = 2 + config_.layers * kSlots;
    Matrix<T> y;
    linear_forward(x, param(out), param(out + 1), y);
    if (cache) cache->final_hidden = std::move(x);
    return y;
  }

  Matrix<T> encoder_layer_backward(const LayerCache& c, std::size_t l, const Matrix<T>& dy2, Gradients<T>& g,
                                   bool dropped) const {
    const std::size_t s = c.input.rows(), h = config_.hidden, heads = config_.heads, dh = h / heads;
    Matrix<T> dr2 = layer_norm_backward(c.ln2, param(slot(l, kLn2g)), dy2, g[slot(l, kLn2g)], g[slot(l, kLn2b)]);
    Matrix<T> dact = linear_backward(c.ffn_act, param(slot(l, kF2w)), dr2, g[slot(l, kF2w)], g[slot(l, kF2b)]);
    for (std::size_t i = 0; i < dact.size(); ++i) {
      T d = dact.values()[i] * activate_grad(config_.activation, c.ffn_pre.values()[i]);
      if (dropped) d *= c.mask.values()[i];
      dact.values()[i] = d;
    }
    Matrix<T> dy1 = linear_backward(c.y1, param(slot(l, kF1w)), dact, g[slot(l, kF1w)], g[slot(l, kF1b)]);
    for (std::size_t i = 0; i < dy1.size(); ++i) dy1.values()[i] += dr2.values()[i];

    Matrix<T> dr1 = layer_norm_backward(c.ln1, param(slot(l, kLn1g)), dy1, g[slot(l, kLn1g)], g[slot(l, kLn1b)]);
    Matrix<T> dconcat = linear_backward(c.attn_concat, param(slot(l, kOw)), dr1, g[slot(l, kOw)], g[slot(l, kOb)]);

    const T scale = T(1.0 / std::sqrt(static_cast<double>(dh)));
    Matrix<T> dq(s, h), dk(s, h), dv(s, h);
    std::vector<T> dp(s);
    for (std::size_t head = 0; head < heads; ++head) {
      const std::size_t c0 = head * dh;
      const Matrix<T>& p = c.probs[head];
      for (std::size_t i = 0; i < s; ++i) {
        T row_dot = 0;
        for (std::size_t j = 0; j < s; ++j) {
          T acc = 0;
          for (std::size_t cc = 0; cc < dh; ++cc) acc += dconcat(i, c0 + cc) * c.v(j, c0 + cc);
          dp[j] = acc;
          row_dot += acc * p(i, j);
          for (std::size_t cc = 0; cc < dh; ++cc) dv(j, c0 + cc) += p(i, j) * dconcat(i, c0 + cc);
        }
        for (std::size_t j = 0; j < s; ++j) {
          const T ds = p(i, j) * (dp[j] - row_dot) * scale;
          if (ds == T(0)) continue;
          for (std::size_t cc = 0; cc < dh; ++cc) {
            dq(i, c0 + cc) += ds * c.k(j, c0 + cc);
            dk(j, c0 + cc) += ds * c.q(i, c0 + cc);
          }
        }
      }
    }
    Matrix<T> dx = dr1;
    for (auto [w, b, d] : {std::tuple{kQw, kQb, &dq}, std::tuple{kKw, kKb, &dk}, std::tuple{kVw, kVb, &dv}}) {
      const Matrix<T> part = linear_backward(c.input, param(slot(l, w)), *d, g[slot(l, w)], g[slot(l, b)]);
      for (std::size_t i = 0; i < dx.size(); ++i) dx.values()[i] += part.values()[i];
    }
    return dx;
  }

  double seq_backward(std::span<const Example<T>> batch, Gradients<T>& grads, bool training) const {
    double loss = 0;
    const std::size_t out = 2 + config_.layers * kSlots;
    const bool dropped = training && config_.dropout > 0;
    for (const auto& ex : batch) {
      if (ex.target->rows() != config_.output_len)
        throw Error(ErrorKind::dim_mismatch, "target has " + std::to_string(ex.target->rows()) +
                                                 " patches, model produces " + std::to_string(config_.output_len));
      std::mt19937_64 rng(ex.dropout_seed);
      SeqCache cache;
      const Matrix<T> y = seq_forward(*ex.input, &cache, dropped ? &rng : nullptr);
      Matrix<T> dy(y.rows(), y.cols());
      for (std::size_t i = 0; i < y.size(); ++i) {
        const T diff = y.values()[i] - ex.target->values()[i];
        loss += static_cast<double>(diff) * static_cast<double>(diff);
        dy.values()[i] = T(2) * diff;
      }
      Matrix<T> dx = linear_backward(cache.final_hidden, param(out), dy, grads[out], grads[out + 1]);
      for (std::size_t l = config_.layers; l-- > 0;) dx = encoder_layer_backward(cache.layers[l], l, dx, grads, dropped);
      // Undo the nearest-index expansion: each token collects the gradient of
      // every position it was copied to.
      const auto src = expansion_sources(config_.input_len, config_.output_len);
      Matrix<T> dtokens(config_.input_len, config_.hidden);
      for (std::size_t p = 0; p < src.size(); ++p) {
        auto dst = dtokens.row(src[p]);
        const auto from = dx.row(p);
        for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += from[c];
      }
      linear_backward(cache.input, param(0), dtokens, grads[0], grads[1], false);
    }
    return loss;
  }

  ModelConfig config_;
  std::vector<NamedTensor<T>> params_;
};

}  // namespace connloss::recon
