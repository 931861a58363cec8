#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <random>
#include <vector>

#include "connloss/embstore.hpp"
#include "connloss/error.hpp"
#include "connloss/parallel.hpp"
#include "connloss/recon/adam.hpp"
#include "connloss/recon/model.hpp"
#include "connloss/recon/patch_loss.hpp"

namespace connloss::recon {

struct TrainerConfig {
  double learning_rate = 1e-4;
  double dropout = 0.1;
  std::size_t batch_size = 128;
  std::size_t max_epochs = 30;
  std::size_t patience = 3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;
  unsigned threads = 1;

  void validate() const {
    if (!(learning_rate >= 0) || !std::isfinite(learning_rate))
      throw Error(ErrorKind::invalid_argument, "learning rate must be finite and non-negative");
    if (batch_size < 1 || max_epochs < 1) throw Error(ErrorKind::invalid_argument, "batch size and epochs must be >= 1");
    if (patience < 1) throw Error(ErrorKind::invalid_argument, "patience must be >= 1");
    if (!(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1 && epsilon > 0))
      throw Error(ErrorKind::invalid_argument, "Adam betas must lie in (0,1) and epsilon must be positive");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;  // mean per-patch loss over the epoch's batches (training mode)
  double val_loss = 0;    // mean per-patch loss on the validation set (evaluation mode)
};

template <typename T>
struct TrainResult {
  ReconstructionModel<T> model;  // best-validation checkpoint
  NormStats norms;               // computed on the training split
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_loss = 0;
  bool stopped_early = false;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

template <typename T>
std::vector<PreparedSample<T>> prepare_all(const EmbeddingSet& set, const NormStats& norms) {
  std::vector<PreparedSample<T>> out;
  out.reserve(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) out.push_back(prepare_sample<T>(set, i, norms));
  return out;
}

/// Summed evaluation-mode squared error over prepared samples.
template <typename T>
double summed_loss(const ReconstructionModel<T>& model, const std::vector<PreparedSample<T>>& samples) {
  double loss = 0;
  for (const auto& s : samples) {
    const Matrix<T> y = model.forward(s.input);
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double d = static_cast<double>(y.values()[i]) - static_cast<double>(s.target.values()[i]);
      loss += d * d;
    }
  }
  return loss;
}

/// Gradient of the summed loss over a batch. Work is split into contiguous
/// chunks whose partial gradients are added in chunk order, so the result does
/// not depend on thread scheduling.
template <typename T>
double batch_gradients(const ReconstructionModel<T>& model, std::span<const Example<T>> batch, Gradients<T>& grads,
                       bool training, unsigned threads) {
  const std::size_t chunks = std::min<std::size_t>(std::max(1u, threads), batch.size());
  if (chunks <= 1) return model.accumulate_gradients(batch, grads, training);
  std::vector<Gradients<T>> partial(chunks, model.zero_gradients());
  std::vector<double> losses(chunks, 0.0);
  parallel_for(chunks, threads, [&](std::size_t c) {
    const std::size_t begin = batch.size() * c / chunks, end = batch.size() * (c + 1) / chunks;
    losses[c] = model.accumulate_gradients(batch.subspan(begin, end - begin), partial[c], training);
  });
  double loss = 0;
  for (std::size_t c = 0; c < chunks; ++c) {
    loss += losses[c];
    for (std::size_t p = 0; p < grads.size(); ++p) {
      auto dst = grads[p].values();
      const auto src = partial[c][p].values();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
  }
  return loss;
}

/// Mini-batch Adam on normalized embeddings with early stopping on validation
/// loss. Returns the parameters from the best validation epoch.
template <typename T = float>
TrainResult<T> train(const EmbeddingSet& train_set, const EmbeddingSet& val_set, const TrainerConfig& config,
                     ModelConfig arch, const std::function<void(const EpochRecord&)>& on_epoch = {},
                     std::optional<ReconstructionModel<T>> initial = std::nullopt) {
  config.validate();
  if (train_set.size() == 0 || val_set.size() == 0)
    throw Error(ErrorKind::invalid_argument, "training and validation sets must be non-empty");
  if (train_set.pre.dim != val_set.pre.dim || train_set.post.dim != val_set.post.dim ||
      train_set.pre.seq_len != val_set.pre.seq_len || train_set.post.seq_len != val_set.post.seq_len)
    throw Error(ErrorKind::dim_mismatch, "training and validation sets have different shapes");
  arch.dropout = config.dropout;

  TrainResult<T> result;
  result.norms = compute_norm_stats(train_set);
  ReconstructionModel<T> model = initial ? std::move(*initial) : ReconstructionModel<T>::create(arch, config.seed);
  model.set_dropout(config.dropout);
  check_compatible(model, train_set, result.norms);

  const auto train_data = prepare_all<T>(train_set, result.norms);
  const auto val_data = prepare_all<T>(val_set, result.norms);
  const double train_patches = static_cast<double>(train_set.size() * train_set.pre.seq_len);
  const double val_patches = static_cast<double>(val_set.size() * val_set.pre.seq_len);

  Adam adam({config.learning_rate, config.beta1, config.beta2, config.epsilon});
  std::mt19937_64 shuffle_rng(config.seed);
  std::vector<std::size_t> order(train_data.size());
  std::iota(order.begin(), order.end(), 0);

  result.best_val_loss = std::numeric_limits<double>::infinity();
  result.model = model;
  std::size_t stale = 0;
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<Example<T>> batch;
      batch.reserve(end - start);
      std::size_t batch_patches = 0;
      for (std::size_t i = start; i < end; ++i) {
        const auto& s = train_data[order[i]];
        batch.push_back({&s.input, &s.target, splitmix64(config.seed ^ splitmix64(epoch * 0x100000001ULL + order[i]))});
        batch_patches += s.target.rows();
      }
      auto grads = model.zero_gradients();
      const double loss = batch_gradients<T>(model, batch, grads, true, config.threads);
      if (!std::isfinite(loss))
        throw Error(ErrorKind::diverged, "training loss became non-finite in epoch " + std::to_string(epoch));
      const T scale = T(1.0 / static_cast<double>(batch_patches));
      for (auto& g : grads)
        for (auto& v : g.values()) v *= scale;
      adam.step(model.parameters(), grads);
      epoch_loss += loss;
    }
    EpochRecord record{epoch, epoch_loss / train_patches, summed_loss(model, val_data) / val_patches};
    if (!std::isfinite(record.train_loss) || !model.all_finite())
      throw Error(ErrorKind::diverged, "training diverged in epoch " + std::to_string(epoch));
    result.history.push_back(record);
    if (on_epoch) on_epoch(record);
    if (record.val_loss < result.best_val_loss) {
      result.best_val_loss = record.val_loss;
      result.best_epoch = epoch;
      result.model = model;
      stale = 0;
    } else if (++stale >= config.patience) {
      result.stopped_early = true;
      break;
    }
  }
  return result;
}

inline void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
  out << "epoch,train_loss,val_loss\n" << std::setprecision(17);
  for (const auto& r : history) out << r.epoch << ',' << r.train_loss << ',' << r.val_loss << '\n';
}

}  // namespace connloss::recon
