#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "connloss/matrix.hpp"
#include "connloss/recon/model.hpp"

namespace connloss::recon {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias-corrected moment estimates. Moments are kept in double.
class Adam {
 public:
  explicit Adam(AdamConfig config) : config_(config) {}

  template <typename T>
  void step(std::vector<NamedTensor<T>>& params, const Gradients<T>& grads) {
    if (first_.empty()) {
      for (const auto& p : params) {
        first_.emplace_back(p.value.size(), 0.0);
        second_.emplace_back(p.value.size(), 0.0);
      }
    }
    ++steps_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto values = params[i].value.values();
      const auto g = grads[i].values();
      auto& m = first_[i];
      auto& v = second_[i];
      for (std::size_t j = 0; j < values.size(); ++j) {
        const double gj = g[j];
        m[j] = config_.beta1 * m[j] + (1 - config_.beta1) * gj;
        v[j] = config_.beta2 * v[j] + (1 - config_.beta2) * gj * gj;
        const double update = config_.learning_rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.epsilon);
        values[j] = static_cast<T>(values[j] - update);
      }
    }
  }

  std::size_t steps() const { return steps_; }

 private:
  AdamConfig config_;
  std::vector<std::vector<double>> first_, second_;
  std::size_t steps_ = 0;
};

}  // namespace connloss::recon
