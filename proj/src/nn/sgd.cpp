// SPDX-License-Identifier: Apache-2.0
#include "sure/nn/sgd.hpp"

#include <cmath>

#include "sure/error.hpp"

namespace sure::nn {

void validate(const SgdConfig& config) {
  if (!(config.learning_rate > 0.0) || !std::isfinite(config.learning_rate)) {
    throw ConfigError("sgd: learning rate must be positive");
  }
  if (config.clip_norm && !(*config.clip_norm > 0.0)) throw ConfigError("sgd: clip_norm must be positive");
}

Sgd::Sgd(SgdConfig config) : config_(config) { validate(config_); }

bool Sgd::step(const Gradients& grads) {
  double norm_sq = 0.0;
  for (const auto& item : grads.items()) {
    if (item.param->frozen) continue;
    if (item.grad.shape() != item.param->value.shape()) {
      throw ShapeError("sgd: gradient shape does not match parameter '" + item.param->name + "'");
    }
    norm_sq += item.grad.squared_norm();
  }
  if (!std::isfinite(norm_sq)) {
    ++rejected_;
    return false;
  }
  double factor = config_.learning_rate;
  if (config_.clip_norm) {
    const double norm = std::sqrt(norm_sq);
    if (norm > *config_.clip_norm) factor *= *config_.clip_norm / norm;
  }
  for (const auto& item : grads.items()) {
    Parameter& p = *item.param;
    if (p.frozen) continue;
    double* w = p.value.data();
    const double* g = item.grad.data();
    for (std::size_t i = 0; i < p.value.size(); ++i) w[i] -= factor * g[i];
    p.touch();
  }
  return true;
}

}  // namespace sure::nn
