// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>

#include "sure/nn/tape.hpp"

namespace sure::nn {

struct SgdConfig {
  double learning_rate = 1e-3;
  std::optional<double> clip_norm;  // global L2 norm; off by default
};

void validate(const SgdConfig& config);

/// Plain SGD, theta <- theta - lr * g, with optional global-norm clipping.
class Sgd {
 public:
  explicit Sgd(SgdConfig config);

  /// Applies one step. A non-finite gradient rejects the whole step (no
  /// parameter moves) and bumps rejected_steps(). Frozen parameters are
  /// never modified. Returns whether the step was applied.
  bool step(const Gradients& grads);

  const SgdConfig& config() const noexcept { return config_; }
  std::size_t rejected_steps() const noexcept { return rejected_; }
  void set_rejected_steps(std::size_t n) noexcept { rejected_ = n; }

 private:
  SgdConfig config_;
  std::size_t rejected_ = 0;
};

}  // namespace sure::nn
