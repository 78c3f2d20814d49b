// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sure/nn/tape.hpp"

namespace sure::nn {

struct GradCheckEntry {
  std::string name;
  std::size_t elements = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;
  double max_error = 0.0;
  bool passed = false;
};

/// Builds a scalar loss on a fresh tape from the current parameter values.
/// Every call must construct the same graph (including any dropout masks).
using LossBuilder = std::function<Var(Tape&)>;

/// Compares reverse-mode gradients against central differences for every
/// element of every listed parameter. The relative error of one element is
/// |a - n| / max(|a|, |n|, abs_floor); the floor keeps near-zero entries
/// from reporting round-off as error.
GradCheckReport check_gradients(const LossBuilder& build, std::span<Parameter* const> params, double tolerance,
                                double step = 1e-5, double abs_floor = 1e-6);

}  // namespace sure::nn
