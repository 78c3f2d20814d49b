// SPDX-License-Identifier: Apache-2.0
#include "sure/nn/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace sure::nn {

namespace {

double evaluate(const LossBuilder& build) {
  Tape tape;
  return tape.value(build(tape))[0];
}

}  // namespace

GradCheckReport check_gradients(const LossBuilder& build, std::span<Parameter* const> params, double tolerance,
                                double step, double abs_floor) {
  GradCheckReport report;
  report.tolerance = tolerance;

  Tape tape;
  Var loss = build(tape);
  const Gradients grads = tape.backward(loss);

  for (Parameter* p : params) {
    GradCheckEntry entry;
    entry.name = p->name;
    entry.elements = p->value.size();
    const Tensor* analytic = grads.find(*p);
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + step;
      const double up = evaluate(build);
      p->value[i] = saved - step;
      const double down = evaluate(build);
      p->value[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic ? (*analytic)[i] : 0.0;
      const double denom = std::max({std::abs(a), std::abs(numeric), abs_floor});
      const double err = std::abs(a - numeric) / denom;
      if (i == 0 || err > entry.max_rel_error) {
        entry.max_rel_error = err;
        entry.worst_index = i;
        entry.analytic = a;
        entry.numeric = numeric;
      }
    }
    report.max_error = std::max(report.max_error, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  }
  report.passed = report.max_error <= tolerance;
  return report;
}

}  // namespace sure::nn
