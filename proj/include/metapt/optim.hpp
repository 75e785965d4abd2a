// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "metapt/autodiff.hpp"
#include "metapt/errors.hpp"

namespace metapt {

struct AdamWHyper {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Moment estimates for AdamW with decoupled weight decay.
template <typename Scalar>
struct AdamWState {
  AdamWHyper hyper;
  std::vector<ad::Mat<Scalar>> first_moment;
  std::vector<ad::Mat<Scalar>> second_moment;
  long step = 0;

  AdamWState() = default;
  explicit AdamWState(AdamWHyper h) : hyper(h) {}
};

/// One AdamW update of `params` in place. `lr` overrides the base rate (for
/// schedules); a negative value uses `state.hyper.lr`.
template <typename Scalar>
void adamw_step(std::span<ad::Mat<Scalar>* const> params, std::span<const ad::Mat<Scalar>> grads,
                AdamWState<Scalar>& state, double lr = -1.0) {
  if (params.size() != grads.size()) throw ShapeError("adamw_step: parameter/gradient count mismatch");
  if (state.first_moment.empty()) {
    for (const auto* p : params) {
      state.first_moment.push_back(ad::Mat<Scalar>::Zero(p->rows(), p->cols()));
      state.second_moment.push_back(ad::Mat<Scalar>::Zero(p->rows(), p->cols()));
    }
  }
  if (state.first_moment.size() != params.size()) throw ShapeError("adamw_step: state/parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->rows() != grads[i].rows() || params[i]->cols() != grads[i].cols() ||
        state.first_moment[i].rows() != grads[i].rows() || state.first_moment[i].cols() != grads[i].cols()) {
      throw ShapeError("adamw_step: shape mismatch for parameter " + std::to_string(i));
    }
  }
  const auto& h = state.hyper;
  const Scalar rate = static_cast<Scalar>(lr < 0 ? h.lr : lr);
  ++state.step;
  const Scalar bc1 = Scalar(1) - std::pow(static_cast<Scalar>(h.beta1), static_cast<Scalar>(state.step));
  const Scalar bc2 = Scalar(1) - std::pow(static_cast<Scalar>(h.beta2), static_cast<Scalar>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const auto& g = grads[i];
    p *= Scalar(1) - rate * static_cast<Scalar>(h.weight_decay);
    m = static_cast<Scalar>(h.beta1) * m + static_cast<Scalar>(1 - h.beta1) * g;
    v = static_cast<Scalar>(h.beta2) * v + static_cast<Scalar>(1 - h.beta2) * g.cwiseProduct(g);
    p.array() -= rate * (m.array() / bc1) / ((v.array() / bc2).sqrt() + static_cast<Scalar>(h.eps));
  }
}

enum class ScheduleMode { kLinearDecay, kConstant };

/// Linear warmup from 0 to `base_lr`, then linear decay to 0 at `max_steps`
/// (or a constant plateau in kConstant mode).
inline double lr_schedule(long step, long warmup, long max_steps, double base_lr,
                          ScheduleMode mode = ScheduleMode::kLinearDecay) {
  if (step < 0 || warmup < 0 || step > max_steps || warmup > max_steps) {
    throw ContractError("lr_schedule: require 0 <= step <= max_steps and warmup <= max_steps");
  }
  if (step < warmup) return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (mode == ScheduleMode::kConstant || max_steps == warmup) return base_lr;
  return base_lr * static_cast<double>(max_steps - step) / static_cast<double>(max_steps - warmup);
}

}  // namespace metapt
