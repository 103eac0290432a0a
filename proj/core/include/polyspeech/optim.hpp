#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "polyspeech/autograd.hpp"

namespace polyspeech {

struct AdamConfig {
  double peak_lr = 1e-3;
  std::int64_t warmup_steps = 100;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam moments keyed by parameter name, plus the step counter that drives
/// the warmup schedule.
struct AdamState {
  AdamConfig config;
  std::int64_t step_count = 0;
  std::map<std::string, Tensor> first_moment;
  std::map<std::string, Tensor> second_moment;

  explicit AdamState(AdamConfig cfg = {});
};

/// Linear warmup to peak_lr at t = warmup_steps, then inverse-square-root decay.
double warmup_lr(const AdamConfig& cfg, std::int64_t t);

/// One bias-corrected Adam step at t = step_count + 1. Parameters absent from
/// `grads` (frozen, or not on the graph) are left untouched, moments included. Throws
/// Error(kNumeric) naming the first parameter with a non-finite gradient.
/// Returns the learning rate used.
double adam_update(AdamState& state, ParameterSet& params, const Gradients& grads);

/// Element-wise sum of `src` into `dst` (dst entries are created on demand).
void accumulate_gradients(Gradients& dst, const Gradients& src, double weight = 1.0);

/// Max over coordinates of |analytic − central difference| / max(1, |analytic|).
double finite_diff_gradcheck(const std::function<double(std::span<const double>)>& f,
                             std::span<const double> analytic, std::vector<double> params,
                             double h = 1e-5);

/// Same check over model parameters. `loss` builds the scalar loss on the given
/// graph; each listed parameter is perturbed in place and restored.
double finite_diff_gradcheck(const std::function<Var(Graph&)>& loss, std::span<Parameter* const> params,
                             double h = 1e-5);

}  // namespace polyspeech
