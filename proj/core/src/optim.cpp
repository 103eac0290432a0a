#include "polyspeech/optim.hpp"

#include <algorithm>
#include <cmath>

#include "polyspeech/error.hpp"

namespace polyspeech {

AdamState::AdamState(AdamConfig cfg) : config(cfg) {
  require(cfg.peak_lr > 0.0, "Adam: peak_lr must be > 0");
  require(cfg.warmup_steps > 0, "Adam: warmup_steps must be > 0");
}

double warmup_lr(const AdamConfig& cfg, std::int64_t t) {
  require(t >= 1, "warmup_lr: step must be >= 1");
  const double ratio = static_cast<double>(t) / static_cast<double>(cfg.warmup_steps);
  return cfg.peak_lr * std::min(ratio, std::sqrt(1.0 / ratio));
}

double adam_update(AdamState& state, ParameterSet& params, const Gradients& grads) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [param, grad] : grads) {
    require(params.contains(param->name) && &params.get(param->name) == param,
            "adam_update: gradient for foreign parameter '" + param->name + "'");
    if (!grad.all_finite()) {
      throw Error(ErrorKind::kNumeric, "non-finite gradient for parameter '" + param->name + "'");
    }
    by_name.emplace(param->name, &grad);
  }

  const AdamConfig& cfg = state.config;
  const std::int64_t t = ++state.step_count;
  const double lr = warmup_lr(cfg, t);
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));

  for (auto& [name, p] : params) {
    auto [mit, m_new] = state.first_moment.try_emplace(name, Tensor::zeros_like(p.value));
    auto [vit, v_new] = state.second_moment.try_emplace(name, Tensor::zeros_like(p.value));
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    require(m.same_shape(p.value) && v.same_shape(p.value), "adam_update: moment shape mismatch for '" + name + "'");
    (void)m_new;
    (void)v_new;
    auto git = by_name.find(name);
    if (git == by_name.end()) continue;
    const Tensor& g = *git->second;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double gi = g[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p.value[i] -= lr * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
  }
  return lr;
}

void accumulate_gradients(Gradients& dst, const Gradients& src, double weight) {
  for (const auto& [param, g] : src) {
    auto [it, inserted] = dst.try_emplace(param, Tensor::zeros_like(g));
    Tensor& d = it->second;
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += weight * g[i];
  }
}

double finite_diff_gradcheck(const std::function<double(std::span<const double>)>& f,
                             std::span<const double> analytic, std::vector<double> params, double h) {
  require(analytic.size() == params.size(), "gradcheck: gradient/parameter length mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + h;
    const double up = f(params);
    params[i] = saved - h;
    const double down = f(params);
    params[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

double finite_diff_gradcheck(const std::function<Var(Graph&)>& loss, std::span<Parameter* const> params,
                             double h) {
  Graph graph;
  Var l = loss(graph);
  graph.backward(l);
  const Gradients grads = graph.gradients();

  auto evaluate = [&]() {
    Graph g(false);
    return loss(g)->val()[0];
  };

  double worst = 0.0;
  for (Parameter* p : params) {
    auto it = grads.find(p);
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double analytic = it == grads.end() ? 0.0 : it->second[i];
      const double saved = p->value[i];
      p->value[i] = saved + h;
      const double up = evaluate();
      p->value[i] = saved - h;
      const double down = evaluate();
      p->value[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      worst = std::max(worst, std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic)));
    }
  }
  return worst;
}

}  // namespace polyspeech
