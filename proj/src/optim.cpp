#include "dipp/optim.hpp"

#include <cmath>
#include <numbers>

namespace dipp {

void adam_step(std::span<double> param, std::span<const double> grad, AdamState& state,
               const AdamHyper& hyper) {
  if (!(hyper.beta1 > 0 && hyper.beta1 < 1 && hyper.beta2 > 0 && hyper.beta2 < 1)) {
    throw ArgumentError("adam: betas must lie in (0,1)");
  }
  if (state.m.empty() && state.v.empty()) {
    state.m.assign(param.size(), 0.0);
    state.v.assign(param.size(), 0.0);
  }
  if (grad.size() != param.size() || state.m.size() != param.size() || state.v.size() != param.size()) {
    throw ShapeError("adam: parameter/gradient/state size mismatch");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(hyper.beta1, t);
  const double bc2 = 1.0 - std::pow(hyper.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    state.m[i] = hyper.beta1 * state.m[i] + (1 - hyper.beta1) * grad[i];
    state.v[i] = hyper.beta2 * state.v[i] + (1 - hyper.beta2) * grad[i] * grad[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    param[i] -= hyper.lr * (mhat / (std::sqrt(vhat) + hyper.eps) + hyper.weight_decay * param[i]);
  }
}

void Adam::step(std::map<std::string, Tensor>& params, const AdamHyper& hyper) {
  std::vector<double> zeros;
  for (auto& [name, p] : params) {
    auto& st = states_[name];
    if (p.has_grad()) {
      adam_step(p.data(), p.grad(), st, hyper);
    } else {
      zeros.assign(p.numel(), 0.0);
      adam_step(p.data(), zeros, st, hyper);
    }
  }
}

namespace {

double cos_interp(double from, double to, double frac) {
  return to + (from - to) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace

double OneCycle::lr(std::size_t step, std::size_t total) const {
  if (total == 0) return lr_max;
  const double x = static_cast<double>(step) / static_cast<double>(total);
  if (x < pct_up) return cos_interp(lr_max / div_factor, lr_max, x / pct_up);
  return cos_interp(lr_max, lr_max * final_ratio, std::min(1.0, (x - pct_up) / (1.0 - pct_up)));
}

double OneCycle::beta1(std::size_t step, std::size_t total) const {
  if (total == 0) return beta1_max;
  const double x = static_cast<double>(step) / static_cast<double>(total);
  if (x < pct_up) return cos_interp(beta1_max, beta1_min, x / pct_up);
  return cos_interp(beta1_min, beta1_max, std::min(1.0, (x - pct_up) / (1.0 - pct_up)));
}

}  // namespace dipp
