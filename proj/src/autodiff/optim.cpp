#include "afflow/autodiff/optim.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "afflow/errors.hpp"

namespace afflow::ad {

void adamw_update(std::span<double> param, std::span<const double> grad, std::span<double> m,
                  std::span<double> v, const AdamWConfig& cfg, std::uint64_t step, double lr,
                  bool decay) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size())
    throw ShapeError("adamw: param/grad/moment sizes differ");
  if (step == 0) throw DomainError("adamw: step must be >= 1");
  if (!std::isfinite(lr) || !std::isfinite(cfg.beta1) || !std::isfinite(cfg.beta2) ||
      !std::isfinite(cfg.eps) || !std::isfinite(cfg.weight_decay))
    throw DomainError("adamw: non-finite hyperparameter");
  const double t = static_cast<double>(step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  const double shrink = decay ? 1.0 - lr * cfg.weight_decay : 1.0;
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    param[i] = param[i] * shrink - lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

void adamw_step(std::span<Tensor> params, const std::vector<bool>& decay, OptimState& state,
                double lr) {
  if (decay.size() != params.size()) throw ShapeError("adamw: decay mask size mismatch");
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].size(), 0.0);
      state.v[i].assign(params[i].size(), 0.0);
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw ShapeError("adamw: optimizer state holds " + std::to_string(state.m.size()) +
                     " moments for " + std::to_string(params.size()) + " parameters");
  ++state.step;
  std::vector<double> zeros;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    std::span<const double> g;
    if (p.has_grad()) {
      g = p.grad();
    } else {
      zeros.assign(p.size(), 0.0);
      g = zeros;
    }
    adamw_update(p.mutable_values(), g, state.m[i], state.v[i], state.config, state.step, lr,
                 decay[i]);
  }
}

double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double lr_max, double lr_min) {
  if (total_steps == 0) throw DomainError("cosine_lr: total_steps must be positive");
  if (step > total_steps)
    throw DomainError("cosine_lr: step " + std::to_string(step) + " beyond total " +
                      std::to_string(total_steps));
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

double global_grad_norm(std::span<const Tensor> params) {
  double acc = 0.0;
  for (const auto& p : params)
    if (p.has_grad())
      for (double g : p.grad()) acc += g * g;
  return std::sqrt(acc);
}

}  // namespace afflow::ad
