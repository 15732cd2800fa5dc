#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "afflow/autodiff/tensor.hpp"

namespace afflow::ad {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

struct OptimState {
  AdamWConfig config;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

// One decoupled-decay AdamW update of a single flat parameter. step is the
// 1-based count after increment.
void adamw_update(std::span<double> param, std::span<const double> grad, std::span<double> m,
                  std::span<double> v, const AdamWConfig& cfg, std::uint64_t step, double lr,
                  bool decay);

// Updates every tensor in params from its accumulated grad (missing grad is
// treated as zero). decay[i] enables weight decay for params[i]. Moments are
// allocated on first use. Uses lr instead of cfg.lr so schedules can drive it.
void adamw_step(std::span<Tensor> params, const std::vector<bool>& decay, OptimState& state,
                double lr);
inline void adamw_step(std::span<Tensor> params, const std::vector<bool>& decay,
                       OptimState& state) {
  adamw_step(params, decay, state, state.config.lr);
}

double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double lr_max = 1e-4,
                 double lr_min = 1e-6);

// sqrt of the sum of squared grads over all tensors.
double global_grad_norm(std::span<const Tensor> params);

}  // namespace afflow::ad
