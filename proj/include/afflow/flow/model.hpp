#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "afflow/autodiff/tensor.hpp"
#include "afflow/flow/config.hpp"
#include "afflow/guidance/gaussian.hpp"
#include "afflow/nn/backbone.hpp"

namespace afflow::flow {

using ad::Tensor;

struct AfBlock {
  nn::BackboneConfig backbone_config;
  nn::BackboneParams backbone;
  Tensor sos;        // [C]
  Tensor out_w;      // [d, 2C]; columns [0, C) are mu, [C, 2C) are sigma
  Tensor out_b;      // [2C]
  Tensor class_emb;  // [classes + 1, d]; last row is the null condition
  std::vector<std::size_t> order;    // sequence index -> data position
  std::vector<std::size_t> inverse;  // data position -> sequence index
  nn::RopeTable rope;                // prefix rows (if conditioned) then sequence rows

  bool conditioned() const { return class_emb.defined(); }
  std::size_t prefix_len() const { return conditioned() ? 1 : 0; }
};

// Blocks are kept in sampling order: blocks[0] is the deep block that sits
// next to the prior. The data-to-latent direction applies blocks[T-1] first.
struct FlowModel {
  FlowConfig config;
  std::vector<AfBlock> blocks;
};

enum class OutputInit {
  kIdentity,  // mu = 0, sigma = 1 at every position
  kZero,      // raw outputs 0: mu = 0, sigma = softplus(0) + floor
  kRandom,    // small random output projection (tests)
};

FlowModel init_flow(const FlowConfig& cfg, std::uint64_t seed,
                    OutputInit output_init = OutputInit::kIdentity);

// Names follow "blocks.<k>.<field>" in a fixed order.
std::vector<nn::NamedParam> named_params(FlowModel& model);
std::size_t parameter_count(const FlowModel& model);

// Rounds every parameter to the nearest 32-bit float.
void snap_to_f32(std::span<double> values);
void snap_params_to_f32(FlowModel& model);

// Per-position Gaussian parameters [B, D, C] in data order.
struct GaussianParams {
  Tensor mu;
  Tensor sigma;
};

// Labels are per batch row; an empty span selects the null condition.
// Throws ConfigError when labels are given to an unconditioned block.
GaussianParams af_params(const FlowModel& model, std::size_t block, const Tensor& x,
                         std::span<const std::size_t> labels = {});

struct AfForward {
  Tensor z;       // [B, D, C]
  Tensor logdet;  // [B], -sum log sigma
};

AfForward af_forward(const FlowModel& model, std::size_t block, const Tensor& x,
                     std::span<const std::size_t> labels = {});

// Sequential inverse with a key/value cache. With guidance enabled for this
// block the conditional and null-condition branches run side by side and
// each step samples from the combined Gaussian. Not differentiable.
Tensor af_inverse(const FlowModel& model, std::size_t block, const Tensor& z,
                  std::span<const std::size_t> labels = {},
                  const guidance::GuidanceSpec* spec = nullptr,
                  guidance::GuidanceStats* stats = nullptr);

struct StackResult {
  Tensor loss;                // scalar: mean nll/dim + norm penalty
  Tensor nll_per_dim;         // [B] nats per dimension
  Tensor z;                   // [B, D, C]
  std::vector<Tensor> latents;  // intermediate x^1 .. x^(T-1)
};

StackResult stack_nll(const FlowModel& model, const Tensor& x,
                      std::span<const std::size_t> labels = {});

// Full data-to-prior map and its log-det per sample.
AfForward stack_forward(const FlowModel& model, const Tensor& x,
                        std::span<const std::size_t> labels = {});

// block_ms, if given, receives wall time per block in sampling order.
Tensor stack_inverse(const FlowModel& model, const Tensor& z,
                     std::span<const std::size_t> labels = {},
                     const guidance::GuidanceSpec* spec = nullptr,
                     guidance::GuidanceStats* stats = nullptr,
                     std::vector<double>* block_ms = nullptr);

Tensor stack_sample(const FlowModel& model, std::size_t n, std::uint64_t seed,
                    std::span<const std::size_t> labels = {},
                    const guidance::GuidanceSpec* spec = nullptr,
                    guidance::GuidanceStats* stats = nullptr,
                    std::vector<double>* block_ms = nullptr);

// Exact log-likelihood (nats, summed over dimensions) per row of x.
std::vector<double> log_prob(const FlowModel& model, const Tensor& x,
                             std::span<const std::size_t> labels = {});

}  // namespace afflow::flow
