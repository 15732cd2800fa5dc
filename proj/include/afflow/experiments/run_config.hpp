#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "afflow/flow/config.hpp"
#include "afflow/guidance/gaussian.hpp"
#include "afflow/latent/autoencoder.hpp"

namespace afflow::experiments {

struct OptimConfig {
  double lr = 1e-4;
  double lr_min = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  double grad_clip = 0.0;  // global-norm clip, 0 disables
};

struct LatentConfig {
  bool enabled = false;  // data are pixels encoded by the toy autoencoder
  latent::AutoencoderConfig autoencoder;
  std::size_t decoder_steps = 2000;
  std::size_t decoder_batch = 64;
  double decoder_lr = 1e-3;
};

struct RunConfig {
  flow::FlowConfig flow;
  OptimConfig optim;
  LatentConfig latent;
  std::size_t batch_size = 128;
  std::uint64_t total_images = 200000;
  std::uint64_t seed = 0;
  double noise_sigma = latent::kDefaultLatentNoise;  // Gaussian noise on the flow input
  double guidance_omega = 0.0;
  guidance::GuidanceMode guidance_mode = guidance::GuidanceMode::kNone;
  std::string out_dir = "run";
  std::size_t checkpoint_every = 500;

  std::uint64_t total_steps() const {
    return batch_size ? (total_images + batch_size - 1) / batch_size : 0;
  }
};

void validate(const RunConfig& cfg);

nlohmann::json to_json(const RunConfig& cfg);
// Unknown keys at any level are ConfigErrors. "arch" takes the l(T)-d form.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

}  // namespace afflow::experiments
