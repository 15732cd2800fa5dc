#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "afflow/autodiff/optim.hpp"
#include "afflow/autodiff/tensor.hpp"
#include "afflow/flow/model.hpp"
#include "afflow/nn/backbone.hpp"

namespace afflow::latent {

using ad::Tensor;

inline constexpr double kDefaultLatentNoise = 0.3;
inline constexpr double kDecoderScale = 0.1;

struct AutoencoderConfig {
  std::size_t image_h = 8;
  std::size_t image_w = 8;
  std::size_t patch = 1;
  std::size_t channels = 4;  // must be >= patch * patch
  std::size_t hidden = 32;   // decoder nonlinearity width

  std::size_t grid_h() const { return image_h / patch; }
  std::size_t grid_w() const { return image_w / patch; }
  std::size_t positions() const { return grid_h() * grid_w(); }
  std::size_t patch_dim() const { return patch * patch; }
};

void validate(const AutoencoderConfig& cfg);

// Frozen linear patchifier with orthonormal rows, and a per-patch decoder
//   out = z W + b + tanh(z W1 + b1) W2
// initialized to the exact inverse of the encoder (W = enc^T, W2 = 0).
struct ToyAutoencoder {
  AutoencoderConfig config;
  Tensor enc_w;   // [p*p, C]
  Tensor dec_w;   // [C, p*p]
  Tensor dec_b;   // [p*p]
  Tensor dec_w1;  // [C, hidden]
  Tensor dec_b1;  // [hidden]
  Tensor dec_w2;  // [hidden, p*p]
};

ToyAutoencoder make_autoencoder(const AutoencoderConfig& cfg, std::uint64_t seed);

// Records "enc.w" and "dec.*". Only the dec.* entries are trainable.
std::vector<nn::NamedParam> named_params(ToyAutoencoder& ae);
std::vector<nn::NamedParam> decoder_params(ToyAutoencoder& ae);

// images [N, H, W] <-> patches [N, D, p*p], row-major patch grid.
Tensor patchify(const AutoencoderConfig& cfg, const Tensor& images);
Tensor unpatchify(const AutoencoderConfig& cfg, const Tensor& patches);

Tensor encode(const ToyAutoencoder& ae, const Tensor& images);  // [N, D, C]
// E(x) + sigma * eps with eps drawn from Rng(seed).
Tensor encode_noisy(const ToyAutoencoder& ae, const Tensor& images, double sigma,
                    std::uint64_t seed);
Tensor decode(const ToyAutoencoder& ae, const Tensor& latents);  // [N, H, W]
// Decoder initial state: unpatchify(latents enc^T).
Tensor decode_identity(const ToyAutoencoder& ae, const Tensor& latents);

// Per-dimension terms; the encoder entropy is constant and dropped.
struct ElboTerms {
  Tensor flow_nll;   // stack_nll loss of the noisy latents (incl. norm penalty)
  Tensor recon_nll;  // mean Gaussian nll per pixel, scale kDecoderScale
  Tensor total;      // flow_nll + recon_nll
};

// Gaussian reconstruction nll per pixel with scale sigma_dec.
Tensor recon_nll(const Tensor& decoded, const Tensor& images, double sigma_dec = kDecoderScale);

ElboTerms elbo_objective(const flow::FlowModel& flow, const ToyAutoencoder& ae,
                         const Tensor& images, double sigma, std::uint64_t seed,
                         std::span<const std::size_t> labels = {});

double pixel_mse(const Tensor& a, const Tensor& b);

// One AdamW step on ||D(E(x) + sigma eps) - x||^2 over the decoder weights.
// Returns the pre-step batch MSE.
double decoder_finetune_step(ToyAutoencoder& ae, ad::OptimState& opt, const Tensor& images,
                             double sigma, std::uint64_t seed, double lr);

// x + sigma^2 grad log p(x) through the flow. Not differentiable itself.
Tensor score_denoise_single_step(const flow::FlowModel& flow, const Tensor& x_tilde,
                                 double sigma, std::span<const std::size_t> labels = {});

}  // namespace afflow::latent
