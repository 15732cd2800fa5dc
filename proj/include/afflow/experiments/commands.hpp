#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "afflow/experiments/dataset.hpp"
#include "afflow/guidance/gaussian.hpp"

namespace afflow::experiments {

// Tunes glibc malloc to keep freed blocks (large tensors otherwise cost a
// page-fault storm per op). No-op elsewhere.
void configure_allocator();

// P5, maxval 255; pixels in [-1, 1] map to [0, 255] with clamping.
std::string encode_pgm(const float* pixels, std::size_t height, std::size_t width);
void write_pgm(const std::string& path, const float* pixels, std::size_t height, std::size_t width);

struct SampleArgs {
  std::string ckpt;
  std::size_t n = 16;
  std::optional<std::size_t> label;
  double omega = 0.0;
  guidance::GuidanceMode mode = guidance::GuidanceMode::kNone;
  std::uint64_t seed = 0;
  std::string out_dir = ".";
  bool pgm = true;
};

// Writes samples.afds (flow space) and, for latent checkpoints, decoded
// sample_NNNNN.pgm images. Guidance applies to the deep block only.
Dataset cmd_sample(const SampleArgs& args);

struct NllArgs {
  std::string ckpt;
  std::string data;
  std::uint64_t seed = 0;
  std::size_t batch = 64;
};

struct NllReport {
  std::size_t n = 0;
  double nats_per_dim = 0.0;
  double bits_per_dim = 0.0;
};

// Mean exact nll of the (noised, encoded) dataset under the checkpoint.
NllReport cmd_nll(const NllArgs& args);
NllReport evaluate_nll(const std::string& ckpt_path, const Dataset& data, std::uint64_t seed,
                       std::size_t batch = 64);

struct InpaintArgs {
  std::string ckpt;
  std::string data;
  std::size_t index = 0;  // dataset row to inpaint
  std::string mask = "right-half";
  std::size_t chains = 4;
  std::size_t iters = 20;
  double init_sigma = 1.0;
  double prop_sigma = 1.0;
  std::uint64_t seed = 0;
  std::string out_dir = ".";
};

// Mask over flow positions (all channels):
//   none | all | left-half | right-half | top-half | bottom-half |
//   rect:x0,y0,x1,y1 (half-open grid coordinates) | pos:i,j,...
std::vector<uint8_t> parse_mask(const std::string& spec, std::size_t grid_h, std::size_t grid_w,
                                std::size_t channels);

// Writes inpaint.afds, trace.csv and (latent checkpoints) PGMs. Returns
// the per-chain acceptance rates.
std::vector<double> cmd_inpaint(const InpaintArgs& args);

struct GenDataArgs {
  std::string kind = "canonical";  // canonical | correlated | bars | checker | gaussians
  std::size_t n = 10000;
  std::size_t classes = 2;
  std::size_t size = 8;
  std::size_t patch = 1;
  double rho = 0.8;
  std::uint64_t seed = 0;
  std::string out = "data.afds";
};

Dataset cmd_gen_data(const GenDataArgs& args);

}  // namespace afflow::experiments
