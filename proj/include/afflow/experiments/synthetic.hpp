#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "afflow/experiments/dataset.hpp"

namespace afflow::experiments {

struct MixtureMode {
  double weight = 1.0;
  std::array<double, 2> mean{0.0, 0.0};
  std::array<double, 4> cov{1.0, 0.0, 0.0, 1.0};  // row-major 2x2
};

// Samples n points; D = 2 positions with C = 1. Weights must sum to 1 and
// covariances be symmetric positive definite (DomainError otherwise).
Dataset gen_2d_mixture(const std::vector<MixtureMode>& modes, std::size_t n, std::uint64_t seed);

// x1 ~ N(0, 1) independent of x2 ~ 0.5 N(-2, 0.1^2) + 0.5 N(2, 0.1^2).
std::vector<MixtureMode> canonical_target();

// Differential entropy per dimension of the canonical target (nats), by
// Simpson quadrature of the bimodal coordinate. Computed once.
double canonical_entropy_per_dim();

// Mixture density entropy of the second coordinate alone (nats).
double canonical_bimodal_entropy();

enum class ImageKind { kGaussians, kBars, kChecker };

ImageKind parse_image_kind(const std::string& name);  // ConfigError if unknown
const char* image_kind_name(ImageKind kind);

struct ImageSpec {
  ImageKind kind = ImageKind::kBars;
  std::size_t size = 8;
  std::size_t patch = 1;
  std::size_t classes = 2;
  double jitter = 0.05;  // pixel noise std
};

// Pixels in [-1, 1]; D = size * size positions, C = 1; label = i % classes.
//   bars: class 0 horizontal, class 1 vertical
//   checker: class c uses cell size 2^c
//   gaussians: class c puts a blob near grid cell c of a 2x2 (or larger) layout
Dataset gen_synthetic_images(const ImageSpec& spec, std::size_t n, std::uint64_t seed);

}  // namespace afflow::experiments
