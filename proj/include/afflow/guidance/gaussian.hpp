#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace afflow::guidance {

enum class GuidanceMode { kNone, kProposed, kLegacy };

const char* mode_name(GuidanceMode mode);
// Accepts "none", "proposed", "legacy". Throws ConfigError otherwise.
GuidanceMode parse_mode(const std::string& name);

struct GuidanceSpec {
  double omega = 0.0;
  GuidanceMode mode = GuidanceMode::kNone;
  // Per-block switch in sampling order (index 0 = deep block). Empty means
  // every conditioned block is guided.
  std::vector<bool> blocks;

  bool active() const { return mode != GuidanceMode::kNone; }
  bool enabled_for(std::size_t block) const {
    return active() && (blocks.empty() || (block < blocks.size() && blocks[block]));
  }
};

struct Gaussian {
  double mu = 0.0;
  double sigma = 1.0;
};

struct GuidanceStats {
  std::uint64_t steps = 0;
  std::uint64_t floor_activations = 0;
};

inline constexpr double kLegacySigmaFloor = 1e-6;

// Variance ratio sigma_c^2 / sigma_u^2 clipped to [0, 1].
double clipped_ratio(double sigma_c, double sigma_u);

// Gaussian proportional to N(mu_c, sigma_c^2)^(1+omega) N(mu_u, sigma_u^2)^(-omega)
// with the variance ratio clipped to at most 1. DomainError on nonpositive
// sigmas or negative omega.
Gaussian guided_gaussian(double mu_c, double sigma_c, double mu_u, double sigma_u, double omega);

// Linear extrapolation of mean and scale. The scale is floored at
// kLegacySigmaFloor; each activation increments stats->floor_activations.
Gaussian legacy_linear_guidance(double mu_c, double sigma_c, double mu_u, double sigma_u,
                                double omega, GuidanceStats* stats = nullptr);

// Dispatches on spec.mode. kNone returns the conditional Gaussian.
Gaussian apply_guidance(const GuidanceSpec& spec, double mu_c, double sigma_c, double mu_u,
                        double sigma_u, GuidanceStats* stats = nullptr);

}  // namespace afflow::guidance
