#include "afflow/guidance/gaussian.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "afflow/errors.hpp"

namespace afflow::guidance {

const char* mode_name(GuidanceMode mode) {
  switch (mode) {
    case GuidanceMode::kProposed:
      return "proposed";
    case GuidanceMode::kLegacy:
      return "legacy";
    default:
      return "none";
  }
}

GuidanceMode parse_mode(const std::string& name) {
  if (name == "none") return GuidanceMode::kNone;
  if (name == "proposed") return GuidanceMode::kProposed;
  if (name == "legacy") return GuidanceMode::kLegacy;
  throw ConfigError("unknown guidance mode '" + name + "' (expected none, proposed or legacy)");
}

namespace {

void check_inputs(double sigma_c, double sigma_u, double omega) {
  if (!(sigma_c > 0.0) || !(sigma_u > 0.0))
    throw DomainError("guidance: sigmas must be positive");
  if (!(omega >= 0.0)) throw DomainError("guidance: omega must be nonnegative");
}

}  // namespace

double clipped_ratio(double sigma_c, double sigma_u) {
  const double s = (sigma_c * sigma_c) / (sigma_u * sigma_u);
  return std::clamp(s, 0.0, 1.0);
}

Gaussian guided_gaussian(double mu_c, double sigma_c, double mu_u, double sigma_u, double omega) {
  check_inputs(sigma_c, sigma_u, omega);
  const double s = clipped_ratio(sigma_c, sigma_u);
  const double ws = omega * s;
  const double denom = 1.0 + omega - ws;
  if (s == 1.0) return {mu_c + omega * (mu_c - mu_u), sigma_c};
  return {mu_c + ws / denom * (mu_c - mu_u), sigma_c / std::sqrt(denom)};
}

Gaussian legacy_linear_guidance(double mu_c, double sigma_c, double mu_u, double sigma_u,
                                double omega, GuidanceStats* stats) {
  check_inputs(sigma_c, sigma_u, omega);
  Gaussian g{mu_c + omega * (mu_c - mu_u), sigma_c + omega * (sigma_c - sigma_u)};
  if (stats) ++stats->steps;
  if (!(g.sigma >= kLegacySigmaFloor)) {
    g.sigma = kLegacySigmaFloor;
    if (stats) ++stats->floor_activations;
  }
  return g;
}

Gaussian apply_guidance(const GuidanceSpec& spec, double mu_c, double sigma_c, double mu_u,
                        double sigma_u, GuidanceStats* stats) {
  switch (spec.mode) {
    case GuidanceMode::kProposed:
      if (stats) ++stats->steps;
      return guided_gaussian(mu_c, sigma_c, mu_u, sigma_u, spec.omega);
    case GuidanceMode::kLegacy:
      return legacy_linear_guidance(mu_c, sigma_c, mu_u, sigma_u, spec.omega, stats);
    default:
      return {mu_c, sigma_c};
  }
}

}  // namespace afflow::guidance
