#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

namespace afflow::flow {

struct FlowConfig {
  // Layer count per block in sampling order; entry 0 is the deep block.
  std::vector<std::size_t> layers{6, 2, 2};
  std::size_t width = 128;
  std::size_t head_dim = 64;
  std::size_t mlp_ratio = 4;
  std::size_t channels = 4;
  std::size_t grid_h = 8;
  std::size_t grid_w = 8;
  std::size_t patch_size = 1;
  std::size_t num_classes = 0;
  double soft_clip = 5.0;
  double sigma_floor = 1e-4;
  double norm_penalty = 1e-4;
  double cond_dropout = 0.1;
  bool condition_all_blocks = false;
  bool alternate_orderings = true;
  bool use_rope = true;
  std::array<double, 3> rope_split{0.375, 0.375, 0.25};
  double rope_alpha = 1.0;

  std::size_t num_blocks() const { return layers.size(); }
  std::size_t positions() const { return grid_h * grid_w; }
  std::size_t dims() const { return positions() * channels; }
  bool conditioned(std::size_t block) const {
    return num_classes > 0 && (block == 0 || condition_all_blocks);
  }
};

// Throws ConfigError on inconsistent settings.
void validate(const FlowConfig& cfg);

// "l(T)-d" -> layers [l, 2 x (T-1)], width d. Throws ConfigError.
void apply_shorthand(FlowConfig& cfg, const std::string& shorthand);
// Inverse of apply_shorthand; throws ConfigError when the layer list is not
// of the form [l, 2, 2, ...].
std::string shorthand(const FlowConfig& cfg);

nlohmann::json to_json(const FlowConfig& cfg);
// Unknown keys are errors.
FlowConfig flow_config_from_json(const nlohmann::json& j);

}  // namespace afflow::flow
