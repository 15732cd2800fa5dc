#include "afflow/flow/config.hpp"

#include <regex>
#include <set>

#include "afflow/errors.hpp"

namespace afflow::flow {

void validate(const FlowConfig& cfg) {
  if (cfg.layers.empty()) throw ConfigError("flow: at least one block is required");
  for (std::size_t i = 1; i < cfg.layers.size(); ++i)
    if (cfg.layers[i] > cfg.layers[0])
      throw ConfigError("flow: block 0 must be the deepest block");
  if (cfg.width == 0 || cfg.head_dim == 0 || cfg.width % cfg.head_dim != 0)
    throw ConfigError("flow: width must be a positive multiple of head_dim");
  if (cfg.channels == 0 || cfg.positions() == 0)
    throw ConfigError("flow: channels and grid must be nonempty");
  if (!(cfg.soft_clip > 0.0)) throw ConfigError("flow: soft_clip must be positive");
  if (!(cfg.sigma_floor > 0.0)) throw ConfigError("flow: sigma_floor must be positive");
  if (!(cfg.norm_penalty >= 0.0)) throw ConfigError("flow: norm_penalty must be nonnegative");
  if (!(cfg.cond_dropout >= 0.0 && cfg.cond_dropout <= 1.0))
    throw ConfigError("flow: cond_dropout must lie in [0, 1]");
  if (!(cfg.rope_alpha > 0.0)) throw ConfigError("flow: rope_alpha must be positive");
  if (cfg.patch_size == 0) throw ConfigError("flow: patch_size must be positive");
}

void apply_shorthand(FlowConfig& cfg, const std::string& text) {
  static const std::regex re(R"(^\s*(\d+)\((\d+)\)-(\d+)\s*$)");
  std::smatch m;
  if (!std::regex_match(text, m, re))
    throw ConfigError("architecture shorthand '" + text + "' is not of the form l(T)-d");
  const auto l = std::stoul(m[1]);
  const auto t = std::stoul(m[2]);
  const auto d = std::stoul(m[3]);
  if (t == 0 || l == 0 || d == 0) throw ConfigError("architecture shorthand: zero entry");
  if (l < 2 && t > 1) throw ConfigError("architecture shorthand: deep block shallower than 2");
  cfg.layers.assign(t, 2);
  cfg.layers[0] = l;
  cfg.width = d;
}

std::string shorthand(const FlowConfig& cfg) {
  if (cfg.layers.empty()) throw ConfigError("shorthand: no blocks");
  for (std::size_t i = 1; i < cfg.layers.size(); ++i)
    if (cfg.layers[i] != 2) throw ConfigError("shorthand: shallow blocks must have 2 layers");
  return std::to_string(cfg.layers[0]) + "(" + std::to_string(cfg.layers.size()) + ")-" +
         std::to_string(cfg.width);
}

nlohmann::json to_json(const FlowConfig& c) {
  return {{"layers", c.layers},
          {"width", c.width},
          {"head_dim", c.head_dim},
          {"mlp_ratio", c.mlp_ratio},
          {"channels", c.channels},
          {"grid_h", c.grid_h},
          {"grid_w", c.grid_w},
          {"patch_size", c.patch_size},
          {"num_classes", c.num_classes},
          {"soft_clip", c.soft_clip},
          {"sigma_floor", c.sigma_floor},
          {"norm_penalty", c.norm_penalty},
          {"cond_dropout", c.cond_dropout},
          {"condition_all_blocks", c.condition_all_blocks},
          {"alternate_orderings", c.alternate_orderings},
          {"use_rope", c.use_rope},
          {"rope_split", c.rope_split},
          {"rope_alpha", c.rope_alpha}};
}

FlowConfig flow_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("flow config must be an object");
  FlowConfig c;
  static const std::set<std::string> known{
      "layers",      "width",        "head_dim",     "mlp_ratio",      "channels",
      "grid_h",      "grid_w",       "patch_size",   "num_classes",    "soft_clip",
      "sigma_floor", "norm_penalty", "cond_dropout", "condition_all_blocks",
      "alternate_orderings", "use_rope", "rope_split", "rope_alpha", "arch"};
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw ConfigError("flow config: unknown key '" + key + "'");
  try {
    if (j.contains("arch")) apply_shorthand(c, j.at("arch").get<std::string>());
    if (j.contains("layers")) c.layers = j.at("layers").get<std::vector<std::size_t>>();
    if (j.contains("width")) c.width = j.at("width").get<std::size_t>();
    if (j.contains("head_dim")) c.head_dim = j.at("head_dim").get<std::size_t>();
    if (j.contains("mlp_ratio")) c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
    if (j.contains("channels")) c.channels = j.at("channels").get<std::size_t>();
    if (j.contains("grid_h")) c.grid_h = j.at("grid_h").get<std::size_t>();
    if (j.contains("grid_w")) c.grid_w = j.at("grid_w").get<std::size_t>();
    if (j.contains("patch_size")) c.patch_size = j.at("patch_size").get<std::size_t>();
    if (j.contains("num_classes")) c.num_classes = j.at("num_classes").get<std::size_t>();
    if (j.contains("soft_clip")) c.soft_clip = j.at("soft_clip").get<double>();
    if (j.contains("sigma_floor")) c.sigma_floor = j.at("sigma_floor").get<double>();
    if (j.contains("norm_penalty")) c.norm_penalty = j.at("norm_penalty").get<double>();
    if (j.contains("cond_dropout")) c.cond_dropout = j.at("cond_dropout").get<double>();
    if (j.contains("condition_all_blocks"))
      c.condition_all_blocks = j.at("condition_all_blocks").get<bool>();
    if (j.contains("alternate_orderings"))
      c.alternate_orderings = j.at("alternate_orderings").get<bool>();
    if (j.contains("use_rope")) c.use_rope = j.at("use_rope").get<bool>();
    if (j.contains("rope_split")) c.rope_split = j.at("rope_split").get<std::array<double, 3>>();
    if (j.contains("rope_alpha")) c.rope_alpha = j.at("rope_alpha").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("flow config: ") + e.what());
  }
  validate(c);
  return c;
}

}  // namespace afflow::flow
