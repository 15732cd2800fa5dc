#include "afflow/experiments/run_config.hpp"

#include <fstream>
#include <set>

#include "afflow/errors.hpp"

namespace afflow::experiments {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void validate(const RunConfig& c) {
  flow::validate(c.flow);
  if (c.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(c.noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be nonnegative");
  if (!(c.guidance_omega >= 0.0)) throw ConfigError("guidance omega must be nonnegative");
  if (!(c.optim.lr > 0.0) || !(c.optim.lr_min >= 0.0))
    throw ConfigError("optimizer: lr must be positive");
  if (!(c.optim.grad_clip >= 0.0)) throw ConfigError("optimizer: grad_clip must be >= 0");
  if (c.latent.enabled) {
    latent::validate(c.latent.autoencoder);
    const auto& ae = c.latent.autoencoder;
    if (ae.positions() != c.flow.positions() || ae.channels != c.flow.channels)
      throw ConfigError("latent: autoencoder produces " + std::to_string(ae.positions()) + "x" +
                        std::to_string(ae.channels) + " latents, flow expects " +
                        std::to_string(c.flow.positions()) + "x" +
                        std::to_string(c.flow.channels));
  }
}

json to_json(const RunConfig& c) {
  const auto& ae = c.latent.autoencoder;
  return {{"flow", flow::to_json(c.flow)},
          {"optimizer",
           {{"lr", c.optim.lr},
            {"lr_min", c.optim.lr_min},
            {"beta1", c.optim.beta1},
            {"beta2", c.optim.beta2},
            {"eps", c.optim.eps},
            {"weight_decay", c.optim.weight_decay},
            {"grad_clip", c.optim.grad_clip}}},
          {"latent",
           {{"enabled", c.latent.enabled},
            {"image_h", ae.image_h},
            {"image_w", ae.image_w},
            {"patch", ae.patch},
            {"hidden", ae.hidden},
            {"decoder_steps", c.latent.decoder_steps},
            {"decoder_batch", c.latent.decoder_batch},
            {"decoder_lr", c.latent.decoder_lr}}},
          {"batch_size", c.batch_size},
          {"total_images", c.total_images},
          {"seed", c.seed},
          {"noise_sigma", c.noise_sigma},
          {"guidance", {{"omega", c.guidance_omega}, {"mode", guidance::mode_name(c.guidance_mode)}}},
          {"out_dir", c.out_dir},
          {"checkpoint_every", c.checkpoint_every}};
}

RunConfig run_config_from_json(const json& j) {
  check_keys(j,
             {"arch", "flow", "optimizer", "latent", "batch_size", "total_images", "seed",
              "noise_sigma", "guidance", "out_dir", "checkpoint_every"},
             "run config");
  RunConfig c;
  try {
    if (j.contains("flow")) c.flow = flow::flow_config_from_json(j.at("flow"));
    if (j.contains("arch")) flow::apply_shorthand(c.flow, j.at("arch").get<std::string>());
    if (j.contains("optimizer")) {
      const json& o = j.at("optimizer");
      check_keys(o, {"lr", "lr_min", "beta1", "beta2", "eps", "weight_decay", "grad_clip"},
                 "optimizer");
      read(o, "lr", c.optim.lr);
      read(o, "lr_min", c.optim.lr_min);
      read(o, "beta1", c.optim.beta1);
      read(o, "beta2", c.optim.beta2);
      read(o, "eps", c.optim.eps);
      read(o, "weight_decay", c.optim.weight_decay);
      read(o, "grad_clip", c.optim.grad_clip);
    }
    if (j.contains("latent")) {
      const json& l = j.at("latent");
      check_keys(l,
                 {"enabled", "image_h", "image_w", "patch", "hidden", "decoder_steps",
                  "decoder_batch", "decoder_lr"},
                 "latent");
      read(l, "enabled", c.latent.enabled);
      read(l, "image_h", c.latent.autoencoder.image_h);
      read(l, "image_w", c.latent.autoencoder.image_w);
      read(l, "patch", c.latent.autoencoder.patch);
      read(l, "hidden", c.latent.autoencoder.hidden);
      read(l, "decoder_steps", c.latent.decoder_steps);
      read(l, "decoder_batch", c.latent.decoder_batch);
      read(l, "decoder_lr", c.latent.decoder_lr);
    }
    c.latent.autoencoder.channels = c.flow.channels;
    read(j, "batch_size", c.batch_size);
    read(j, "total_images", c.total_images);
    read(j, "seed", c.seed);
    read(j, "noise_sigma", c.noise_sigma);
    if (j.contains("guidance")) {
      const json& g = j.at("guidance");
      check_keys(g, {"omega", "mode"}, "guidance");
      read(g, "omega", c.guidance_omega);
      if (g.contains("mode")) c.guidance_mode = guidance::parse_mode(g.at("mode").get<std::string>());
    }
    read(j, "out_dir", c.out_dir);
    read(j, "checkpoint_every", c.checkpoint_every);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  validate(c);
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace afflow::experiments
