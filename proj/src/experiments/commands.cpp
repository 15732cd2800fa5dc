#include "afflow/experiments/commands.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "afflow/autodiff/ops.hpp"
#include "afflow/errors.hpp"
#include "afflow/experiments/synthetic.hpp"
#include "afflow/experiments/train.hpp"
#include "afflow/flow/checkpoint.hpp"
#include "afflow/guidance/guided_inverse.hpp"
#include "afflow/inpaint/mh.hpp"
#include "afflow/rng.hpp"

namespace afflow::experiments {

namespace fs = std::filesystem;
using ad::Tensor;

void configure_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

std::string encode_pgm(const float* pixels, std::size_t height, std::size_t width) {
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  for (std::size_t i = 0; i < height * width; ++i) {
    const double v = std::round((static_cast<double>(pixels[i]) + 1.0) * 127.5);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::clamp(v, 0.0, 255.0))));
  }
  return out;
}

void write_pgm(const std::string& path, const float* pixels, std::size_t height,
               std::size_t width) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("cannot write '" + path + "'");
  const std::string b = encode_pgm(pixels, height, width);
  f.write(b.data(), static_cast<std::streamsize>(b.size()));
}

namespace {

std::string numbered(const std::string& stem, std::size_t i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%05zu%s", stem.c_str(), i, ext);
  return buf;
}

void write_decoded(const latent::ToyAutoencoder& ae, const Tensor& latents, const fs::path& dir,
                   const std::string& stem) {
  const Tensor img = latent::decode(ae, latents);
  const auto& c = ae.config;
  std::vector<float> px(img.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<float>(img.at(i));
  for (std::size_t i = 0; i < latents.extent(0); ++i)
    write_pgm((dir / numbered(stem, i, ".pgm")).string(), px.data() + i * c.image_h * c.image_w,
              c.image_h, c.image_w);
}

}  // namespace

Dataset cmd_sample(const SampleArgs& args) {
  if (!(args.omega >= 0.0)) throw DomainError("sample: omega must be nonnegative");
  const flow::Checkpoint ckpt = flow::read_checkpoint(args.ckpt);
  const flow::FlowModel model = flow::model_from_checkpoint(ckpt);
  const auto& cfg = model.config;
  std::vector<std::size_t> labels;
  if (args.label) {
    if (cfg.num_classes == 0) throw ConfigError("sample: model is not class-conditional");
    if (*args.label >= cfg.num_classes)
      throw DomainError("sample: class " + std::to_string(*args.label) + " out of range (" +
                        std::to_string(cfg.num_classes) + " classes)");
    labels.assign(args.n, *args.label);
  } else if (args.mode != guidance::GuidanceMode::kNone) {
    throw ConfigError("sample: guidance needs --class");
  }
  Tensor x;
  if (labels.empty()) {
    x = flow::stack_sample(model, args.n, args.seed);
  } else {
    const guidance::GuidanceSpec spec{args.omega, args.mode, {}};
    x = guidance::guided_sample(model, args.n, args.seed, labels, spec);
  }
  std::vector<std::uint32_t> out_labels(labels.begin(), labels.end());
  Dataset ds = from_tensor(x, out_labels);
  fs::create_directories(args.out_dir);
  save_dataset(ds, (fs::path(args.out_dir) / "samples.afds").string());
  if (args.pgm)
    if (auto ae = autoencoder_from_checkpoint(ckpt))
      write_decoded(*ae, x, args.out_dir, "sample");
  return ds;
}

NllReport evaluate_nll(const std::string& ckpt_path, const Dataset& data, std::uint64_t seed,
                       std::size_t batch) {
  const flow::Checkpoint ckpt = flow::read_checkpoint(ckpt_path);
  const RunConfig run = run_from_checkpoint(ckpt);
  const flow::FlowModel model = flow::model_from_checkpoint(ckpt);
  const auto ae = autoencoder_from_checkpoint(ckpt);
  RunConfig eval = run;
  eval.flow = model.config;
  eval.latent.enabled = ae.has_value();
  check_dataset(eval, data);
  if (batch == 0) batch = 64;
  double total = 0.0;
  for (std::size_t start = 0, chunk = 0; start < data.n; start += batch, ++chunk) {
    const std::size_t end = std::min(data.n, start + batch);
    Tensor x = flow_inputs(eval, data, ae ? &*ae : nullptr, start, end, mix_seed(seed, chunk));
    std::vector<std::size_t> labels;
    if (model.config.num_classes > 0) labels.assign(data.labels.begin() + start, data.labels.begin() + end);
    for (double lp : flow::log_prob(model, x, labels)) total += -lp;
  }
  NllReport r;
  r.n = data.n;
  r.nats_per_dim = data.n ? total / (static_cast<double>(data.n) * model.config.dims()) : 0.0;
  r.bits_per_dim = r.nats_per_dim / std::numbers::ln2;
  return r;
}

NllReport cmd_nll(const NllArgs& args) {
  return evaluate_nll(args.ckpt, load_dataset(args.data), args.seed, args.batch);
}

namespace {

std::vector<std::size_t> parse_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc() || p != item.data() + item.size())
      throw ConfigError("mask: '" + item + "' is not an index");
    out.push_back(v);
  }
  return out;
}

}  // namespace

std::vector<uint8_t> parse_mask(const std::string& spec, std::size_t grid_h, std::size_t grid_w,
                                std::size_t channels) {
  std::vector<uint8_t> pos(grid_h * grid_w, 0);
  auto rect = [&](std::size_t x0, std::size_t y0, std::size_t x1, std::size_t y1) {
    if (x0 > x1 || y0 > y1 || x1 > grid_w || y1 > grid_h)
      throw ConfigError("mask: rectangle outside the " + std::to_string(grid_h) + "x" +
                        std::to_string(grid_w) + " grid");
    for (std::size_t y = y0; y < y1; ++y)
      for (std::size_t x = x0; x < x1; ++x) pos[y * grid_w + x] = 1;
  };
  if (spec == "none") {
  } else if (spec == "all") {
    rect(0, 0, grid_w, grid_h);
  } else if (spec == "left-half") {
    rect(0, 0, grid_w / 2, grid_h);
  } else if (spec == "right-half") {
    rect(grid_w / 2, 0, grid_w, grid_h);
  } else if (spec == "top-half") {
    rect(0, 0, grid_w, grid_h / 2);
  } else if (spec == "bottom-half") {
    rect(0, grid_h / 2, grid_w, grid_h);
  } else if (spec.rfind("rect:", 0) == 0) {
    const auto v = parse_list(spec.substr(5));
    if (v.size() != 4) throw ConfigError("mask: rect needs x0,y0,x1,y1");
    rect(v[0], v[1], v[2], v[3]);
  } else if (spec.rfind("pos:", 0) == 0) {
    for (std::size_t p : parse_list(spec.substr(4))) {
      if (p >= pos.size()) throw ConfigError("mask: position " + std::to_string(p) + " out of range");
      pos[p] = 1;
    }
  } else {
    throw ConfigError("mask: unknown spec '" + spec + "'");
  }
  std::vector<uint8_t> mask;
  mask.reserve(pos.size() * channels);
  for (uint8_t p : pos) mask.insert(mask.end(), channels, p);
  return mask;
}

std::vector<double> cmd_inpaint(const InpaintArgs& args) {
  const flow::Checkpoint ckpt = flow::read_checkpoint(args.ckpt);
  const RunConfig run = run_from_checkpoint(ckpt);
  const flow::FlowModel model = flow::model_from_checkpoint(ckpt);
  const auto ae = autoencoder_from_checkpoint(ckpt);
  const Dataset data = load_dataset(args.data);
  RunConfig eval = run;
  eval.flow = model.config;
  eval.latent.enabled = ae.has_value();
  eval.noise_sigma = ae ? run.noise_sigma : 0.0;
  check_dataset(eval, data);
  if (args.index >= data.n) throw DomainError("inpaint: row index out of range");
  const auto& cfg = model.config;
  inpaint::InpaintTask task;
  task.x_obs = ad::reshape(flow_inputs(eval, data, ae ? &*ae : nullptr, args.index, args.index + 1,
                                       mix_seed(args.seed, 1ULL << 50)),
                           {cfg.positions(), cfg.channels});
  task.mask = parse_mask(args.mask, cfg.grid_h, cfg.grid_w, cfg.channels);
  task.init_sigma = args.init_sigma;
  task.prop_sigma = args.prop_sigma;
  task.iters = args.iters;
  std::optional<std::size_t> label;
  if (cfg.num_classes > 0) label = data.labels[args.index];
  const inpaint::FlowDensity density(model, label);
  const auto result = inpaint::inpaint(task, density, args.seed, args.chains);
  fs::create_directories(args.out_dir);
  const fs::path dir(args.out_dir);
  save_dataset(from_tensor(result.samples), (dir / "inpaint.afds").string());
  std::ofstream trace(dir / "trace.csv");
  inpaint::write_trace_csv(trace, result.trace);
  if (ae) {
    write_decoded(*ae, result.samples, dir, "inpaint");
    write_decoded(*ae, ad::reshape(task.x_obs, {1, cfg.positions(), cfg.channels}), dir,
                  "observed");
  }
  return result.acceptance;
}

Dataset cmd_gen_data(const GenDataArgs& args) {
  Dataset ds;
  if (args.kind == "canonical") {
    ds = gen_2d_mixture(canonical_target(), args.n, args.seed);
  } else if (args.kind == "correlated") {
    if (!(std::abs(args.rho) < 1.0)) throw DomainError("gen-data: |rho| must be below 1");
    ds = gen_2d_mixture({{1.0, {0.0, 0.0}, {1.0, args.rho, args.rho, 1.0}}}, args.n, args.seed);
  } else {
    ImageSpec spec;
    spec.kind = parse_image_kind(args.kind);
    spec.size = args.size;
    spec.patch = args.patch;
    spec.classes = args.classes;
    ds = gen_synthetic_images(spec, args.n, args.seed);
  }
  save_dataset(ds, args.out);
  return ds;
}

}  // namespace afflow::experiments
