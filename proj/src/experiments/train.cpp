#include "afflow/experiments/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>

#include "afflow/autodiff/graph.hpp"
#include "afflow/autodiff/ops.hpp"
#include "afflow/errors.hpp"
#include "afflow/rng.hpp"

namespace afflow::experiments {

using ad::Tensor;

namespace {

// stream ids keep batch, decoder and evaluation draws apart
constexpr std::uint64_t kBatchStream = 0;
constexpr std::uint64_t kDecoderStream = 1ULL << 40;

std::uint64_t stream(std::uint64_t seed, std::uint64_t base, std::uint64_t index) {
  return mix_seed(seed, base + index);
}

Tensor pixels_of(const latent::AutoencoderConfig& cfg, const Tensor& rows) {
  return ad::reshape(rows, {rows.extent(0), cfg.image_h, cfg.image_w});
}

Tensor add_noise(const Tensor& x, double sigma, Rng& rng) {
  Tensor out = x.clone();
  if (sigma > 0.0)
    for (double& v : out.mutable_values()) v = v + sigma * rng.normal();
  return out;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<Tensor> param_tensors(std::vector<nn::NamedParam>& params, std::vector<bool>& decay) {
  std::vector<Tensor> t;
  decay.clear();
  for (auto& p : params) {
    t.push_back(p.tensor);
    decay.push_back(p.decay);
  }
  return t;
}

}  // namespace

void check_dataset(const RunConfig& run, const Dataset& data) {
  validate(data);
  if (run.latent.enabled) {
    const auto& ae = run.latent.autoencoder;
    if (data.positions != ae.image_h * ae.image_w || data.channels != 1)
      throw ShapeError("dataset rows are " + std::to_string(data.positions) + "x" +
                       std::to_string(data.channels) + ", latent run expects " +
                       std::to_string(ae.image_h * ae.image_w) + "x1 pixel images");
  } else if (data.positions != run.flow.positions() || data.channels != run.flow.channels) {
    throw ShapeError("dataset rows are " + std::to_string(data.positions) + "x" +
                     std::to_string(data.channels) + ", flow expects " +
                     std::to_string(run.flow.positions()) + "x" +
                     std::to_string(run.flow.channels));
  }
  if (run.flow.num_classes > 0) {
    if (!data.labeled) throw ConfigError("class-conditional run needs a labeled dataset");
    for (auto l : data.labels)
      if (l >= run.flow.num_classes)
        throw DomainError("dataset label " + std::to_string(l) + " out of range");
  }
}

Batch make_batch(const RunConfig& run, const Dataset& data, const latent::ToyAutoencoder* ae,
                 std::uint64_t step) {
  if (data.n == 0) throw ShapeError("cannot train on an empty dataset");
  Rng rng(stream(run.seed, kBatchStream, step));
  std::vector<std::size_t> rows(run.batch_size);
  for (auto& r : rows) r = rng.below(data.n);
  Batch b;
  Tensor x = gather_rows(data, rows);
  if (ae) x = latent::encode(*ae, pixels_of(ae->config, x));
  b.x = add_noise(x, run.noise_sigma, rng);
  if (run.flow.num_classes > 0) {
    for (std::size_t r : rows) {
      const bool drop = rng.uniform() < run.flow.cond_dropout;
      b.labels.push_back(drop ? run.flow.num_classes : data.labels[r]);
    }
  }
  return b;
}

Tensor flow_inputs(const RunConfig& run, const Dataset& data, const latent::ToyAutoencoder* ae,
                   std::size_t begin, std::size_t end, std::uint64_t seed) {
  Tensor x = rows_tensor(data, begin, end);
  if (ae) x = latent::encode(*ae, pixels_of(ae->config, x));
  Rng rng(seed);
  return add_noise(x, run.noise_sigma, rng);
}

Trainer::Trainer(const RunConfig& run, const Dataset& data) : run_(run), data_(data) {
  validate(run_);
  check_dataset(run_, data_);
  model_ = flow::init_flow(run_.flow, run_.seed);
  opt_.config = {run_.optim.lr, run_.optim.beta1, run_.optim.beta2, run_.optim.eps,
                 run_.optim.weight_decay};
  if (run_.latent.enabled) ae_ = latent::make_autoencoder(run_.latent.autoencoder, run_.seed);
}

Trainer::Trainer(const flow::Checkpoint& ckpt, const Dataset& data)
    : run_(run_from_checkpoint(ckpt)), data_(data) {
  check_dataset(run_, data_);
  model_ = flow::model_from_checkpoint(ckpt);
  opt_ = flow::optimizer_from_checkpoint(
      ckpt, model_,
      {run_.optim.lr, run_.optim.beta1, run_.optim.beta2, run_.optim.eps, run_.optim.weight_decay});
  step_ = ckpt.meta.value("step", std::uint64_t{0});
  decoder_done_ = ckpt.meta.value("decoder_finetuned", false);
  ae_ = autoencoder_from_checkpoint(ckpt);
  if (run_.latent.enabled && !ae_) throw FormatError("checkpoint: latent run without autoencoder");
}

StepMetrics Trainer::step() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::uint64_t t = step_ + 1;
  Batch b = make_batch(run_, data_, ae_ ? &*ae_ : nullptr, t);
  auto params = flow::named_params(model_);
  std::vector<bool> decay;
  std::vector<Tensor> tensors = param_tensors(params, decay);
  for (auto& p : tensors) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  StepMetrics m;
  m.step = t;
  {
    ad::Graph g;
    flow::StackResult r = flow::stack_nll(model_, b.x, b.labels);
    m.nll_nats_per_dim = ad::mean(r.nll_per_dim).item();
    if (!std::isfinite(r.loss.item()))
      throw NumericError("non-finite loss at step " + std::to_string(t));
    g.backward(r.loss);
  }
  m.grad_norm = ad::global_grad_norm(tensors);
  if (!std::isfinite(m.grad_norm))
    throw NumericError("non-finite gradient at step " + std::to_string(t));
  if (run_.optim.grad_clip > 0.0 && m.grad_norm > run_.optim.grad_clip) {
    const double f = run_.optim.grad_clip / m.grad_norm;
    for (auto& p : tensors)
      for (double& g : p.mutable_grad()) g *= f;
  }
  m.lr = ad::cosine_lr(step_, run_.total_steps(), run_.optim.lr, run_.optim.lr_min);
  ad::adamw_step(tensors, decay, opt_, m.lr);
  // parameters and moments live on the f32 grid so checkpoints are exact
  flow::snap_params_to_f32(model_);
  for (auto& v : opt_.m) flow::snap_to_f32(v);
  for (auto& v : opt_.v) flow::snap_to_f32(v);
  m.bits_per_dim = m.nll_nats_per_dim / std::numbers::ln2;
  step_ = t;
  m.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return m;
}

std::vector<double> Trainer::finetune_decoder() {
  std::vector<double> mse;
  if (!ae_ || decoder_done_) return mse;
  ad::OptimState opt;
  opt.config = {run_.latent.decoder_lr, 0.9, 0.999, 1e-8, 0.0};
  const auto& cfg = ae_->config;
  for (std::size_t s = 1; s <= run_.latent.decoder_steps; ++s) {
    Rng rng(stream(run_.seed, kDecoderStream, s));
    std::vector<std::size_t> rows(run_.latent.decoder_batch);
    for (auto& r : rows) r = rng.below(data_.n);
    Tensor images = pixels_of(cfg, gather_rows(data_, rows));
    mse.push_back(latent::decoder_finetune_step(*ae_, opt, images, run_.noise_sigma,
                                                stream(run_.seed, kDecoderStream + (1ULL << 39), s),
                                                run_.latent.decoder_lr));
    for (auto& p : latent::decoder_params(*ae_)) flow::snap_to_f32(p.tensor.mutable_values());
  }
  decoder_done_ = true;
  return mse;
}

flow::Checkpoint Trainer::checkpoint() {
  flow::Checkpoint c = flow::flow_checkpoint(model_, &opt_);
  c.meta["run"] = to_json(run_);
  c.meta["step"] = step_;
  c.meta["decoder_finetuned"] = decoder_done_;
  if (ae_)
    for (auto& p : latent::named_params(*ae_)) c.records.push_back({p.name, p.tensor});
  return c;
}

std::optional<latent::ToyAutoencoder> autoencoder_from_checkpoint(const flow::Checkpoint& ckpt) {
  if (!ckpt.find("enc.w")) return std::nullopt;
  const RunConfig run = run_from_checkpoint(ckpt);
  latent::ToyAutoencoder ae = latent::make_autoencoder(run.latent.autoencoder, run.seed);
  for (auto& p : latent::named_params(ae)) {
    const Tensor& src = ckpt.require(p.name);
    if (src.shape() != p.tensor.shape())
      throw FormatError("checkpoint: '" + p.name + "' has the wrong shape");
    std::copy(src.values().begin(), src.values().end(), p.tensor.mutable_values().begin());
  }
  return ae;
}

RunConfig run_from_checkpoint(const flow::Checkpoint& ckpt) {
  if (!ckpt.meta.contains("run")) {
    RunConfig r;
    r.flow = flow::flow_config_from_json(ckpt.meta.at("flow"));
    r.noise_sigma = 0.0;
    return r;
  }
  return run_config_from_json(ckpt.meta.at("run"));
}

void train_to_dir(const RunConfig& run, const Dataset& data, const TrainOptions& options) {
  namespace fs = std::filesystem;
  const fs::path dir = options.out_dir.empty() ? fs::path(run.out_dir) : fs::path(options.out_dir);
  fs::create_directories(dir);
  const fs::path ckpt_path = dir / "checkpoint.afck";
  std::optional<Trainer> trainer;
  if (options.resume) {
    trainer.emplace(flow::read_checkpoint(*options.resume), data);
  } else {
    trainer.emplace(run, data);
    std::ofstream(dir / "config.json") << to_json(run).dump(2) << "\n";
  }
  // fresh runs start new logs; resumed runs append
  const bool fresh = !options.resume;
  const auto mode = fresh ? std::ios::trunc : std::ios::app;
  std::ofstream metrics(dir / "metrics.csv", std::ios::out | mode);
  std::ofstream timing(dir / "timing.csv", std::ios::out | mode);
  if (!metrics || !timing) throw ConfigError("cannot write logs in '" + dir.string() + "'");
  if (fresh) {
    metrics << "step,nll_nats_per_dim,bits_per_dim,lr,grad_norm\n";
    timing << "step,wall_ms\n";
  }
  const RunConfig& r = trainer->run();
  std::uint64_t budget = options.max_steps.value_or(~std::uint64_t{0});
  while (!trainer->finished() && budget-- > 0) {
    const StepMetrics m = trainer->step();
    metrics << m.step << ',' << fmt(m.nll_nats_per_dim) << ',' << fmt(m.bits_per_dim) << ','
            << fmt(m.lr) << ',' << fmt(m.grad_norm) << '\n';
    timing << m.step << ',' << fmt(m.wall_ms) << '\n';
    if (options.verbose && (m.step % 50 == 0 || m.step == 1))
      std::cerr << "step " << m.step << "/" << r.total_steps() << " nll/dim "
                << m.nll_nats_per_dim << " bits/dim " << m.bits_per_dim << "\n";
    if (r.checkpoint_every && m.step % r.checkpoint_every == 0) {
      metrics.flush();
      flow::write_checkpoint(ckpt_path.string(), trainer->checkpoint());
    }
  }
  if (trainer->finished() && trainer->autoencoder() && !trainer->decoder_finetuned()) {
    const auto mse = trainer->finetune_decoder();
    std::ofstream dec(dir / "decoder.csv");
    dec << "step,mse\n";
    for (std::size_t i = 0; i < mse.size(); ++i) dec << i + 1 << ',' << fmt(mse[i]) << '\n';
  }
  flow::write_checkpoint(ckpt_path.string(), trainer->checkpoint());
}

}  // namespace afflow::experiments
