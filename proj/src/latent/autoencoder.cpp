#include "afflow/latent/autoencoder.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "afflow/autodiff/graph.hpp"
#include "afflow/autodiff/ops.hpp"
#include "afflow/errors.hpp"
#include "afflow/rng.hpp"

namespace afflow::latent {

using namespace afflow::ad;

void validate(const AutoencoderConfig& cfg) {
  if (cfg.patch == 0 || cfg.channels == 0 || cfg.hidden == 0)
    throw ConfigError("autoencoder: patch, channels and hidden must be positive");
  if (cfg.image_h % cfg.patch != 0 || cfg.image_w % cfg.patch != 0)
    throw ShapeError("autoencoder: image " + std::to_string(cfg.image_h) + "x" +
                     std::to_string(cfg.image_w) + " not divisible by patch " +
                     std::to_string(cfg.patch));
  if (cfg.channels < cfg.patch_dim())
    throw ConfigError("autoencoder: channels must be at least patch*patch");
}

ToyAutoencoder make_autoencoder(const AutoencoderConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  const std::size_t pd = cfg.patch_dim();
  const std::size_t c = cfg.channels;
  Rng rng(seed, 0);
  // Gram-Schmidt on random rows gives pd orthonormal vectors in R^C
  std::vector<double> q(pd * c);
  for (std::size_t i = 0; i < pd; ++i) {
    for (;;) {
      double* row = q.data() + i * c;
      for (std::size_t j = 0; j < c; ++j) row[j] = rng.normal();
      for (int pass = 0; pass < 2; ++pass)
        for (std::size_t k = 0; k < i; ++k) {
          const double* prev = q.data() + k * c;
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += row[j] * prev[j];
          for (std::size_t j = 0; j < c; ++j) row[j] -= dot * prev[j];
        }
      double norm = 0.0;
      for (std::size_t j = 0; j < c; ++j) norm += row[j] * row[j];
      norm = std::sqrt(norm);
      if (norm < 1e-6) continue;
      for (std::size_t j = 0; j < c; ++j) row[j] /= norm;
      break;
    }
  }
  ToyAutoencoder ae;
  ae.config = cfg;
  ae.enc_w = Tensor({pd, c}, q);
  ae.dec_w = transpose(ae.enc_w, 0, 1).clone();
  ae.dec_b = Tensor({pd}, 0.0);
  Rng dec_rng(seed, 1);
  ae.dec_w1 = Tensor({c, cfg.hidden});
  for (double& v : ae.dec_w1.mutable_values())
    v = dec_rng.normal() / std::sqrt(static_cast<double>(c));
  ae.dec_b1 = Tensor({cfg.hidden}, 0.0);
  ae.dec_w2 = Tensor({cfg.hidden, pd}, 0.0);
  return ae;
}

std::vector<nn::NamedParam> decoder_params(ToyAutoencoder& ae) {
  return {{"dec.w", ae.dec_w, true},
          {"dec.b", ae.dec_b, false},
          {"dec.w1", ae.dec_w1, true},
          {"dec.b1", ae.dec_b1, false},
          {"dec.w2", ae.dec_w2, true}};
}

std::vector<nn::NamedParam> named_params(ToyAutoencoder& ae) {
  std::vector<nn::NamedParam> out{{"enc.w", ae.enc_w, false}};
  for (auto& p : decoder_params(ae)) out.push_back(p);
  return out;
}

namespace {

// flat pixel index for each (patch, offset) slot in patch-major order
std::vector<std::size_t> patch_gather(const AutoencoderConfig& cfg) {
  const std::size_t p = cfg.patch;
  std::vector<std::size_t> idx;
  idx.reserve(cfg.image_h * cfg.image_w);
  for (std::size_t gy = 0; gy < cfg.grid_h(); ++gy)
    for (std::size_t gx = 0; gx < cfg.grid_w(); ++gx)
      for (std::size_t dy = 0; dy < p; ++dy)
        for (std::size_t dx = 0; dx < p; ++dx)
          idx.push_back((gy * p + dy) * cfg.image_w + gx * p + dx);
  return idx;
}

void check_images(const AutoencoderConfig& cfg, const Tensor& images) {
  if (images.rank() != 3 || images.extent(1) != cfg.image_h || images.extent(2) != cfg.image_w)
    throw ShapeError("autoencoder: expected images [N, " + std::to_string(cfg.image_h) + ", " +
                     std::to_string(cfg.image_w) + "], got " + shape_string(images.shape()));
}

}  // namespace

Tensor patchify(const AutoencoderConfig& cfg, const Tensor& images) {
  validate(cfg);
  check_images(cfg, images);
  const std::size_t n = images.extent(0);
  const auto idx = patch_gather(cfg);
  Tensor flat = reshape(images, {n, cfg.image_h * cfg.image_w});
  return reshape(index_select(flat, 1, idx), {n, cfg.positions(), cfg.patch_dim()});
}

Tensor unpatchify(const AutoencoderConfig& cfg, const Tensor& patches) {
  validate(cfg);
  if (patches.rank() != 3 || patches.extent(1) != cfg.positions() ||
      patches.extent(2) != cfg.patch_dim())
    throw ShapeError("unpatchify: unexpected shape " + shape_string(patches.shape()));
  const std::size_t n = patches.extent(0);
  const auto gather = patch_gather(cfg);
  std::vector<std::size_t> inverse(gather.size());
  for (std::size_t i = 0; i < gather.size(); ++i) inverse[gather[i]] = i;
  Tensor flat = reshape(patches, {n, gather.size()});
  return reshape(index_select(flat, 1, inverse), {n, cfg.image_h, cfg.image_w});
}

Tensor encode(const ToyAutoencoder& ae, const Tensor& images) {
  return matmul(patchify(ae.config, images), ae.enc_w);
}

Tensor encode_noisy(const ToyAutoencoder& ae, const Tensor& images, double sigma,
                    std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw DomainError("encode_noisy: sigma must be nonnegative");
  Tensor e = encode(ae, images);
  if (sigma == 0.0) return e;
  Tensor noise(e.shape());
  Rng rng(seed);
  for (double& v : noise.mutable_values()) v = sigma * rng.normal();
  return add(e, noise);
}

Tensor decode(const ToyAutoencoder& ae, const Tensor& latents) {
  Tensor lin = add(matmul(latents, ae.dec_w), ae.dec_b);
  Tensor nonlin = matmul(tanh(add(matmul(latents, ae.dec_w1), ae.dec_b1)), ae.dec_w2);
  return unpatchify(ae.config, add(lin, nonlin));
}

Tensor decode_identity(const ToyAutoencoder& ae, const Tensor& latents) {
  return unpatchify(ae.config, matmul(latents, transpose(ae.enc_w, 0, 1)));
}

Tensor recon_nll(const Tensor& decoded, const Tensor& images, double sigma_dec) {
  if (decoded.shape() != images.shape())
    throw ShapeError("recon_nll: decoder output " + shape_string(decoded.shape()) +
                     " vs images " + shape_string(images.shape()));
  if (!(sigma_dec > 0.0)) throw DomainError("recon_nll: sigma_dec must be positive");
  const double c = std::log(sigma_dec) + 0.5 * std::log(2.0 * std::numbers::pi);
  return add_scalar(scale(mean(square(sub(decoded, images))), 0.5 / (sigma_dec * sigma_dec)), c);
}

ElboTerms elbo_objective(const flow::FlowModel& flow, const ToyAutoencoder& ae,
                         const Tensor& images, double sigma, std::uint64_t seed,
                         std::span<const std::size_t> labels) {
  const Tensor x_tilde = encode_noisy(ae, images, sigma, seed);
  ElboTerms t;
  t.flow_nll = flow::stack_nll(flow, x_tilde, labels).loss;
  check_finite(t.flow_nll.values(), "elbo flow term");
  t.recon_nll = recon_nll(decode(ae, x_tilde), images);
  check_finite(t.recon_nll.values(), "elbo reconstruction term");
  t.total = add(t.flow_nll, t.recon_nll);
  return t;
}

double pixel_mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("pixel_mse: shape mismatch");
  if (a.size() == 0) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a.at(i) - b.at(i)) * (a.at(i) - b.at(i));
  return s / static_cast<double>(a.size());
}

double decoder_finetune_step(ToyAutoencoder& ae, OptimState& opt, const Tensor& images,
                             double sigma, std::uint64_t seed, double lr) {
  auto params = decoder_params(ae);
  std::vector<Tensor> tensors;
  std::vector<bool> decay;
  for (auto& p : params) {
    p.tensor.set_requires_grad(true);
    p.tensor.zero_grad();
    tensors.push_back(p.tensor);
    decay.push_back(p.decay);
  }
  const Tensor x_tilde = encode_noisy(ae, images, sigma, seed);
  double mse = 0.0;
  {
    Graph g;
    Tensor loss = mean(square(sub(decode(ae, x_tilde), images)));
    mse = loss.item();
    g.backward(loss);
  }
  adamw_step(tensors, decay, opt, lr);
  return mse;
}

Tensor score_denoise_single_step(const flow::FlowModel& flow, const Tensor& x_tilde,
                                 double sigma, std::span<const std::size_t> labels) {
  if (!(sigma >= 0.0)) throw DomainError("score_denoise: sigma must be nonnegative");
  if (sigma == 0.0) return x_tilde.clone();
  const std::size_t b = x_tilde.extent(0);
  const double dims = static_cast<double>(flow.config.dims());
  constexpr std::size_t kChunk = 64;
  std::vector<Tensor> parts;
  for (std::size_t start = 0; start < b; start += kChunk) {
    const std::size_t end = std::min(b, start + kChunk);
    Tensor x = slice(x_tilde, 0, start, end).clone();
    x.set_requires_grad(true);
    std::span<const std::size_t> lab =
        labels.empty() ? labels : labels.subspan(start, end - start);
    {
      Graph g;
      // -log p summed over the chunk; its gradient is -score
      const auto r = flow::stack_nll(flow, x, lab);
      g.backward(scale(sum(r.nll_per_dim), dims));
    }
    const auto grad = x.grad();
    check_finite(grad, "score_denoise gradient");
    Tensor out = x.clone();
    auto ov = out.mutable_values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = ov[i] - sigma * sigma * grad[i];
    parts.push_back(out);
  }
  return parts.size() == 1 ? parts[0] : concat(parts, 0);
}

}  // namespace afflow::latent
