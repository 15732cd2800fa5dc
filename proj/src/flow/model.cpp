#include "afflow/flow/model.hpp"

#include <chrono>
#include <cmath>
#include <numbers>
#include <string>

#include "afflow/autodiff/graph.hpp"
#include "afflow/autodiff/kernels.hpp"
#include "afflow/autodiff/ops.hpp"
#include "afflow/errors.hpp"

namespace afflow::flow {

using namespace afflow::ad;

namespace {

Tensor normal_tensor(const Shape& shape, double stddev, Rng& rng) {
  Tensor t(shape);
  for (double& v : t.mutable_values()) v = stddev * rng.normal();
  return t;
}

std::vector<nn::TokenPosition> block_positions(const FlowConfig& cfg,
                                               const std::vector<std::size_t>& order,
                                               std::size_t prefix) {
  std::vector<nn::TokenPosition> pos;
  for (std::size_t t = 0; t < prefix; ++t) pos.push_back({0.0, 0.0, static_cast<double>(t + 1)});
  for (std::size_t p : order)
    pos.push_back({static_cast<double>(p % cfg.grid_w), static_cast<double>(p / cfg.grid_w), 0.0});
  return pos;
}

void check_batch(const FlowModel& model, const Tensor& x, const char* what) {
  const auto& c = model.config;
  if (x.rank() != 3 || x.extent(1) != c.positions() || x.extent(2) != c.channels)
    throw ShapeError(std::string(what) + ": expected [B, " + std::to_string(c.positions()) +
                     ", " + std::to_string(c.channels) + "], got " + shape_string(x.shape()));
}

std::vector<std::size_t> resolve_labels(const FlowModel& model, std::size_t block,
                                        std::span<const std::size_t> labels, std::size_t batch) {
  const AfBlock& blk = model.blocks[block];
  if (!blk.conditioned()) {
    if (!labels.empty())
      throw ConfigError("condition supplied to unconditioned block " + std::to_string(block));
    return {};
  }
  const std::size_t null_row = model.config.num_classes;
  if (labels.empty()) return std::vector<std::size_t>(batch, null_row);
  if (labels.size() != batch)
    throw ShapeError("labels: " + std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(batch));
  for (std::size_t l : labels)
    if (l > null_row)
      throw DomainError("labels: class " + std::to_string(l) + " out of range (" +
                        std::to_string(model.config.num_classes) + " classes)");
  return {labels.begin(), labels.end()};
}

std::span<const std::size_t> labels_for(const FlowModel& model, std::size_t block,
                                        std::span<const std::size_t> labels) {
  return model.blocks[block].conditioned() ? labels : std::span<const std::size_t>{};
}

}  // namespace

FlowModel init_flow(const FlowConfig& cfg, std::uint64_t seed, OutputInit output_init) {
  validate(cfg);
  FlowModel model;
  model.config = cfg;
  const std::size_t d = cfg.width;
  const std::size_t c = cfg.channels;
  const std::size_t n = cfg.positions();
  for (std::size_t k = 0; k < cfg.num_blocks(); ++k) {
    Rng rng(seed, k);
    AfBlock b;
    auto& bc = b.backbone_config;
    bc.num_layers = cfg.layers[k];
    bc.width = d;
    bc.head_dim = cfg.head_dim;
    bc.in_dim = c;
    bc.mlp_ratio = cfg.mlp_ratio;
    bc.use_rope = cfg.use_rope;
    bc.rope_split = cfg.rope_split;
    b.backbone = nn::init_backbone(bc, rng);
    b.sos = normal_tensor({c}, 1.0, rng);
    switch (output_init) {
      case OutputInit::kRandom:
        b.out_w = normal_tensor({d, 2 * c}, 0.5 / std::sqrt(static_cast<double>(d)), rng);
        b.out_b = normal_tensor({2 * c}, 0.1, rng);
        break;
      case OutputInit::kZero:
        b.out_w = Tensor({d, 2 * c}, 0.0);
        b.out_b = Tensor({2 * c}, 0.0);
        break;
      default: {
        b.out_w = Tensor({d, 2 * c}, 0.0);
        b.out_b = Tensor({2 * c}, 0.0);
        // softplus(raw) + floor == 1
        const double raw = std::log(std::expm1(1.0 - cfg.sigma_floor));
        for (std::size_t i = c; i < 2 * c; ++i) b.out_b.mutable_values()[i] = raw;
      }
    }
    if (cfg.conditioned(k)) b.class_emb = normal_tensor({cfg.num_classes + 1, d}, 1.0, rng);
    b.order.resize(n);
    const bool reversed = cfg.alternate_orderings && k % 2 == 0;
    for (std::size_t i = 0; i < n; ++i) b.order[i] = reversed ? n - 1 - i : i;
    b.inverse.resize(n);
    for (std::size_t i = 0; i < n; ++i) b.inverse[b.order[i]] = i;
    const auto pos = block_positions(cfg, b.order, b.prefix_len());
    b.rope = nn::RopeTable::build(bc, pos, cfg.rope_alpha);
    model.blocks.push_back(std::move(b));
  }
  snap_params_to_f32(model);
  return model;
}

std::vector<nn::NamedParam> named_params(FlowModel& model) {
  std::vector<nn::NamedParam> out;
  for (std::size_t k = 0; k < model.blocks.size(); ++k) {
    auto& b = model.blocks[k];
    const std::string p = "blocks." + std::to_string(k) + ".";
    nn::collect_params(b.backbone, p + "backbone.", out);
    out.push_back({p + "sos", b.sos, false});
    out.push_back({p + "out_w", b.out_w, true});
    out.push_back({p + "out_b", b.out_b, false});
    if (b.conditioned()) out.push_back({p + "class_emb", b.class_emb, false});
  }
  return out;
}

std::size_t parameter_count(const FlowModel& model) {
  auto params = named_params(const_cast<FlowModel&>(model));
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.size();
  return n;
}

void snap_to_f32(std::span<double> values) {
  for (double& v : values) v = static_cast<double>(static_cast<float>(v));
}

void snap_params_to_f32(FlowModel& model) {
  for (auto& p : named_params(model)) snap_to_f32(p.tensor.mutable_values());
}

GaussianParams af_params(const FlowModel& model, std::size_t block, const Tensor& x,
                         std::span<const std::size_t> labels) {
  if (block >= model.blocks.size()) throw ShapeError("af_params: block index out of range");
  check_batch(model, x, "af_params");
  const AfBlock& blk = model.blocks[block];
  const auto& cfg = model.config;
  const std::size_t b = x.extent(0);
  const std::size_t n = cfg.positions();
  const std::size_t c = cfg.channels;
  const auto rows = resolve_labels(model, block, labels, b);

  Tensor xp = index_select(x, 1, blk.order);
  Tensor sos = broadcast_to(reshape(blk.sos, {1, 1, c}), {b, 1, c});
  Tensor shifted = n > 1 ? concat({sos, slice(xp, 1, 0, n - 1)}, 1) : sos;
  Tensor prefix;
  if (blk.conditioned())
    prefix = reshape(index_select(blk.class_emb, 0, rows), {b, 1, cfg.width});
  Tensor h = nn::backbone_forward(blk.backbone_config, blk.backbone, shifted, prefix, blk.rope);
  Tensor raw = add(matmul(h, blk.out_w), blk.out_b);
  Tensor mu = soft_clip(slice(raw, 2, 0, c), cfg.soft_clip);
  Tensor sigma = positive_scale(slice(raw, 2, c, 2 * c), cfg.sigma_floor);
  return {index_select(mu, 1, blk.inverse), index_select(sigma, 1, blk.inverse)};
}

AfForward af_forward(const FlowModel& model, std::size_t block, const Tensor& x,
                     std::span<const std::size_t> labels) {
  check_finite(x.values(), "af_forward input");
  GaussianParams g = af_params(model, block, x, labels);
  Tensor z = div(sub(x, g.mu), g.sigma);
  Tensor logdet = neg(sum(sum(log(g.sigma), 2), 1));
  return {z, logdet};
}

Tensor af_inverse(const FlowModel& model, std::size_t block, const Tensor& z,
                  std::span<const std::size_t> labels, const guidance::GuidanceSpec* spec,
                  guidance::GuidanceStats* stats) {
  if (block >= model.blocks.size()) throw ShapeError("af_inverse: block index out of range");
  check_batch(model, z, "af_inverse");
  check_finite(z.values(), "af_inverse input");
  const AfBlock& blk = model.blocks[block];
  const auto& cfg = model.config;
  const bool guided = spec && spec->enabled_for(block);
  if (guided && !blk.conditioned())
    throw ConfigError("guidance requested for block " + std::to_string(block) +
                      ", which has no unconditional pathway");
  const std::size_t b = z.extent(0);
  const std::size_t n = cfg.positions();
  const std::size_t c = cfg.channels;
  const std::size_t d = cfg.width;
  const std::size_t rows = guided ? 2 * b : b;
  const auto cond = resolve_labels(model, block, labels, b);

  nn::BackboneCache cache(blk.backbone_config, blk.backbone, rows, blk.rope);
  if (blk.conditioned()) {
    std::vector<double> prefix(rows * d);
    const auto emb = blk.class_emb.values();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t label = r < b ? cond[r] : cfg.num_classes;
      std::copy_n(emb.data() + label * d, d, prefix.data() + r * d);
    }
    cache.push_prefix(prefix);
  }
  std::vector<double> token(rows * c);
  const auto sos = blk.sos.values();
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(sos.data(), c, token.data() + r * c);
  std::vector<double> hidden(rows * d);
  std::vector<double> raw(rows * 2 * c);
  const auto ow = blk.out_w.values();
  const auto ob = blk.out_b.values();
  const auto zv = z.values();
  Tensor x({b, n, c});
  auto xv = x.mutable_values();
  for (std::size_t i = 0; i < n; ++i) {
    cache.push_token(token, hidden);
    kernels::gemm(hidden.data(), ow.data(), raw.data(), rows, d, 2 * c);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < 2 * c; ++j) raw[r * 2 * c + j] = raw[r * 2 * c + j] + ob[j];
    const std::size_t pos = blk.order[i];
    for (std::size_t r = 0; r < b; ++r) {
      const double* rc = raw.data() + r * 2 * c;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double mu_c = kernels::soft_clip(rc[ch], cfg.soft_clip);
        const double sig_c = kernels::positive_scale(rc[c + ch], cfg.sigma_floor);
        guidance::Gaussian g{mu_c, sig_c};
        if (guided) {
          const double* ru = raw.data() + (b + r) * 2 * c;
          const double mu_u = kernels::soft_clip(ru[ch], cfg.soft_clip);
          const double sig_u = kernels::positive_scale(ru[c + ch], cfg.sigma_floor);
          g = guidance::apply_guidance(*spec, mu_c, sig_c, mu_u, sig_u, stats);
        }
        const std::size_t at = (r * n + pos) * c + ch;
        const double value = g.mu + g.sigma * zv[at];
        if (!std::isfinite(value))
          throw NumericError("af_inverse: non-finite value at block " + std::to_string(block));
        xv[at] = value;
        token[r * c + ch] = value;
        if (guided) token[(b + r) * c + ch] = value;
      }
    }
  }
  return x;
}

AfForward stack_forward(const FlowModel& model, const Tensor& x,
                        std::span<const std::size_t> labels) {
  check_batch(model, x, "stack_forward");
  const std::size_t b = x.extent(0);
  // Inference mode: bound activation memory by running row chunks. Rows are
  // independent, so results equal the single-pass computation.
  constexpr std::size_t kChunk = 32;
  if (!Graph::active() && b > kChunk) {
    std::vector<Tensor> zs, lds;
    for (std::size_t start = 0; start < b; start += kChunk) {
      const std::size_t end = std::min(b, start + kChunk);
      std::span<const std::size_t> lab =
          labels.empty() ? labels : labels.subspan(start, end - start);
      AfForward part = stack_forward(model, slice(x, 0, start, end), lab);
      zs.push_back(part.z);
      lds.push_back(part.logdet);
    }
    return {concat(zs, 0), concat(lds, 0)};
  }
  Tensor h = x;
  Tensor logdet;
  for (std::size_t k = model.blocks.size(); k-- > 0;) {
    AfForward f = af_forward(model, k, h, labels_for(model, k, labels));
    h = f.z;
    logdet = logdet.defined() ? add(logdet, f.logdet) : f.logdet;
  }
  return {h, logdet};
}

StackResult stack_nll(const FlowModel& model, const Tensor& x,
                      std::span<const std::size_t> labels) {
  check_batch(model, x, "stack_nll");
  const auto& cfg = model.config;
  StackResult out;
  Tensor h = x;
  Tensor logdet;
  for (std::size_t k = model.blocks.size(); k-- > 0;) {
    AfForward f = af_forward(model, k, h, labels_for(model, k, labels));
    h = f.z;
    logdet = logdet.defined() ? add(logdet, f.logdet) : f.logdet;
    if (k > 0) out.latents.push_back(h);
  }
  out.z = h;
  const double dims = static_cast<double>(cfg.dims());
  Tensor sq = sum(sum(square(h), 2), 1);
  Tensor logp = add_scalar(add(scale(sq, -0.5), logdet),
                           -0.5 * dims * std::log(2.0 * std::numbers::pi));
  out.nll_per_dim = scale(logp, -1.0 / dims);
  out.loss = mean(out.nll_per_dim);
  if (cfg.norm_penalty > 0.0 && !out.latents.empty()) {
    Tensor penalty = mean(square(out.latents[0]));
    for (std::size_t t = 1; t < out.latents.size(); ++t)
      penalty = add(penalty, mean(square(out.latents[t])));
    out.loss = add(out.loss, scale(penalty, cfg.norm_penalty));
  }
  check_finite(out.loss.values(), "stack_nll");
  return out;
}

Tensor stack_inverse(const FlowModel& model, const Tensor& z, std::span<const std::size_t> labels,
                     const guidance::GuidanceSpec* spec, guidance::GuidanceStats* stats,
                     std::vector<double>* block_ms) {
  check_batch(model, z, "stack_inverse");
  if (block_ms) block_ms->assign(model.blocks.size(), 0.0);
  Tensor h = z;
  for (std::size_t k = 0; k < model.blocks.size(); ++k) {
    const auto t0 = std::chrono::steady_clock::now();
    h = af_inverse(model, k, h, labels_for(model, k, labels), spec, stats);
    if (block_ms)
      (*block_ms)[k] =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  }
  return h;
}

Tensor stack_sample(const FlowModel& model, std::size_t n, std::uint64_t seed,
                    std::span<const std::size_t> labels, const guidance::GuidanceSpec* spec,
                    guidance::GuidanceStats* stats, std::vector<double>* block_ms) {
  Rng rng(seed);
  Tensor z({n, model.config.positions(), model.config.channels});
  for (double& v : z.mutable_values()) v = rng.normal();
  return stack_inverse(model, z, labels, spec, stats, block_ms);
}

std::vector<double> log_prob(const FlowModel& model, const Tensor& x,
                             std::span<const std::size_t> labels) {
  check_batch(model, x, "log_prob");
  const std::size_t b = x.extent(0);
  const std::size_t per = model.config.dims();
  const double dims = static_cast<double>(per);
  constexpr std::size_t kChunk = 64;
  std::vector<double> out;
  out.reserve(b);
  for (std::size_t start = 0; start < b; start += kChunk) {
    const std::size_t end = std::min(b, start + kChunk);
    Tensor part = slice(x, 0, start, end);
    std::span<const std::size_t> lab =
        labels.empty() ? labels : labels.subspan(start, end - start);
    AfForward f = stack_forward(model, part, lab);
    const auto zv = f.z.values();
    for (std::size_t r = 0; r < end - start; ++r) {
      double sq = 0.0;
      for (std::size_t i = 0; i < per; ++i) sq += zv[r * per + i] * zv[r * per + i];
      out.push_back(-0.5 * sq - 0.5 * dims * std::log(2.0 * std::numbers::pi) + f.logdet.at(r));
    }
  }
  return out;
}

}  // namespace afflow::flow
