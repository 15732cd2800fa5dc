#include "afflow/nn/backbone.hpp"

#include <cmath>
#include <string>

#include "afflow/autodiff/graph.hpp"
#include "afflow/autodiff/kernels.hpp"
#include "afflow/autodiff/ops.hpp"
#include "afflow/errors.hpp"

namespace afflow::nn {

using namespace afflow::ad;

void validate(const BackboneConfig& cfg) {
  if (cfg.width == 0 || cfg.head_dim == 0 || cfg.in_dim == 0)
    throw ConfigError("backbone: width, head_dim and in_dim must be positive");
  if (cfg.width % cfg.head_dim != 0)
    throw ConfigError("backbone: width " + std::to_string(cfg.width) +
                      " not divisible by head_dim " + std::to_string(cfg.head_dim));
  if (cfg.mlp_ratio == 0) throw ConfigError("backbone: mlp_ratio must be positive");
  rope_slices(cfg);
}

std::array<std::size_t, 3> rope_slices(const BackboneConfig& cfg) {
  double total = 0.0;
  for (double f : cfg.rope_split) {
    if (f < 0.0) throw ConfigError("rope_split: negative fraction");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("rope_split: fractions must sum to 1");
  std::array<std::size_t, 3> len{};
  const double hd = static_cast<double>(cfg.head_dim);
  len[0] = static_cast<std::size_t>(std::llround(cfg.rope_split[0] * hd));
  len[1] = static_cast<std::size_t>(std::llround(cfg.rope_split[1] * hd));
  if (len[0] + len[1] > cfg.head_dim) throw ConfigError("rope_split: slices exceed head_dim");
  len[2] = cfg.head_dim - len[0] - len[1];
  for (std::size_t s : len)
    if (s % 2 != 0)
      throw ConfigError("rope_split: odd slice length " + std::to_string(s) + " for head_dim " +
                        std::to_string(cfg.head_dim));
  return len;
}

RopeTable RopeTable::build(const BackboneConfig& cfg, std::span<const TokenPosition> positions,
                           double alpha) {
  if (!(alpha > 0.0)) throw DomainError("rope: alpha must be positive");
  const auto len = rope_slices(cfg);
  RopeTable t;
  t.seq = positions.size();
  t.pairs = cfg.head_dim / 2;
  t.angles.resize(t.seq * t.pairs);
  for (std::size_t s = 0; s < t.seq; ++s) {
    const TokenPosition& p = positions[s];
    const double coord[3] = {p.x / alpha, p.y / alpha, p.t};
    std::size_t pair = 0;
    for (std::size_t axis = 0; axis < 3; ++axis) {
      const std::size_t half = len[axis] / 2;
      for (std::size_t i = 0; i < half; ++i, ++pair) {
        const double freq = std::pow(cfg.rope_base, -2.0 * static_cast<double>(i) /
                                                        static_cast<double>(len[axis]));
        t.angles[s * t.pairs + pair] = coord[axis] * freq;
      }
    }
  }
  t.cos.resize(t.angles.size());
  t.sin.resize(t.angles.size());
  for (std::size_t i = 0; i < t.angles.size(); ++i) {
    t.cos[i] = std::cos(t.angles[i]);
    t.sin[i] = std::sin(t.angles[i]);
  }
  return t;
}

RopeTable RopeTable::rows(std::size_t begin, std::size_t end) const {
  if (begin > end || end > seq) throw ShapeError("rope: row range out of bounds");
  RopeTable t;
  t.seq = end - begin;
  t.pairs = pairs;
  auto cut = [&](const std::vector<double>& v) {
    return std::vector<double>(v.begin() + static_cast<std::ptrdiff_t>(begin * pairs),
                               v.begin() + static_cast<std::ptrdiff_t>(end * pairs));
  };
  t.angles = cut(angles);
  t.cos = cut(cos);
  t.sin = cut(sin);
  return t;
}

Tensor rope_rotate(const Tensor& x, const RopeTable& table) {
  if (x.rank() < 3) throw ShapeError("rope_rotate: expected [..., seq, heads, head_dim]");
  const Shape& s = x.shape();
  const std::size_t hd = s.back();
  const std::size_t heads = s[s.size() - 2];
  const std::size_t seq = s[s.size() - 3];
  if (hd != 2 * table.pairs)
    throw ShapeError("rope_rotate: head_dim " + std::to_string(hd) + " does not match table");
  if (seq != table.seq)
    throw ShapeError("rope_rotate: sequence length " + std::to_string(seq) +
                     " does not match table length " + std::to_string(table.seq));
  const std::size_t outer = x.size() / (seq * heads * hd);
  const auto xv = x.values();
  std::vector<double> out(xv.begin(), xv.end());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t p = 0; p < seq; ++p)
      for (std::size_t h = 0; h < heads; ++h)
        kernels::rotate_pairs(out.data() + ((o * seq + p) * heads + h) * hd,
                              table.cos.data() + p * table.pairs,
                              table.sin.data() + p * table.pairs, table.pairs);
  Tensor result(s, std::move(out));
  auto cos_t = std::make_shared<std::vector<double>>(table.cos);
  auto sin_t = std::make_shared<std::vector<double>>(table.sin);
  const std::size_t pairs = table.pairs;
  record_op("rope_rotate", {x}, result,
            [=](std::span<const double> g, std::span<std::vector<double>* const> gi) {
              std::vector<double> tmp(hd);
              auto& dx = *gi[0];
              for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t p = 0; p < seq; ++p)
                  for (std::size_t h = 0; h < heads; ++h) {
                    const std::size_t off = ((o * seq + p) * heads + h) * hd;
                    std::copy_n(g.data() + off, hd, tmp.data());
                    kernels::rotate_pairs(tmp.data(), cos_t->data() + p * pairs,
                                          sin_t->data() + p * pairs, pairs, -1.0);
                    for (std::size_t i = 0; i < hd; ++i) dx[off + i] += tmp[i];
                  }
            });
  return result;
}

namespace {

Tensor normal_tensor(const Shape& shape, double stddev, Rng& rng) {
  Tensor t(shape);
  for (double& v : t.mutable_values()) v = stddev * rng.normal();
  return t;
}

}  // namespace

BackboneParams init_backbone(const BackboneConfig& cfg, Rng& rng) {
  validate(cfg);
  const std::size_t d = cfg.width;
  const std::size_t hidden = cfg.mlp_ratio * d;
  const double depth_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(1, cfg.num_layers)));
  BackboneParams p;
  p.in_w = normal_tensor({cfg.in_dim, d}, 1.0 / std::sqrt(static_cast<double>(cfg.in_dim)), rng);
  p.in_b = Tensor({d}, 0.0);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    LayerParams lp;
    lp.norm1 = Tensor({d}, 1.0);
    lp.wqkv = normal_tensor({d, 3 * d}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    lp.wo = normal_tensor({d, d}, depth_scale / std::sqrt(static_cast<double>(d)), rng);
    lp.norm2 = Tensor({d}, 1.0);
    lp.w1 = normal_tensor({d, hidden}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    lp.b1 = Tensor({hidden}, 0.0);
    lp.w2 = normal_tensor({hidden, d}, depth_scale / std::sqrt(static_cast<double>(hidden)), rng);
    lp.b2 = Tensor({d}, 0.0);
    p.layers.push_back(std::move(lp));
  }
  p.final_gain = Tensor({d}, 1.0);
  return p;
}

void collect_params(BackboneParams& params, const std::string& prefix,
                    std::vector<NamedParam>& out) {
  out.push_back({prefix + "in_w", params.in_w, true});
  out.push_back({prefix + "in_b", params.in_b, false});
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    auto& lp = params.layers[l];
    const std::string p = prefix + "layers." + std::to_string(l) + ".";
    out.push_back({p + "norm1", lp.norm1, false});
    out.push_back({p + "wqkv", lp.wqkv, true});
    out.push_back({p + "wo", lp.wo, true});
    out.push_back({p + "norm2", lp.norm2, false});
    out.push_back({p + "w1", lp.w1, true});
    out.push_back({p + "b1", lp.b1, false});
    out.push_back({p + "w2", lp.w2, true});
    out.push_back({p + "b2", lp.b2, false});
  }
  out.push_back({prefix + "final_gain", params.final_gain, false});
}

Tensor causal_attention(const BackboneConfig& cfg, const LayerParams& layer, const Tensor& hidden,
                        const RopeTable& rope, Tensor* weights_out) {
  if (hidden.rank() != 3 || hidden.extent(2) != cfg.width)
    throw ShapeError("attention: expected [B, S, " + std::to_string(cfg.width) + "], got " +
                     shape_string(hidden.shape()));
  const std::size_t b = hidden.extent(0);
  const std::size_t s = hidden.extent(1);
  if (s == 0) throw ShapeError("attention: empty sequence");
  const std::size_t d = cfg.width;
  const std::size_t hd = cfg.head_dim;
  const std::size_t heads = cfg.num_heads();
  Tensor qkv = matmul(hidden, layer.wqkv);
  Tensor q = reshape(slice(qkv, 2, 0, d), {b, s, heads, hd});
  Tensor k = reshape(slice(qkv, 2, d, 2 * d), {b, s, heads, hd});
  Tensor v = reshape(slice(qkv, 2, 2 * d, 3 * d), {b, s, heads, hd});
  if (cfg.use_rope) {
    q = rope_rotate(q, rope);
    k = rope_rotate(k, rope);
  }
  Tensor qh = transpose(q, 1, 2);
  Tensor kt = transpose(transpose(k, 1, 2), 2, 3);
  Tensor vh = transpose(v, 1, 2);
  Tensor scores = scale(matmul(qh, kt), 1.0 / std::sqrt(static_cast<double>(hd)));
  const ScoreMask mask = ScoreMask::causal(s);
  Tensor probs = softmax_rows(scores, &mask);
  if (weights_out) *weights_out = probs;
  Tensor o = reshape(transpose(matmul(probs, vh), 1, 2), {b, s, d});
  return matmul(o, layer.wo);
}

Tensor backbone_forward(const BackboneConfig& cfg, const BackboneParams& params,
                        const Tensor& tokens, const Tensor& prefix, const RopeTable& rope) {
  if (tokens.rank() != 3 || tokens.extent(2) != cfg.in_dim)
    throw ShapeError("backbone: tokens must be [B, S, " + std::to_string(cfg.in_dim) + "], got " +
                     shape_string(tokens.shape()));
  const std::size_t b = tokens.extent(0);
  const std::size_t s = tokens.extent(1);
  std::size_t p = 0;
  if (prefix.defined()) {
    if (prefix.rank() != 3 || prefix.extent(0) != b || prefix.extent(2) != cfg.width)
      throw ShapeError("backbone: prefix must be [" + std::to_string(b) + ", p, " +
                       std::to_string(cfg.width) + "], got " + shape_string(prefix.shape()));
    p = prefix.extent(1);
  }
  if (rope.seq != p + s)
    throw ShapeError("backbone: " + std::to_string(rope.seq) + " positions for " +
                     std::to_string(p + s) + " tokens");
  Tensor h = add(matmul(tokens, params.in_w), params.in_b);
  if (p > 0) h = concat({prefix, h}, 1);
  for (const auto& layer : params.layers) {
    h = add(h, causal_attention(cfg, layer, rmsnorm(h, layer.norm1), rope));
    Tensor n2 = rmsnorm(h, layer.norm2);
    Tensor m = add(matmul(gelu(add(matmul(n2, layer.w1), layer.b1)), layer.w2), layer.b2);
    h = add(h, m);
  }
  h = rmsnorm(h, params.final_gain);
  if (p > 0) h = slice(h, 1, p, p + s);
  return h;
}

BackboneCache::BackboneCache(const BackboneConfig& cfg, const BackboneParams& params,
                             std::size_t batch, const RopeTable& rope)
    : cfg_(cfg), params_(params), batch_(batch), rope_(rope) {
  const std::size_t per = batch * cfg.num_heads() * rope.seq * cfg.head_dim;
  keys_.assign(params.layers.size(), std::vector<double>(per));
  values_.assign(params.layers.size(), std::vector<double>(per));
  scores_.resize(rope.seq);
  const std::size_t d = cfg.width;
  const std::size_t hidden = cfg.mlp_ratio * d;
  for (const auto& lp : params.layers)
    packed_.push_back({kernels::pack_matrix(lp.wqkv.values().data(), d, 3 * d),
                       kernels::pack_matrix(lp.wo.values().data(), d, d),
                       kernels::pack_matrix(lp.w1.values().data(), d, hidden),
                       kernels::pack_matrix(lp.w2.values().data(), hidden, d)});
}

void BackboneCache::push_prefix(std::span<const double> rows) {
  if (rows.size() != batch_ * cfg_.width) throw ShapeError("cache: prefix rows size mismatch");
  std::vector<double> h(rows.begin(), rows.end());
  run_layers(h, {});
}

void BackboneCache::push_token(std::span<const double> rows, std::span<double> hidden) {
  if (rows.size() != batch_ * cfg_.in_dim) throw ShapeError("cache: token rows size mismatch");
  if (hidden.size() != batch_ * cfg_.width) throw ShapeError("cache: output size mismatch");
  const std::size_t d = cfg_.width;
  std::vector<double> h(batch_ * d);
  kernels::gemm(rows.data(), params_.in_w.values().data(), h.data(), batch_, cfg_.in_dim, d);
  const auto bias = params_.in_b.values();
  for (std::size_t r = 0; r < batch_; ++r)
    for (std::size_t j = 0; j < d; ++j) h[r * d + j] = h[r * d + j] + bias[j];
  run_layers(h, hidden);
}

void BackboneCache::run_layers(std::vector<double>& h, std::span<double> hidden_out) {
  if (length_ >= rope_.seq)
    throw NumericError("cache: position " + std::to_string(length_) + " beyond capacity " +
                       std::to_string(rope_.seq));
  const std::size_t d = cfg_.width;
  const std::size_t hd = cfg_.head_dim;
  const std::size_t heads = cfg_.num_heads();
  const std::size_t cap = rope_.seq;
  const std::size_t hidden = cfg_.mlp_ratio * d;
  const std::size_t pos = length_;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  n_.resize(batch_ * d);
  qkv_.resize(batch_ * 3 * d);
  attn_.resize(batch_ * d);
  proj_.resize(batch_ * d);
  act_.resize(batch_ * hidden);
  mlp_.resize(batch_ * d);
  for (std::size_t l = 0; l < params_.layers.size(); ++l) {
    const LayerParams& lp = params_.layers[l];
    const PackedLayer& pk = packed_[l];
    kernels::rmsnorm_rows(h.data(), lp.norm1.values().data(), n_.data(), batch_, d,
                          ad::kRmsNormEps);
    kernels::gemm(n_.data(), pk.wqkv, qkv_.data(), batch_);
    auto& kc = keys_[l];
    auto& vc = values_[l];
    for (std::size_t r = 0; r < batch_; ++r) {
      double* row = qkv_.data() + r * 3 * d;
      for (std::size_t hh = 0; hh < heads; ++hh) {
        double* q = row + hh * hd;
        double* k = row + d + hh * hd;
        const double* v = row + 2 * d + hh * hd;
        if (cfg_.use_rope) {
          kernels::rotate_pairs(q, rope_.cos.data() + pos * rope_.pairs,
                                rope_.sin.data() + pos * rope_.pairs, rope_.pairs);
          kernels::rotate_pairs(k, rope_.cos.data() + pos * rope_.pairs,
                                rope_.sin.data() + pos * rope_.pairs, rope_.pairs);
        }
        // keys are stored transposed [head_dim, cap], values [cap, head_dim]
        const std::size_t base = (r * heads + hh) * cap * hd;
        double* kt = kc.data() + base;
        double* vr = vc.data() + base;
        for (std::size_t c = 0; c < hd; ++c) kt[c * cap + pos] = k[c];
        std::copy_n(v, hd, vr + pos * hd);
        // same per-element fma chains as the batched gemm path
        std::fill_n(scores_.data(), pos + 1, 0.0);
        for (std::size_t c = 0; c < hd; ++c) {
          const double qc = q[c];
          const double* krow = kt + c * cap;
          for (std::size_t j = 0; j <= pos; ++j) scores_[j] = std::fma(qc, krow[j], scores_[j]);
        }
        for (std::size_t j = 0; j <= pos; ++j) scores_[j] = scores_[j] * inv_sqrt;
        kernels::softmax_row(scores_.data(), scores_.data(), pos + 1);
        double* out = attn_.data() + r * d + hh * hd;
        std::fill_n(out, hd, 0.0);
        for (std::size_t j = 0; j <= pos; ++j) {
          const double pj = scores_[j];
          const double* vrow = vr + j * hd;
          for (std::size_t c = 0; c < hd; ++c) out[c] = std::fma(pj, vrow[c], out[c]);
        }
      }
    }
    kernels::gemm(attn_.data(), pk.wo, proj_.data(), batch_);
    for (std::size_t i = 0; i < batch_ * d; ++i) h[i] = h[i] + proj_[i];
    kernels::rmsnorm_rows(h.data(), lp.norm2.values().data(), n_.data(), batch_, d,
                          ad::kRmsNormEps);
    kernels::gemm(n_.data(), pk.w1, act_.data(), batch_);
    const auto b1 = lp.b1.values();
    for (std::size_t r = 0; r < batch_; ++r)
      for (std::size_t j = 0; j < hidden; ++j)
        act_[r * hidden + j] = kernels::gelu(act_[r * hidden + j] + b1[j]);
    kernels::gemm(act_.data(), pk.w2, mlp_.data(), batch_);
    const auto b2 = lp.b2.values();
    for (std::size_t r = 0; r < batch_; ++r)
      for (std::size_t j = 0; j < d; ++j) h[r * d + j] = h[r * d + j] + (mlp_[r * d + j] + b2[j]);
  }
  if (!hidden_out.empty())
    kernels::rmsnorm_rows(h.data(), params_.final_gain.values().data(), hidden_out.data(),
                          batch_, d, ad::kRmsNormEps);
  ++length_;
}

}  // namespace afflow::nn
