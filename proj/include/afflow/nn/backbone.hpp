#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "afflow/autodiff/kernels.hpp"
#include "afflow/autodiff/tensor.hpp"
#include "afflow/rng.hpp"

namespace afflow::nn {

using ad::Tensor;

struct BackboneConfig {
  std::size_t num_layers = 2;
  std::size_t width = 128;
  std::size_t head_dim = 64;
  std::size_t in_dim = 4;
  std::size_t mlp_ratio = 4;
  bool use_rope = true;
  std::array<double, 3> rope_split{0.375, 0.375, 0.25};  // (x, y, t) shares of head_dim
  double rope_base = 10000.0;

  std::size_t num_heads() const { return width / head_dim; }
};

// Throws ConfigError when width/head_dim/rope_split are inconsistent.
void validate(const BackboneConfig& cfg);

// Slice lengths of head_dim assigned to the x, y and t axes.
std::array<std::size_t, 3> rope_slices(const BackboneConfig& cfg);

struct TokenPosition {
  double x = 0.0;
  double y = 0.0;
  double t = 0.0;
};

// Per-position rotation angles, cosines and sines for a sequence. angles is
// [seq, head_dim / 2]; pair i of the head uses angles[pos][i].
struct RopeTable {
  std::size_t seq = 0;
  std::size_t pairs = 0;
  std::vector<double> angles;
  std::vector<double> cos;
  std::vector<double> sin;

  // Spatial coordinates are divided by alpha; t is used as is.
  static RopeTable build(const BackboneConfig& cfg, std::span<const TokenPosition> positions,
                         double alpha = 1.0);
  // Rows [begin, end) of this table.
  RopeTable rows(std::size_t begin, std::size_t end) const;
};

// x: [..., seq, heads, head_dim]. Rotates each head vector of position s by
// the angles of table row s.
Tensor rope_rotate(const Tensor& x, const RopeTable& table);

struct LayerParams {
  Tensor norm1;  // [d]
  Tensor wqkv;   // [d, 3d]
  Tensor wo;     // [d, d]
  Tensor norm2;  // [d]
  Tensor w1;     // [d, r*d]
  Tensor b1;     // [r*d]
  Tensor w2;     // [r*d, d]
  Tensor b2;     // [d]
};

struct BackboneParams {
  Tensor in_w;  // [in_dim, d]
  Tensor in_b;  // [d]
  std::vector<LayerParams> layers;
  Tensor final_gain;  // [d]
};

BackboneParams init_backbone(const BackboneConfig& cfg, Rng& rng);

struct NamedParam {
  std::string name;
  Tensor tensor;
  bool decay = true;
};

void collect_params(BackboneParams& params, const std::string& prefix,
                    std::vector<NamedParam>& out);

// hidden: [B, S, d]. Causal multi-head self-attention with RoPE applied to
// queries and keys (when enabled). weights_out, if given, receives the
// attention probabilities [B, H, S, S].
Tensor causal_attention(const BackboneConfig& cfg, const LayerParams& layer, const Tensor& hidden,
                        const RopeTable& rope, Tensor* weights_out = nullptr);

// tokens: [B, S, in_dim]; prefix: [B, p, d] or undefined; rope covers p + S
// positions (prefix first). Returns final-normed hidden states [B, S, d]
// for the sequence positions only.
Tensor backbone_forward(const BackboneConfig& cfg, const BackboneParams& params,
                        const Tensor& tokens, const Tensor& prefix, const RopeTable& rope);

// Incremental evaluation of backbone_forward one position at a time with a
// key/value cache. Uses the same kernels in the same order as the batched
// path, so hidden states match it bit for bit.
class BackboneCache {
 public:
  BackboneCache(const BackboneConfig& cfg, const BackboneParams& params, std::size_t batch,
                const RopeTable& rope);

  // rows: [batch, d] prefix embedding for the next position. No output.
  void push_prefix(std::span<const double> rows);
  // rows: [batch, in_dim]; writes [batch, d] final-normed hidden states.
  void push_token(std::span<const double> rows, std::span<double> hidden);

  std::size_t length() const { return length_; }

 private:
  void run_layers(std::vector<double>& h, std::span<double> hidden_out);

  const BackboneConfig& cfg_;
  const BackboneParams& params_;
  std::size_t batch_;
  const RopeTable& rope_;
  std::size_t length_ = 0;
  // per layer: [batch, heads, capacity, head_dim]
  std::vector<std::vector<double>> keys_;
  std::vector<std::vector<double>> values_;
  std::vector<double> n_, qkv_, attn_, proj_, mlp_, act_, scores_;
  struct PackedLayer {
    kernels::PackedMatrix wqkv, wo, w1, w2;
  };
  std::vector<PackedLayer> packed_;
};

}  // namespace afflow::nn
