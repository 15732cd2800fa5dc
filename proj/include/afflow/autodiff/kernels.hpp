#pragma once

// Dense double-precision kernels shared by the autodiff forward pass and the
// cached inference path. Each output element is produced by the same
// sequence of floating-point operations regardless of how many rows are
// processed together, so per-row results are reproducible bit for bit.

#include <cmath>
#include <cstddef>
#include <vector>

namespace afflow::kernels {

// c[m x n] = a[m x k] * b[k x n]. Every c[i][j] is the fused multiply-add
// chain over k = 0..K-1 starting from +0.0.
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
          std::size_t n);

// b laid out as contiguous k x 16 column panels (zero padded), so a pass
// over a panel streams memory linearly. Worth it when b is reused across
// many small products, as in the cached inference path.
struct PackedMatrix {
  static constexpr std::size_t kPanel = 16;
  std::size_t k = 0;
  std::size_t n = 0;
  std::vector<double> data;
};

PackedMatrix pack_matrix(const double* b, std::size_t k, std::size_t n);

// Same result as gemm(a, b, c, m, k, n), bit for bit.
void gemm(const double* a, const PackedMatrix& b, double* c, std::size_t m);

// Single dot product with the same rounding chain as one gemm element.
inline double dot_chain(const double* a, const double* b, std::size_t k, std::size_t b_stride) {
  double acc = 0.0;
  for (std::size_t i = 0; i < k; ++i) acc = std::fma(a[i], b[i * b_stride], acc);
  return acc;
}

void transpose(const double* src, double* dst, std::size_t rows, std::size_t cols);

// out = x / sqrt(mean(x^2) + eps) * gain, row by row. inv_rms (optional)
// receives 1/sqrt(mean(x^2) + eps) per row.
void rmsnorm_rows(const double* x, const double* gain, double* out, std::size_t rows,
                  std::size_t n, double eps, double* inv_rms = nullptr);

// Max-subtracted softmax over n entries; -inf entries get weight exactly 0.
// Returns false when every entry is -inf.
bool softmax_row(const double* in, double* out, std::size_t n);

// Rotates consecutive pairs (v[2i], v[2i+1]) by the angle whose cosine and
// sine are given. sign = -1 applies the inverse rotation.
inline void rotate_pairs(double* v, const double* cos_t, const double* sin_t, std::size_t pairs,
                         double sign = 1.0) {
  for (std::size_t i = 0; i < pairs; ++i) {
    const double a = v[2 * i];
    const double b = v[2 * i + 1];
    const double s = sign * sin_t[i];
    v[2 * i] = a * cos_t[i] - b * s;
    v[2 * i + 1] = a * s + b * cos_t[i];
  }
}

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }
inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) * (0.5 * M_2_SQRTPI * M_SQRT1_2);
  return cdf + x * pdf;
}

// a * tanh(x / a)
inline double soft_clip(double x, double bound) { return bound * std::tanh(x / bound); }
inline double soft_clip_grad(double x, double bound) {
  const double t = std::tanh(x / bound);
  return 1.0 - t * t;
}

// softplus(x) + floor
inline double positive_scale(double x, double floor) { return softplus(x) + floor; }

}  // namespace afflow::kernels
