#pragma once

#include <span>
#include <vector>

#include "afflow/autodiff/tensor.hpp"

namespace afflow::ad {

// numpy-style broadcasting over trailing axes. Throws ShapeError.
Shape broadcast_shapes(const Shape& a, const Shape& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);  // DomainError on a zero divisor

Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // DomainError on a nonpositive argument
Tensor tanh(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor square(const Tensor& a);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);

// bound * tanh(x / bound)
Tensor soft_clip(const Tensor& a, double bound);
// softplus(x) + floor
Tensor positive_scale(const Tensor& a, double floor);

Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis, bool keepdim = false);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::size_t axis, bool keepdim = false);

// a: [..., M, K]. b: [K, N] shared across the leading axes of a, or
// [..., K, N] with leading axes identical to a's.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a, std::size_t axis0, std::size_t axis1);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor broadcast_to(const Tensor& a, const Shape& shape);
// Gathers entries along axis; indices may repeat (gradients scatter-add).
Tensor index_select(const Tensor& a, std::size_t axis, std::span<const std::size_t> indices);

// Additive bias over the last two axes of the scores, broadcast over the
// leading ones. Entries may be -inf (masked out).
struct ScoreMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> bias;

  static ScoreMask causal(std::size_t n);
};

// Softmax over the last axis with max subtraction. DomainError when a row
// is entirely masked.
Tensor softmax_rows(const Tensor& x, const ScoreMask* mask = nullptr);

inline constexpr double kRmsNormEps = 1e-6;

// x / sqrt(mean(x^2) + eps) * gain over the last axis.
Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps = kRmsNormEps);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

}  // namespace afflow::ad
