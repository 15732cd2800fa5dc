#include "afflow/autodiff/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "afflow/autodiff/graph.hpp"
#include "afflow/autodiff/kernels.hpp"
#include "afflow/errors.hpp"

namespace afflow::ad {

namespace {

using Impl = std::shared_ptr<detail::TensorImpl>;
using Grads = std::span<std::vector<double>* const>;

Tensor make_output(const std::string& op, Shape shape, std::vector<double> data) {
  check_finite(data, op);
  return Tensor(std::move(shape), std::move(data));
}

// Maps output flat indices to input flat indices under broadcasting.
struct BroadcastMap {
  enum class Kind { kSame, kTile, kGeneral } kind = Kind::kSame;
  std::size_t in_size = 0;
  std::vector<std::size_t> index;

  std::size_t operator()(std::size_t o) const {
    switch (kind) {
      case Kind::kSame:
        return o;
      case Kind::kTile:
        return o % in_size;
      default:
        return index[o];
    }
  }
};

BroadcastMap make_map(const Shape& in, const Shape& out) {
  BroadcastMap m;
  m.in_size = element_count(in);
  if (in == out) return m;
  // strip leading unit axes, then test whether in is a suffix of out
  std::size_t lead = 0;
  while (lead < in.size() && in[lead] == 1) ++lead;
  const std::size_t tail = in.size() - lead;
  if (tail <= out.size() &&
      std::equal(in.begin() + static_cast<std::ptrdiff_t>(lead), in.end(),
                 out.end() - static_cast<std::ptrdiff_t>(tail))) {
    m.kind = BroadcastMap::Kind::kTile;
    if (m.in_size == 0) m.in_size = 1;
    return m;
  }
  m.kind = BroadcastMap::Kind::kGeneral;
  const std::size_t r = out.size();
  const std::size_t off = r - in.size();
  std::vector<std::size_t> stride(r, 0);
  std::size_t s = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    stride[i + off] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  const std::size_t n = element_count(out);
  m.index.resize(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t flat = 0;
  for (std::size_t o = 0; o < n; ++o) {
    m.index[o] = flat;
    for (std::size_t ax = r; ax-- > 0;) {
      ++idx[ax];
      flat += stride[ax];
      if (idx[ax] < out[ax]) break;
      flat -= stride[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
  return m;
}

template <class Fwd, class Bwd>
Tensor binary(const std::string& op, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  const std::size_t n = element_count(out_shape);
  auto ma = std::make_shared<BroadcastMap>(make_map(a.shape(), out_shape));
  auto mb = std::make_shared<BroadcastMap>(make_map(b.shape(), out_shape));
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(n);
  if (ma->kind == BroadcastMap::Kind::kSame && mb->kind == BroadcastMap::Kind::kSame) {
    for (std::size_t o = 0; o < n; ++o) out[o] = fwd(av[o], bv[o]);
  } else {
    for (std::size_t o = 0; o < n; ++o) out[o] = fwd(av[(*ma)(o)], bv[(*mb)(o)]);
  }
  Tensor result = make_output(op, out_shape, std::move(out));
  Impl ia = a.impl();
  Impl ib = b.impl();
  record_op(op, {a, b}, result, [ia, ib, ma, mb, n, bwd](std::span<const double> g, Grads gi) {
    const auto& x = ia->data;
    const auto& y = ib->data;
    for (std::size_t o = 0; o < n; ++o) {
      const std::size_t i = (*ma)(o);
      const std::size_t j = (*mb)(o);
      double da = 0.0;
      double db = 0.0;
      bwd(x[i], y[j], g[o], da, db);
      if (gi[0]) (*gi[0])[i] += da;
      if (gi[1]) (*gi[1])[j] += db;
    }
  });
  return result;
}

// grad_fn(x, y) returns dy/dx.
template <class Fwd, class Deriv>
Tensor unary(const std::string& op, const Tensor& a, Fwd fwd, Deriv deriv) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  Tensor result = make_output(op, a.shape(), std::move(out));
  Impl ia = a.impl();
  std::weak_ptr<detail::TensorImpl> wo = result.impl();
  record_op(op, {a}, result, [ia, wo, deriv](std::span<const double> g, Grads gi) {
    auto out_impl = wo.lock();
    const auto& x = ia->data;
    const auto& y = out_impl->data;
    auto& dx = *gi[0];
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] += g[i] * deriv(x[i], y[i]);
  });
  return result;
}

std::size_t outer_of(const Shape& s, std::size_t axis) {
  std::size_t v = 1;
  for (std::size_t i = 0; i < axis; ++i) v *= s[i];
  return v;
}

std::size_t inner_of(const Shape& s, std::size_t axis) {
  std::size_t v = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) v *= s[i];
  return v;
}

void require_axis(const Tensor& a, std::size_t axis, const char* op) {
  if (axis >= a.rank())
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                     shape_string(a.shape()));
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    out[i] = da == 1 ? db : da;
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double g, double& da, double& db) {
        da = g;
        db = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double g, double& da, double& db) {
        da = g;
        db = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double g, double& da, double& db) {
        da = g * y;
        db = g * x;
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.values())
    if (v == 0.0) throw DomainError("div: zero divisor");
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double x, double y, double g, double& da, double& db) {
        da = g / y;
        db = -g * x / (y * y);
      });
}

Tensor neg(const Tensor& a) {
  return unary(
      "neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double v : a.values())
    if (!(v > 0.0)) throw DomainError("log: nonpositive argument " + std::to_string(v));
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor tanh(const Tensor& a) {
  return unary(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor softplus(const Tensor& a) {
  return unary("softplus", a, [](double x) { return kernels::softplus(x); },
               [](double x, double) { return kernels::sigmoid(x); });
}

Tensor gelu(const Tensor& a) {
  return unary("gelu", a, [](double x) { return kernels::gelu(x); },
               [](double x, double) { return kernels::gelu_grad(x); });
}

Tensor square(const Tensor& a) {
  return unary(
      "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return x * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double offset) {
  return unary(
      "add_scalar", a, [offset](double x) { return x + offset; },
      [](double, double) { return 1.0; });
}

Tensor soft_clip(const Tensor& a, double bound) {
  if (!(bound > 0.0)) throw DomainError("soft_clip: bound must be positive");
  return unary("soft_clip", a, [bound](double x) { return kernels::soft_clip(x, bound); },
               [bound](double x, double) { return kernels::soft_clip_grad(x, bound); });
}

Tensor positive_scale(const Tensor& a, double floor) {
  return unary("positive_scale", a,
               [floor](double x) { return kernels::positive_scale(x, floor); },
               [](double x, double) { return kernels::sigmoid(x); });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  Tensor result = make_output("sum", {}, {acc});
  record_op("sum", {a}, result, [](std::span<const double> g, Grads gi) {
    for (double& d : *gi[0]) d += g[0];
  });
  return result;
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor sum(const Tensor& a, std::size_t axis, bool keepdim) {
  require_axis(a, axis, "sum");
  const Shape& s = a.shape();
  const std::size_t outer = outer_of(s, axis);
  const std::size_t len = s[axis];
  const std::size_t inner = inner_of(s, axis);
  std::vector<double> out(outer * inner, 0.0);
  const auto av = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < len; ++k) {
      const double* src = av.data() + (o * len + k) * inner;
      double* dst = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  Shape os = s;
  if (keepdim)
    os[axis] = 1;
  else
    os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor result = make_output("sum_axis", os, std::move(out));
  record_op("sum_axis", {a}, result,
            [outer, len, inner](std::span<const double> g, Grads gi) {
              auto& dx = *gi[0];
              for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t k = 0; k < len; ++k)
                  for (std::size_t i = 0; i < inner; ++i)
                    dx[(o * len + k) * inner + i] += g[o * inner + i];
            });
  return result;
}

Tensor mean(const Tensor& a, std::size_t axis, bool keepdim) {
  require_axis(a, axis, "mean");
  if (a.extent(axis) == 0) throw ShapeError("mean: empty axis");
  return scale(sum(a, axis, keepdim), 1.0 / static_cast<double>(a.extent(axis)));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul: operands must have rank >= 2, got " + shape_string(a.shape()) +
                     " and " + shape_string(b.shape()));
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const std::size_t m = as[as.size() - 2];
  const std::size_t k = as.back();
  const std::size_t n = bs.back();
  if (bs[bs.size() - 2] != k)
    throw ShapeError("matmul: inner extents differ in " + shape_string(as) + " x " +
                     shape_string(bs));
  const bool shared = b.rank() == 2;
  if (!shared && !std::equal(as.begin(), as.end() - 2, bs.begin(), bs.end() - 2))
    throw ShapeError("matmul: batch extents differ in " + shape_string(as) + " x " +
                     shape_string(bs));
  const std::size_t batch = outer_of(as, as.size() - 2);
  Shape os = as;
  os.back() = n;
  std::vector<double> out(batch * m * n);
  const auto av = a.values();
  const auto bv = b.values();
  if (shared) {
    kernels::gemm(av.data(), bv.data(), out.data(), batch * m, k, n);
  } else {
    for (std::size_t t = 0; t < batch; ++t)
      kernels::gemm(av.data() + t * m * k, bv.data() + t * k * n, out.data() + t * m * n, m, k,
                    n);
  }
  Tensor result = make_output("matmul", os, std::move(out));
  Impl ia = a.impl();
  Impl ib = b.impl();
  record_op("matmul", {a, b}, result,
            [ia, ib, shared, batch, m, k, n](std::span<const double> g, Grads gi) {
              const std::size_t groups = shared ? 1 : batch;
              const std::size_t rows = shared ? batch * m : m;
              std::vector<double> tmp;
              std::vector<double> prod;
              for (std::size_t t = 0; t < groups; ++t) {
                const double* gt = g.data() + t * rows * n;
                if (gi[0]) {
                  tmp.resize(k * n);
                  prod.resize(rows * k);
                  kernels::transpose(ib->data.data() + t * k * n, tmp.data(), k, n);
                  kernels::gemm(gt, tmp.data(), prod.data(), rows, n, k);
                  double* dst = gi[0]->data() + t * rows * k;
                  for (std::size_t i = 0; i < rows * k; ++i) dst[i] += prod[i];
                }
                if (gi[1]) {
                  tmp.resize(rows * k);
                  prod.resize(k * n);
                  kernels::transpose(ia->data.data() + t * rows * k, tmp.data(), rows, k);
                  kernels::gemm(tmp.data(), gt, prod.data(), k, rows, n);
                  double* dst = gi[1]->data() + t * k * n;
                  for (std::size_t i = 0; i < k * n; ++i) dst[i] += prod[i];
                }
              }
            });
  return result;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (element_count(shape) != a.size())
    throw ShapeError("reshape: cannot view " + shape_string(a.shape()) + " as " +
                     shape_string(shape));
  const auto av = a.values();
  Tensor result(std::move(shape), std::vector<double>(av.begin(), av.end()));
  record_op("reshape", {a}, result, [](std::span<const double> g, Grads gi) {
    auto& dx = *gi[0];
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i];
  });
  return result;
}

Tensor transpose(const Tensor& a, std::size_t axis0, std::size_t axis1) {
  require_axis(a, axis0, "transpose");
  require_axis(a, axis1, "transpose");
  if (axis0 > axis1) std::swap(axis0, axis1);
  const Shape& s = a.shape();
  Shape os = s;
  std::swap(os[axis0], os[axis1]);
  // [outer, n0, mid, n1, inner] -> [outer, n1, mid, n0, inner]
  const std::size_t outer = outer_of(s, axis0);
  const std::size_t n0 = s[axis0];
  std::size_t mid = 1;
  for (std::size_t i = axis0 + 1; i < axis1; ++i) mid *= s[i];
  const std::size_t n1 = s[axis1];
  const std::size_t inner = inner_of(s, axis1);
  auto src_index = [=](std::size_t o, std::size_t i0, std::size_t md, std::size_t i1) {
    return (((o * n0 + i0) * mid + md) * n1 + i1) * inner;
  };
  auto dst_index = [=](std::size_t o, std::size_t i0, std::size_t md, std::size_t i1) {
    return (((o * n1 + i1) * mid + md) * n0 + i0) * inner;
  };
  const auto av = a.values();
  std::vector<double> out(av.size());
  if (axis0 == axis1) {
    std::copy(av.begin(), av.end(), out.begin());
  } else if (mid == 1 && inner == 1) {
    for (std::size_t o = 0; o < outer; ++o)
      kernels::transpose(av.data() + o * n0 * n1, out.data() + o * n0 * n1, n0, n1);
  } else {
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i0 = 0; i0 < n0; ++i0)
        for (std::size_t md = 0; md < mid; ++md)
          for (std::size_t i1 = 0; i1 < n1; ++i1)
            std::copy_n(av.data() + src_index(o, i0, md, i1), inner,
                        out.data() + dst_index(o, i0, md, i1));
  }
  Tensor result(os, std::move(out));
  const bool same = axis0 == axis1;
  record_op("transpose", {a}, result,
            [=](std::span<const double> g, Grads gi) {
              auto& dx = *gi[0];
              if (same) {
                for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i];
                return;
              }
              for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i0 = 0; i0 < n0; ++i0)
                  for (std::size_t md = 0; md < mid; ++md)
                    for (std::size_t i1 = 0; i1 < n1; ++i1) {
                      const double* src = g.data() + dst_index(o, i0, md, i1);
                      double* dst = dx.data() + src_index(o, i0, md, i1);
                      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
                    }
            });
  return result;
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  require_axis(a, axis, "slice");
  if (begin > end || end > a.extent(axis))
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for extent " + std::to_string(a.extent(axis)));
  const Shape& s = a.shape();
  const std::size_t outer = outer_of(s, axis);
  const std::size_t len = s[axis];
  const std::size_t inner = inner_of(s, axis);
  const std::size_t w = end - begin;
  Shape os = s;
  os[axis] = w;
  std::vector<double> out(outer * w * inner);
  const auto av = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(av.data() + (o * len + begin) * inner, w * inner, out.data() + o * w * inner);
  Tensor result(os, std::move(out));
  record_op("slice", {a}, result, [=](std::span<const double> g, Grads gi) {
    auto& dx = *gi[0];
    for (std::size_t o = 0; o < outer; ++o) {
      const double* src = g.data() + o * w * inner;
      double* dst = dx.data() + (o * len + begin) * inner;
      for (std::size_t i = 0; i < w * inner; ++i) dst[i] += src[i];
    }
  });
  return result;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  require_axis(parts[0], axis, "concat");
  const Shape& s0 = parts[0].shape();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == s0[i];
    if (!ok)
      throw ShapeError("concat: incompatible shapes " + shape_string(s0) + " and " +
                       shape_string(s));
    widths.push_back(s[axis]);
    total += s[axis];
  }
  const std::size_t outer = outer_of(s0, axis);
  const std::size_t inner = inner_of(s0, axis);
  Shape os = s0;
  os[axis] = total;
  std::vector<double> out(outer * total * inner);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto pv = parts[p].values();
    const std::size_t w = widths[p];
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.data() + o * w * inner, w * inner,
                  out.data() + (o * total + offset) * inner);
    offset += w;
  }
  Tensor result(os, std::move(out));
  record_op("concat", parts, result, [=](std::span<const double> g, Grads gi) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < widths.size(); ++p) {
      const std::size_t w = widths[p];
      if (gi[p]) {
        auto& dx = *gi[p];
        for (std::size_t o = 0; o < outer; ++o) {
          const double* src = g.data() + (o * total + off) * inner;
          double* dst = dx.data() + o * w * inner;
          for (std::size_t i = 0; i < w * inner; ++i) dst[i] += src[i];
        }
      }
      off += w;
    }
  });
  return result;
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  if (broadcast_shapes(a.shape(), shape) != shape)
    throw ShapeError("broadcast_to: cannot expand " + shape_string(a.shape()) + " to " +
                     shape_string(shape));
  auto map = std::make_shared<BroadcastMap>(make_map(a.shape(), shape));
  const std::size_t n = element_count(shape);
  const auto av = a.values();
  std::vector<double> out(n);
  for (std::size_t o = 0; o < n; ++o) out[o] = av[(*map)(o)];
  Tensor result(shape, std::move(out));
  record_op("broadcast_to", {a}, result, [map, n](std::span<const double> g, Grads gi) {
    auto& dx = *gi[0];
    for (std::size_t o = 0; o < n; ++o) dx[(*map)(o)] += g[o];
  });
  return result;
}

Tensor index_select(const Tensor& a, std::size_t axis, std::span<const std::size_t> indices) {
  require_axis(a, axis, "index_select");
  const Shape& s = a.shape();
  const std::size_t outer = outer_of(s, axis);
  const std::size_t len = s[axis];
  const std::size_t inner = inner_of(s, axis);
  for (std::size_t i : indices)
    if (i >= len)
      throw ShapeError("index_select: index " + std::to_string(i) + " out of range " +
                       std::to_string(len));
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  const std::size_t w = idx.size();
  Shape os = s;
  os[axis] = w;
  std::vector<double> out(outer * w * inner);
  const auto av = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < w; ++j)
      std::copy_n(av.data() + (o * len + idx[j]) * inner, inner,
                  out.data() + (o * w + j) * inner);
  Tensor result(os, std::move(out));
  record_op("index_select", {a}, result,
            [idx = std::move(idx), outer, len, inner](std::span<const double> g, Grads gi) {
              auto& dx = *gi[0];
              const std::size_t w = idx.size();
              for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t j = 0; j < w; ++j) {
                  const double* src = g.data() + (o * w + j) * inner;
                  double* dst = dx.data() + (o * len + idx[j]) * inner;
                  for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
                }
            });
  return result;
}

ScoreMask ScoreMask::causal(std::size_t n) {
  ScoreMask m;
  m.rows = n;
  m.cols = n;
  m.bias.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      m.bias[i * n + j] = -std::numeric_limits<double>::infinity();
  return m;
}

Tensor softmax_rows(const Tensor& x, const ScoreMask* mask) {
  if (x.rank() < 1 || x.shape().back() == 0) throw ShapeError("softmax_rows: empty rows");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  if (mask) {
    const std::size_t lead = x.rank() >= 2 ? x.shape()[x.rank() - 2] : 1;
    if (mask->cols != n || mask->rows != lead || mask->bias.size() != mask->rows * mask->cols)
      throw ShapeError("softmax_rows: mask " + std::to_string(mask->rows) + "x" +
                       std::to_string(mask->cols) + " does not fit " + shape_string(x.shape()));
  }
  const auto xv = x.values();
  std::vector<double> out(x.size());
  std::vector<double> row(n);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = xv.data() + r * n;
    const double* in = src;
    if (mask) {
      const double* b = mask->bias.data() + (r % mask->rows) * n;
      for (std::size_t j = 0; j < n; ++j) row[j] = src[j] + b[j];
      in = row.data();
    }
    if (!kernels::softmax_row(in, out.data() + r * n, n))
      throw DomainError("softmax_rows: row " + std::to_string(r) + " is fully masked");
  }
  Tensor result = make_output("softmax_rows", x.shape(), std::move(out));
  std::weak_ptr<detail::TensorImpl> wo = result.impl();
  record_op("softmax_rows", {x}, result, [wo, n, rows](std::span<const double> g, Grads gi) {
    const auto& y = wo.lock()->data;
    auto& dx = *gi[0];
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = y.data() + r * n;
      const double* gr = g.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
      double* d = dx.data() + r * n;
      for (std::size_t j = 0; j < n; ++j) d[j] += yr[j] * (gr[j] - dot);
    }
  });
  return result;
}

Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps) {
  if (x.rank() < 1 || x.shape().back() == 0) throw ShapeError("rmsnorm: zero-length feature axis");
  const std::size_t n = x.shape().back();
  if (gain.size() != n)
    throw ShapeError("rmsnorm: gain length " + std::to_string(gain.size()) +
                     " does not match feature extent " + std::to_string(n));
  const std::size_t rows = x.size() / n;
  std::vector<double> out(x.size());
  auto inv = std::make_shared<std::vector<double>>(rows);
  kernels::rmsnorm_rows(x.values().data(), gain.values().data(), out.data(), rows, n, eps,
                        inv->data());
  Tensor result = make_output("rmsnorm", x.shape(), std::move(out));
  Impl ix = x.impl();
  Impl ig = gain.impl();
  record_op("rmsnorm", {x, gain}, result,
            [ix, ig, inv, n, rows](std::span<const double> g, Grads gi) {
              const auto& xv = ix->data;
              const auto& gv = ig->data;
              const double inv_n = 1.0 / static_cast<double>(n);
              for (std::size_t r = 0; r < rows; ++r) {
                const double* xr = xv.data() + r * n;
                const double* gr = g.data() + r * n;
                const double s = (*inv)[r];
                if (gi[1]) {
                  auto& dg = *gi[1];
                  for (std::size_t j = 0; j < n; ++j) dg[j] += gr[j] * xr[j] * s;
                }
                if (gi[0]) {
                  // y = x * s * gain, s = (mean(x^2) + eps)^(-1/2)
                  double dot = 0.0;
                  for (std::size_t j = 0; j < n; ++j) dot += gr[j] * gv[j] * xr[j];
                  const double c = dot * s * s * s * inv_n;
                  double* d = gi[0]->data() + r * n;
                  for (std::size_t j = 0; j < n; ++j) d[j] += gr[j] * gv[j] * s - c * xr[j];
                }
              }
            });
  return result;
}

}  // namespace afflow::ad
