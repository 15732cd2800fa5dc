#include "afflow/autodiff/kernels.hpp"

#include <algorithm>
#include <limits>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace afflow::kernels {

namespace {

constexpr std::size_t kPanel = PackedMatrix::kPanel;

[[maybe_unused]] void gemm_scalar(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  std::fill(c, c + m * n, 0.0);
  std::size_t i = 0;
  // Four rows share each streamed row of b.
  for (; i + 4 <= m; i += 4) {
    double* c0 = c + (i + 0) * n;
    double* c1 = c + (i + 1) * n;
    double* c2 = c + (i + 2) * n;
    double* c3 = c + (i + 3) * n;
    const double* a0 = a + (i + 0) * k;
    const double* a1 = a + (i + 1) * k;
    const double* a2 = a + (i + 2) * k;
    const double* a3 = a + (i + 3) * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      const double x0 = a0[p], x1 = a1[p], x2 = a2[p], x3 = a3[p];
      for (std::size_t j = 0; j < n; ++j) {
        const double bv = brow[j];
        c0[j] = std::fma(x0, bv, c0[j]);
        c1[j] = std::fma(x1, bv, c1[j]);
        c2[j] = std::fma(x2, bv, c2[j]);
        c3[j] = std::fma(x3, bv, c3[j]);
      }
    }
  }
  for (; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      const double x = ai[p];
      for (std::size_t j = 0; j < n; ++j) ci[j] = std::fma(x, brow[j], ci[j]);
    }
  }
}

#if defined(__AVX512F__)

// MR x (8 * NV) tile held in registers; the last vector column is masked.
template <int MR, int NV>
inline void tile(const double* a, std::size_t k, const double* b, std::size_t ldb, double* c,
                 std::size_t n, __mmask8 last) {
  __m512d acc[MR][NV];
#pragma GCC unroll 8
  for (int r = 0; r < MR; ++r)
#pragma GCC unroll 2
    for (int v = 0; v < NV; ++v) acc[r][v] = _mm512_setzero_pd();
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = b + p * ldb;
    __m512d bv[NV];
#pragma GCC unroll 2
    for (int v = 0; v < NV - 1; ++v) bv[v] = _mm512_loadu_pd(brow + 8 * v);
    bv[NV - 1] = _mm512_maskz_loadu_pd(last, brow + 8 * (NV - 1));
#pragma GCC unroll 8
    for (int r = 0; r < MR; ++r) {
      const __m512d av = _mm512_set1_pd(a[r * k + p]);
#pragma GCC unroll 2
      for (int v = 0; v < NV; ++v) acc[r][v] = _mm512_fmadd_pd(av, bv[v], acc[r][v]);
    }
  }
#pragma GCC unroll 8
  for (int r = 0; r < MR; ++r) {
#pragma GCC unroll 2
    for (int v = 0; v < NV - 1; ++v) _mm512_storeu_pd(c + r * n + 8 * v, acc[r][v]);
    _mm512_mask_storeu_pd(c + r * n + 8 * (NV - 1), last, acc[r][NV - 1]);
  }
}

template <int NV>
inline void row_tiles(const double* a, const double* b, std::size_t ldb, double* c, std::size_t m,
                      std::size_t k, std::size_t n, __mmask8 last) {
  constexpr std::size_t kRows = 8;
  std::size_t i = 0;
  for (; i + kRows <= m; i += kRows) tile<kRows, NV>(a + i * k, k, b, ldb, c + i * n, n, last);
  switch (m - i) {
    case 7: tile<7, NV>(a + i * k, k, b, ldb, c + i * n, n, last); break;
    case 6: tile<6, NV>(a + i * k, k, b, ldb, c + i * n, n, last); break;
    case 5: tile<5, NV>(a + i * k, k, b, ldb, c + i * n, n, last); break;
    case 4: tile<4, NV>(a + i * k, k, b, ldb, c + i * n, n, last); break;
    case 3: tile<3, NV>(a + i * k, k, b, ldb, c + i * n, n, last); break;
    case 2: tile<2, NV>(a + i * k, k, b, ldb, c + i * n, n, last); break;
    case 1: tile<1, NV>(a + i * k, k, b, ldb, c + i * n, n, last); break;
    default: break;
  }
}

// Column panels of 16; panel j of b starts at panel(j) and has row stride ldb.
template <typename Panel>
void gemm_avx512(const double* a, Panel panel, std::size_t ldb, double* c, std::size_t m,
                 std::size_t k, std::size_t n) {
  for (std::size_t j = 0; j < n; j += kPanel) {
    const std::size_t rem = n - j;
    if (rem > 8) {
      const __mmask8 last = rem >= 16 ? 0xFF : static_cast<__mmask8>((1u << (rem - 8)) - 1);
      row_tiles<2>(a, panel(j), ldb, c + j, m, k, n, last);
    } else {
      const __mmask8 last = rem == 8 ? 0xFF : static_cast<__mmask8>((1u << rem) - 1);
      row_tiles<1>(a, panel(j), ldb, c + j, m, k, n, last);
    }
  }
}

#endif

}  // namespace

void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
          std::size_t n) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    std::fill(c, c + m * n, 0.0);
    return;
  }
#if defined(__AVX512F__)
  gemm_avx512(a, [b](std::size_t j) { return b + j; }, n, c, m, k, n);
#else
  gemm_scalar(a, b, c, m, k, n);
#endif
}

PackedMatrix pack_matrix(const double* b, std::size_t k, std::size_t n) {
  PackedMatrix p;
  p.k = k;
  p.n = n;
  const std::size_t panels = (n + kPanel - 1) / kPanel;
  p.data.assign(panels * k * kPanel, 0.0);
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t j = 0; j < n; ++j)
      p.data[(j / kPanel) * k * kPanel + r * kPanel + j % kPanel] = b[r * n + j];
  return p;
}

void gemm(const double* a, const PackedMatrix& b, double* c, std::size_t m) {
  const std::size_t k = b.k;
  const std::size_t n = b.n;
  if (m == 0 || n == 0) return;
  if (k == 0) {
    std::fill(c, c + m * n, 0.0);
    return;
  }
  const double* base = b.data.data();
#if defined(__AVX512F__)
  gemm_avx512(a, [base, k](std::size_t j) { return base + j * k; }, kPanel, c, m, k, n);
#else
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      c[i * n + j] = dot_chain(a + i * k, base + (j / kPanel) * k * kPanel + j % kPanel, k, kPanel);
#endif
}

void transpose(const double* src, double* dst, std::size_t rows, std::size_t cols) {
  constexpr std::size_t kTile = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += kTile) {
    const std::size_t r1 = std::min(rows, r0 + kTile);
    for (std::size_t c0 = 0; c0 < cols; c0 += kTile) {
      const std::size_t c1 = std::min(cols, c0 + kTile);
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
    }
  }
}

void rmsnorm_rows(const double* x, const double* gain, double* out, std::size_t rows,
                  std::size_t n, double eps, double* inv_rms) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * n;
    double* yr = out + r * n;
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += xr[j] * xr[j];
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(n) + eps);
    if (inv_rms) inv_rms[r] = inv;
    for (std::size_t j = 0; j < n; ++j) yr[j] = xr[j] * inv * gain[j];
  }
}

bool softmax_row(const double* in, double* out, std::size_t n) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, in[j]);
  if (mx == -std::numeric_limits<double>::infinity()) return false;
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = std::exp(in[j] - mx);
    sum += out[j];
  }
  const double inv = 1.0 / sum;
  for (std::size_t j = 0; j < n; ++j) out[j] *= inv;
  return true;
}

}  // namespace afflow::kernels
