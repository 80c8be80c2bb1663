#include "uada/kernels.hpp"

#include <immintrin.h>

// AVX2 variants. Each kernel mirrors the scalar loop structure exactly:
// vector lanes only batch independent elements, and every C[i][j] still
// accumulates its products in ascending-k order with separate mul and add,
// so outputs match the scalar backend bit for bit.

namespace uada::kernels::detail {

namespace {

void v_matmul_impl(const double* a, const double* b, double* c,
                   std::size_t m, std::size_t k, std::size_t n, bool zero_c) {
  const std::size_t n4 = n / 4 * 4;
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    if (zero_c) {
      std::size_t j = 0;
      __m256d z = _mm256_setzero_pd();
      for (; j < n4; j += 4) _mm256_storeu_pd(crow + j, z);
      for (; j < n; ++j) crow[j] = 0.0;
    }
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const __m256d avv = _mm256_set1_pd(av);
      const double* brow = b + p * n;
      std::size_t j = 0;
      for (; j < n4; j += 4) {
        __m256d cv = _mm256_loadu_pd(crow + j);
        __m256d bv = _mm256_loadu_pd(brow + j);
        cv = _mm256_add_pd(cv, _mm256_mul_pd(avv, bv));
        _mm256_storeu_pd(crow + j, cv);
      }
      for (; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void v_matmul(const double* a, const double* b, double* c,
              std::size_t m, std::size_t k, std::size_t n) {
  v_matmul_impl(a, b, c, m, k, n, true);
}

void v_matmul_acc(const double* a, const double* b, double* c,
                  std::size_t m, std::size_t k, std::size_t n) {
  v_matmul_impl(a, b, c, m, k, n, false);
}

void v_add(const double* a, const double* b, double* y, std::size_t n) {
  const std::size_t n4 = n / 4 * 4;
  std::size_t i = 0;
  for (; i < n4; i += 4)
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) y[i] = a[i] + b[i];
}

void v_sub(const double* a, const double* b, double* y, std::size_t n) {
  const std::size_t n4 = n / 4 * 4;
  std::size_t i = 0;
  for (; i < n4; i += 4)
    _mm256_storeu_pd(y + i, _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) y[i] = a[i] - b[i];
}

void v_mul(const double* a, const double* b, double* y, std::size_t n) {
  const std::size_t n4 = n / 4 * 4;
  std::size_t i = 0;
  for (; i < n4; i += 4)
    _mm256_storeu_pd(y + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) y[i] = a[i] * b[i];
}

void v_mul_acc(const double* a, const double* b, double* y, std::size_t n) {
  const std::size_t n4 = n / 4 * 4;
  std::size_t i = 0;
  for (; i < n4; i += 4) {
    __m256d yv = _mm256_loadu_pd(y + i);
    yv = _mm256_add_pd(yv, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    _mm256_storeu_pd(y + i, yv);
  }
  for (; i < n; ++i) y[i] += a[i] * b[i];
}

void v_axpy(double c, const double* x, double* y, std::size_t n) {
  const __m256d cv = _mm256_set1_pd(c);
  const std::size_t n4 = n / 4 * 4;
  std::size_t i = 0;
  for (; i < n4; i += 4) {
    __m256d yv = _mm256_loadu_pd(y + i);
    yv = _mm256_add_pd(yv, _mm256_mul_pd(cv, _mm256_loadu_pd(x + i)));
    _mm256_storeu_pd(y + i, yv);
  }
  for (; i < n; ++i) y[i] += c * x[i];
}

void v_scale(double c, const double* x, double* y, std::size_t n) {
  const __m256d cv = _mm256_set1_pd(c);
  const std::size_t n4 = n / 4 * 4;
  std::size_t i = 0;
  for (; i < n4; i += 4)
    _mm256_storeu_pd(y + i, _mm256_mul_pd(cv, _mm256_loadu_pd(x + i)));
  for (; i < n; ++i) y[i] = c * x[i];
}

void v_leaky_relu(const double* x, double slope, double* y, std::size_t n) {
  const __m256d sv = _mm256_set1_pd(slope);
  const __m256d zero = _mm256_setzero_pd();
  const std::size_t n4 = n / 4 * 4;
  std::size_t i = 0;
  for (; i < n4; i += 4) {
    __m256d xv = _mm256_loadu_pd(x + i);
    __m256d mask = _mm256_cmp_pd(xv, zero, _CMP_GT_OQ);
    __m256d neg = _mm256_mul_pd(sv, xv);
    _mm256_storeu_pd(y + i, _mm256_blendv_pd(neg, xv, mask));
  }
  for (; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : slope * x[i];
}

void v_leaky_relu_bwd(const double* x, const double* g, double slope,
                      double* acc, std::size_t n) {
  const __m256d sv = _mm256_set1_pd(slope);
  const __m256d zero = _mm256_setzero_pd();
  const std::size_t n4 = n / 4 * 4;
  std::size_t i = 0;
  for (; i < n4; i += 4) {
    __m256d xv = _mm256_loadu_pd(x + i);
    __m256d gv = _mm256_loadu_pd(g + i);
    __m256d mask = _mm256_cmp_pd(xv, zero, _CMP_GT_OQ);
    __m256d contrib = _mm256_blendv_pd(_mm256_mul_pd(sv, gv), gv, mask);
    _mm256_storeu_pd(acc + i, _mm256_add_pd(_mm256_loadu_pd(acc + i), contrib));
  }
  for (; i < n; ++i) acc[i] += x[i] > 0.0 ? g[i] : slope * g[i];
}

const Table kAvx2 = {
    v_matmul, v_matmul_acc, v_add,   v_sub,         v_mul,
    v_mul_acc, v_axpy,      v_scale, v_leaky_relu,  v_leaky_relu_bwd,
    "avx2",
};

}  // namespace

const Table* simd_table() {
  if (__builtin_cpu_supports("avx2")) return &kAvx2;
  return nullptr;
}

}  // namespace uada::kernels::detail
