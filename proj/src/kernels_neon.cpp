#include "uada/kernels.hpp"

#include <arm_neon.h>

// NEON variants (2-wide f64). Same ordering contract as the AVX2 backend:
// identical per-element operation sequence to the scalar kernels, separate
// mul and add, ascending-k accumulation, hence bitwise-equal results.

namespace uada::kernels::detail {

namespace {

void v_matmul_impl(const double* a, const double* b, double* c,
                   std::size_t m, std::size_t k, std::size_t n, bool zero_c) {
  const std::size_t n2 = n / 2 * 2;
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    if (zero_c)
      for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const float64x2_t avv = vdupq_n_f64(av);
      const double* brow = b + p * n;
      std::size_t j = 0;
      for (; j < n2; j += 2) {
        float64x2_t cv = vld1q_f64(crow + j);
        float64x2_t bv = vld1q_f64(brow + j);
        cv = vaddq_f64(cv, vmulq_f64(avv, bv));
        vst1q_f64(crow + j, cv);
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
  const std::size_t n2 = n / 2 * 2;
  std::size_t i = 0;
  for (; i < n2; i += 2)
    vst1q_f64(y + i, vaddq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  for (; i < n; ++i) y[i] = a[i] + b[i];
}

void v_sub(const double* a, const double* b, double* y, std::size_t n) {
  const std::size_t n2 = n / 2 * 2;
  std::size_t i = 0;
  for (; i < n2; i += 2)
    vst1q_f64(y + i, vsubq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  for (; i < n; ++i) y[i] = a[i] - b[i];
}

void v_mul(const double* a, const double* b, double* y, std::size_t n) {
  const std::size_t n2 = n / 2 * 2;
  std::size_t i = 0;
  for (; i < n2; i += 2)
    vst1q_f64(y + i, vmulq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
  for (; i < n; ++i) y[i] = a[i] * b[i];
}

void v_mul_acc(const double* a, const double* b, double* y, std::size_t n) {
  const std::size_t n2 = n / 2 * 2;
  std::size_t i = 0;
  for (; i < n2; i += 2) {
    float64x2_t yv = vld1q_f64(y + i);
    yv = vaddq_f64(yv, vmulq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
    vst1q_f64(y + i, yv);
  }
  for (; i < n; ++i) y[i] += a[i] * b[i];
}

void v_axpy(double c, const double* x, double* y, std::size_t n) {
  const float64x2_t cv = vdupq_n_f64(c);
  const std::size_t n2 = n / 2 * 2;
  std::size_t i = 0;
  for (; i < n2; i += 2) {
    float64x2_t yv = vld1q_f64(y + i);
    yv = vaddq_f64(yv, vmulq_f64(cv, vld1q_f64(x + i)));
    vst1q_f64(y + i, yv);
  }
  for (; i < n; ++i) y[i] += c * x[i];
}

void v_scale(double c, const double* x, double* y, std::size_t n) {
  const float64x2_t cv = vdupq_n_f64(c);
  const std::size_t n2 = n / 2 * 2;
  std::size_t i = 0;
  for (; i < n2; i += 2)
    vst1q_f64(y + i, vmulq_f64(cv, vld1q_f64(x + i)));
  for (; i < n; ++i) y[i] = c * x[i];
}

void v_leaky_relu(const double* x, double slope, double* y, std::size_t n) {
  const float64x2_t sv = vdupq_n_f64(slope);
  const float64x2_t zero = vdupq_n_f64(0.0);
  const std::size_t n2 = n / 2 * 2;
  std::size_t i = 0;
  for (; i < n2; i += 2) {
    float64x2_t xv = vld1q_f64(x + i);
    uint64x2_t mask = vcgtq_f64(xv, zero);
    float64x2_t neg = vmulq_f64(sv, xv);
    vst1q_f64(y + i, vbslq_f64(mask, xv, neg));
  }
  for (; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : slope * x[i];
}

void v_leaky_relu_bwd(const double* x, const double* g, double slope,
                      double* acc, std::size_t n) {
  const float64x2_t sv = vdupq_n_f64(slope);
  const float64x2_t zero = vdupq_n_f64(0.0);
  const std::size_t n2 = n / 2 * 2;
  std::size_t i = 0;
  for (; i < n2; i += 2) {
    float64x2_t xv = vld1q_f64(x + i);
    float64x2_t gv = vld1q_f64(g + i);
    uint64x2_t mask = vcgtq_f64(xv, zero);
    float64x2_t contrib = vbslq_f64(mask, gv, vmulq_f64(sv, gv));
    vst1q_f64(acc + i, vaddq_f64(vld1q_f64(acc + i), contrib));
  }
  for (; i < n; ++i) acc[i] += x[i] > 0.0 ? g[i] : slope * g[i];
}

const Table kNeon = {
    v_matmul, v_matmul_acc, v_add,   v_sub,         v_mul,
    v_mul_acc, v_axpy,      v_scale, v_leaky_relu,  v_leaky_relu_bwd,
    "neon",
};

}  // namespace

const Table* simd_table() { return &kNeon; }

}  // namespace uada::kernels::detail
