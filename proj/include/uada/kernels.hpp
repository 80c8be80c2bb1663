#pragma once

#include <cstddef>

// Dense numeric kernels with a scalar reference implementation and SIMD
// variants selected at runtime. Every dispatched kernel is order-preserving:
// the SIMD path performs the same IEEE operations on each element in the same
// sequence as the scalar path (no FMA, no reassociation), so results are
// bitwise identical across backends. Operations whose result depends on libm
// rounding (exp, log) or on a reduction order are deliberately not dispatched.

namespace uada::kernels {

enum class Backend { scalar, simd };

struct Table {
  // C = A*B and C += A*B for row-major A[m x k], B[k x n], C[m x n].
  // Contract: each C[i][j] accumulates its k products in ascending-k order.
  void (*matmul)(const double* a, const double* b, double* c,
                 std::size_t m, std::size_t k, std::size_t n);
  void (*matmul_acc)(const double* a, const double* b, double* c,
                     std::size_t m, std::size_t k, std::size_t n);

  void (*add)(const double* a, const double* b, double* y, std::size_t n);
  void (*sub)(const double* a, const double* b, double* y, std::size_t n);
  void (*mul)(const double* a, const double* b, double* y, std::size_t n);
  // y += a .* b
  void (*mul_acc)(const double* a, const double* b, double* y, std::size_t n);
  // y += c * x
  void (*axpy)(double c, const double* x, double* y, std::size_t n);
  // y = c * x
  void (*scale)(double c, const double* x, double* y, std::size_t n);

  void (*leaky_relu)(const double* x, double slope, double* y, std::size_t n);
  // acc += g .* (x > 0 ? 1 : slope)
  void (*leaky_relu_bwd)(const double* x, const double* g, double slope,
                         double* acc, std::size_t n);

  const char* name;
};

const Table& active();
Backend active_backend();
// Throws std::runtime_error if Backend::simd is requested on a machine
// without a usable SIMD table.
void set_backend(Backend b);
bool simd_available();

// Scalar-only helpers (single implementation, never dispatched).
void transpose(const double* a, double* at, std::size_t m, std::size_t n);
double sum(const double* x, std::size_t n);

namespace detail {
const Table* scalar_table();
const Table* simd_table();  // nullptr when unavailable at runtime
}

}  // namespace uada::kernels
