#include "uada/kernels.hpp"

#include <stdexcept>

namespace uada::kernels {

namespace {

void s_matmul(const double* a, const double* b, double* c,
              std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void s_matmul_acc(const double* a, const double* b, double* c,
                  std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void s_add(const double* a, const double* b, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
}

void s_sub(const double* a, const double* b, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] - b[i];
}

void s_mul(const double* a, const double* b, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
}

void s_mul_acc(const double* a, const double* b, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a[i] * b[i];
}

void s_axpy(double c, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += c * x[i];
}

void s_scale(double c, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = c * x[i];
}

void s_leaky_relu(const double* x, double slope, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : slope * x[i];
}

void s_leaky_relu_bwd(const double* x, const double* g, double slope,
                      double* acc, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    acc[i] += x[i] > 0.0 ? g[i] : slope * g[i];
}

const Table kScalar = {
    s_matmul, s_matmul_acc, s_add,   s_sub,         s_mul,
    s_mul_acc, s_axpy,      s_scale, s_leaky_relu,  s_leaky_relu_bwd,
    "scalar",
};

struct Dispatch {
  const Table* table;
  Backend backend;
};

Dispatch& dispatch() {
  static Dispatch d = [] {
    const Table* simd = detail::simd_table();
    if (simd != nullptr) return Dispatch{simd, Backend::simd};
    return Dispatch{&kScalar, Backend::scalar};
  }();
  return d;
}

}  // namespace

namespace detail {

const Table* scalar_table() { return &kScalar; }

#ifndef UADA_HAVE_SIMD_TU
const Table* simd_table() { return nullptr; }
#endif

}  // namespace detail

const Table& active() { return *dispatch().table; }

Backend active_backend() { return dispatch().backend; }

void set_backend(Backend b) {
  if (b == Backend::scalar) {
    dispatch() = {&kScalar, Backend::scalar};
    return;
  }
  const Table* simd = detail::simd_table();
  if (simd == nullptr) throw std::runtime_error("SIMD backend unavailable on this machine");
  dispatch() = {simd, Backend::simd};
}

bool simd_available() { return detail::simd_table() != nullptr; }

void transpose(const double* a, double* at, std::size_t m, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) at[j * m + i] = a[i * n + j];
}

double sum(const double* x, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i];
  return s;
}

}  // namespace uada::kernels
