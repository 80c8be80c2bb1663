#include "uada/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

#include "uada/kernels.hpp"

namespace uada {

namespace {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

}  // namespace

double GrlCoefficient::value(double progress) const {
  if (mode == Mode::constant) return lambda;
  return alpha * (2.0 / (1.0 + std::exp(-gamma * progress)) - 1.0);
}

GrlCoefficient GrlCoefficient::constant(double lambda) {
  GrlCoefficient c;
  c.mode = Mode::constant;
  c.lambda = lambda;
  return c;
}

GrlCoefficient GrlCoefficient::scheduled(double alpha, double gamma) {
  GrlCoefficient c;
  c.mode = Mode::scheduled;
  c.alpha = alpha;
  c.gamma = gamma;
  return c;
}

const std::vector<double>& Tensor::data() const {
  if (!g_) throw std::logic_error("invalid tensor");
  return g_->node(id_).data;
}

const std::vector<double>& Tensor::grad() const {
  if (!g_) throw std::logic_error("invalid tensor");
  const auto& g = g_->node(id_).grad;
  if (g.empty()) throw std::logic_error("gradient not available: backward has not reached this node");
  return g;
}

const std::vector<std::size_t>& Tensor::shape() const {
  if (!g_) throw std::logic_error("invalid tensor");
  return g_->node(id_).shape;
}

std::size_t Tensor::size() const { return data().size(); }

bool Tensor::requires_grad() const {
  if (!g_) throw std::logic_error("invalid tensor");
  return g_->node(id_).requires_grad;
}

double Tensor::item() const {
  const auto& d = data();
  if (d.size() != 1) throw std::invalid_argument("item() requires a size-1 tensor");
  return d[0];
}

Tensor Graph::make(std::vector<double> data, std::vector<std::size_t> shape,
                   bool requires_grad, std::function<void(Graph&, int)> bwd) {
  if (data.size() != shape_numel(shape))
    throw std::invalid_argument("tensor data size does not match shape");
  Node n;
  n.data = std::move(data);
  n.shape = std::move(shape);
  n.requires_grad = requires_grad;
  n.backward_fn = std::move(bwd);
  nodes_.push_back(std::move(n));
  return Tensor(this, static_cast<int>(nodes_.size()) - 1);
}

void Graph::check_same_graph(Tensor t) const {
  if (t.g_ != this) throw std::invalid_argument("tensor belongs to a different graph");
}

std::vector<double>& Graph::grad_buf(int id) {
  Node& n = node(id);
  if (n.grad.empty()) n.grad.assign(n.data.size(), 0.0);
  return n.grad;
}

Tensor Graph::input(std::vector<double> data, std::vector<std::size_t> shape,
                    bool requires_grad) {
  return make(std::move(data), std::move(shape), requires_grad, nullptr);
}

Tensor Graph::constant(std::vector<double> data, std::vector<std::size_t> shape) {
  return make(std::move(data), std::move(shape), false, nullptr);
}

Tensor Graph::scalar(double v) { return constant({v}, {1}); }

Tensor Graph::matmul(Tensor a, Tensor b) {
  check_same_graph(a);
  check_same_graph(b);
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    throw std::invalid_argument("matmul: incompatible shapes");
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  std::vector<double> out(m * n);
  kernels::active().matmul(a.data().data(), b.data().data(), out.data(), m, k, n);
  const int ia = a.id_, ib = b.id_;
  const bool rg = a.requires_grad() || b.requires_grad();
  return make(std::move(out), {m, n}, rg, [ia, ib, m, k, n](Graph& g, int self) {
    const auto& gc = g.node(self).grad;
    if (g.node(ia).requires_grad) {
      // dA += dC . B^T
      std::vector<double> bt(k * n);
      kernels::transpose(g.node(ib).data.data(), bt.data(), k, n);
      kernels::active().matmul_acc(gc.data(), bt.data(), g.grad_buf(ia).data(), m, n, k);
    }
    if (g.node(ib).requires_grad) {
      // dB += A^T . dC
      std::vector<double> at(m * k);
      kernels::transpose(g.node(ia).data.data(), at.data(), m, k);
      kernels::active().matmul_acc(at.data(), gc.data(), g.grad_buf(ib).data(), k, m, n);
    }
  });
}

// kind: 0 add, 1 sub, 2 mul
Tensor Graph::binary_elementwise(Tensor a, Tensor b, int kind) {
  check_same_graph(a);
  check_same_graph(b);
  const auto& da = a.data();
  const auto& db = b.data();
  const bool a_scalar = da.size() == 1;
  const bool b_scalar = db.size() == 1;
  if (!(a.shape() == b.shape() || a_scalar || b_scalar))
    throw std::invalid_argument("elementwise: shapes differ and neither operand is scalar");

  const auto& out_shape = b_scalar || !a_scalar ? a.shape() : b.shape();
  const std::size_t n = shape_numel(out_shape);
  std::vector<double> out(n);
  const auto& K = kernels::active();
  if (!a_scalar && !b_scalar) {
    if (kind == 0) K.add(da.data(), db.data(), out.data(), n);
    else if (kind == 1) K.sub(da.data(), db.data(), out.data(), n);
    else K.mul(da.data(), db.data(), out.data(), n);
  } else if (b_scalar && !a_scalar) {
    const double c = db[0];
    for (std::size_t i = 0; i < n; ++i)
      out[i] = kind == 0 ? da[i] + c : kind == 1 ? da[i] - c : da[i] * c;
  } else if (a_scalar && !b_scalar) {
    const double c = da[0];
    for (std::size_t i = 0; i < n; ++i)
      out[i] = kind == 0 ? c + db[i] : kind == 1 ? c - db[i] : c * db[i];
  } else {
    out[0] = kind == 0 ? da[0] + db[0] : kind == 1 ? da[0] - db[0] : da[0] * db[0];
  }

  const int ia = a.id_, ib = b.id_;
  const bool rg = a.requires_grad() || b.requires_grad();
  return make(std::move(out), out_shape, rg, [ia, ib, kind](Graph& g, int self) {
    const auto& gc = g.node(self).grad;
    const std::size_t n = gc.size();
    const auto& da = g.node(ia).data;
    const auto& db = g.node(ib).data;
    const auto& K = kernels::active();
    if (g.node(ia).requires_grad) {
      auto& ga = g.grad_buf(ia);
      if (da.size() == n) {
        if (kind == 0 || kind == 1) K.axpy(1.0, gc.data(), ga.data(), n);
        else if (db.size() == n) K.mul_acc(gc.data(), db.data(), ga.data(), n);
        else K.axpy(db[0], gc.data(), ga.data(), n);
      } else {
        // scalar a broadcast over b
        double s = 0.0;
        if (kind == 2)
          for (std::size_t i = 0; i < n; ++i) s += gc[i] * db[i];
        else
          for (std::size_t i = 0; i < n; ++i) s += gc[i];
        ga[0] += s;
      }
    }
    if (g.node(ib).requires_grad) {
      auto& gb = g.grad_buf(ib);
      if (db.size() == n) {
        if (kind == 0) K.axpy(1.0, gc.data(), gb.data(), n);
        else if (kind == 1) K.axpy(-1.0, gc.data(), gb.data(), n);
        else if (da.size() == n) K.mul_acc(gc.data(), da.data(), gb.data(), n);
        else K.axpy(da[0], gc.data(), gb.data(), n);
      } else {
        double s = 0.0;
        if (kind == 2)
          for (std::size_t i = 0; i < n; ++i) s += gc[i] * da[i];
        else
          for (std::size_t i = 0; i < n; ++i) s += gc[i];
        gb[0] += kind == 1 ? -s : s;
      }
    }
  });
}

Tensor Graph::add(Tensor a, Tensor b) { return binary_elementwise(a, b, 0); }
Tensor Graph::sub(Tensor a, Tensor b) { return binary_elementwise(a, b, 1); }
Tensor Graph::mul(Tensor a, Tensor b) { return binary_elementwise(a, b, 2); }

Tensor Graph::square(Tensor a) {
  check_same_graph(a);
  const auto& da = a.data();
  const std::size_t n = da.size();
  std::vector<double> out(n);
  kernels::active().mul(da.data(), da.data(), out.data(), n);
  const int ia = a.id_;
  return make(std::move(out), a.shape(), a.requires_grad(), [ia](Graph& g, int self) {
    if (!g.node(ia).requires_grad) return;
    const auto& gc = g.node(self).grad;
    const auto& da = g.node(ia).data;
    const std::size_t n = gc.size();
    std::vector<double> two_x(n);
    kernels::active().scale(2.0, da.data(), two_x.data(), n);
    kernels::active().mul_acc(gc.data(), two_x.data(), g.grad_buf(ia).data(), n);
  });
}

Tensor Graph::leaky_relu(Tensor a, double slope) {
  check_same_graph(a);
  const auto& da = a.data();
  const std::size_t n = da.size();
  std::vector<double> out(n);
  kernels::active().leaky_relu(da.data(), slope, out.data(), n);
  const int ia = a.id_;
  return make(std::move(out), a.shape(), a.requires_grad(), [ia, slope](Graph& g, int self) {
    if (!g.node(ia).requires_grad) return;
    const auto& gc = g.node(self).grad;
    const auto& da = g.node(ia).data;
    kernels::active().leaky_relu_bwd(da.data(), gc.data(), slope,
                                     g.grad_buf(ia).data(), gc.size());
  });
}

Tensor Graph::sigmoid(Tensor a) {
  check_same_graph(a);
  const auto& da = a.data();
  const std::size_t n = da.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = 1.0 / (1.0 + std::exp(-da[i]));
  const int ia = a.id_;
  return make(std::move(out), a.shape(), a.requires_grad(), [ia](Graph& g, int self) {
    if (!g.node(ia).requires_grad) return;
    const auto& gc = g.node(self).grad;
    const auto& y = g.node(self).data;
    auto& ga = g.grad_buf(ia);
    for (std::size_t i = 0; i < gc.size(); ++i)
      ga[i] += gc[i] * (y[i] * (1.0 - y[i]));
  });
}

Tensor Graph::log(Tensor a) {
  check_same_graph(a);
  const auto& da = a.data();
  const std::size_t n = da.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(da[i] > 0.0)) throw std::domain_error("log: input element <= 0");
    out[i] = std::log(da[i]);
  }
  const int ia = a.id_;
  return make(std::move(out), a.shape(), a.requires_grad(), [ia](Graph& g, int self) {
    if (!g.node(ia).requires_grad) return;
    const auto& gc = g.node(self).grad;
    const auto& da = g.node(ia).data;
    auto& ga = g.grad_buf(ia);
    for (std::size_t i = 0; i < gc.size(); ++i) ga[i] += gc[i] / da[i];
  });
}

Tensor Graph::abs(Tensor a) {
  check_same_graph(a);
  const auto& da = a.data();
  const std::size_t n = da.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = std::fabs(da[i]);
  const int ia = a.id_;
  return make(std::move(out), a.shape(), a.requires_grad(), [ia](Graph& g, int self) {
    if (!g.node(ia).requires_grad) return;
    const auto& gc = g.node(self).grad;
    const auto& da = g.node(ia).data;
    auto& ga = g.grad_buf(ia);
    for (std::size_t i = 0; i < gc.size(); ++i) {
      if (da[i] > 0.0) ga[i] += gc[i];
      else if (da[i] < 0.0) ga[i] -= gc[i];
      // subgradient 0 at exactly 0
    }
  });
}

Tensor Graph::scalar_mul(Tensor a, double c) {
  check_same_graph(a);
  const auto& da = a.data();
  const std::size_t n = da.size();
  std::vector<double> out(n);
  kernels::active().scale(c, da.data(), out.data(), n);
  const int ia = a.id_;
  return make(std::move(out), a.shape(), a.requires_grad(), [ia, c](Graph& g, int self) {
    if (!g.node(ia).requires_grad) return;
    const auto& gc = g.node(self).grad;
    kernels::active().axpy(c, gc.data(), g.grad_buf(ia).data(), gc.size());
  });
}

Tensor Graph::clamp(Tensor a, double lo, double hi) {
  check_same_graph(a);
  if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
  const auto& da = a.data();
  const std::size_t n = da.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = da[i] < lo ? lo : (da[i] > hi ? hi : da[i]);
  const int ia = a.id_;
  return make(std::move(out), a.shape(), a.requires_grad(), [ia, lo, hi](Graph& g, int self) {
    if (!g.node(ia).requires_grad) return;
    const auto& gc = g.node(self).grad;
    const auto& da = g.node(ia).data;
    auto& ga = g.grad_buf(ia);
    for (std::size_t i = 0; i < gc.size(); ++i)
      if (da[i] >= lo && da[i] <= hi) ga[i] += gc[i];
  });
}

Tensor Graph::sum(Tensor a) {
  check_same_graph(a);
  const auto& da = a.data();
  if (da.empty()) throw std::invalid_argument("sum: empty tensor");
  const double s = kernels::sum(da.data(), da.size());
  const int ia = a.id_;
  return make({s}, {1}, a.requires_grad(), [ia](Graph& g, int self) {
    if (!g.node(ia).requires_grad) return;
    const double g0 = g.node(self).grad[0];
    auto& ga = g.grad_buf(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g0;
  });
}

Tensor Graph::mean(Tensor a) {
  check_same_graph(a);
  const auto& da = a.data();
  if (da.empty()) throw std::invalid_argument("mean: empty tensor");
  const double n = static_cast<double>(da.size());
  const double s = kernels::sum(da.data(), da.size()) / n;
  const int ia = a.id_;
  return make({s}, {1}, a.requires_grad(), [ia, n](Graph& g, int self) {
    if (!g.node(ia).requires_grad) return;
    const double q = g.node(self).grad[0] / n;
    auto& ga = g.grad_buf(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += q;
  });
}

Tensor Graph::concat(Tensor a, Tensor b, std::size_t axis) {
  check_same_graph(a);
  check_same_graph(b);
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != sb.size()) throw std::invalid_argument("concat: rank mismatch");
  const std::size_t rank = sa.size();
  if (rank < 1 || rank > 2 || axis >= rank)
    throw std::invalid_argument("concat: rank-1/2 tensors with a valid axis required");
  for (std::size_t d = 0; d < rank; ++d)
    if (d != axis && sa[d] != sb[d])
      throw std::invalid_argument("concat: non-concat dimensions differ");

  const auto& da = a.data();
  const auto& db = b.data();
  const int ia = a.id_, ib = b.id_;
  const bool rg = a.requires_grad() || b.requires_grad();

  if (rank == 1 || axis == 0) {
    // Contiguous stack: rank-1, or rank-2 stacking rows.
    std::vector<double> out;
    out.reserve(da.size() + db.size());
    out.insert(out.end(), da.begin(), da.end());
    out.insert(out.end(), db.begin(), db.end());
    std::vector<std::size_t> shape = sa;
    shape[0] = sa[0] + sb[0];
    const std::size_t p = da.size();
    return make(std::move(out), std::move(shape), rg, [ia, ib, p](Graph& g, int self) {
      const auto& gc = g.node(self).grad;
      if (g.node(ia).requires_grad) {
        auto& ga = g.grad_buf(ia);
        for (std::size_t i = 0; i < p; ++i) ga[i] += gc[i];
      }
      if (g.node(ib).requires_grad) {
        auto& gb = g.grad_buf(ib);
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gc[p + i];
      }
    });
  }

  // rank-2, axis 1: rows interleave.
  const std::size_t rows = sa[0], ca = sa[1], cb = sb[1];
  std::vector<double> out(rows * (ca + cb));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < ca; ++j) out[r * (ca + cb) + j] = da[r * ca + j];
    for (std::size_t j = 0; j < cb; ++j) out[r * (ca + cb) + ca + j] = db[r * cb + j];
  }
  return make(std::move(out), {rows, ca + cb}, rg, [ia, ib, rows, ca, cb](Graph& g, int self) {
    const auto& gc = g.node(self).grad;
    if (g.node(ia).requires_grad) {
      auto& ga = g.grad_buf(ia);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < ca; ++j) ga[r * ca + j] += gc[r * (ca + cb) + j];
    }
    if (g.node(ib).requires_grad) {
      auto& gb = g.grad_buf(ib);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < cb; ++j) gb[r * cb + j] += gc[r * (ca + cb) + ca + j];
    }
  });
}

Tensor Graph::grl(Tensor a, GrlCoefficient coeff, double progress) {
  check_same_graph(a);
  const double lam = coeff.value(progress);
  std::vector<double> out = a.data();  // bitwise identity
  const int ia = a.id_;
  return make(std::move(out), a.shape(), a.requires_grad(), [ia, lam](Graph& g, int self) {
    if (!g.node(ia).requires_grad) return;
    const auto& gc = g.node(self).grad;
    kernels::active().axpy(-lam, gc.data(), g.grad_buf(ia).data(), gc.size());
  });
}

Tensor Graph::patches3x3(Tensor a, std::size_t h, std::size_t w, std::size_t c) {
  check_same_graph(a);
  const auto& sa = a.shape();
  if (sa.size() != 2 || sa[0] != h * w || sa[1] != c)
    throw std::invalid_argument("patches3x3: input must be [h*w x c]");
  const auto& da = a.data();
  std::vector<double> out(h * w * 9 * c, 0.0);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const std::size_t row = i * w + j;
      for (int di = -1; di <= 1; ++di) {
        const long si = static_cast<long>(i) + di;
        if (si < 0 || si >= static_cast<long>(h)) continue;
        for (int dj = -1; dj <= 1; ++dj) {
          const long sj = static_cast<long>(j) + dj;
          if (sj < 0 || sj >= static_cast<long>(w)) continue;
          const std::size_t q = static_cast<std::size_t>((di + 1) * 3 + (dj + 1));
          const double* src = da.data() + (static_cast<std::size_t>(si) * w + static_cast<std::size_t>(sj)) * c;
          double* dst = out.data() + row * 9 * c + q * c;
          for (std::size_t ch = 0; ch < c; ++ch) dst[ch] = src[ch];
        }
      }
    }
  }
  const int ia = a.id_;
  return make(std::move(out), {h * w, 9 * c}, a.requires_grad(),
              [ia, h, w, c](Graph& g, int self) {
    if (!g.node(ia).requires_grad) return;
    const auto& gc = g.node(self).grad;
    auto& ga = g.grad_buf(ia);
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        const std::size_t row = i * w + j;
        for (int di = -1; di <= 1; ++di) {
          const long si = static_cast<long>(i) + di;
          if (si < 0 || si >= static_cast<long>(h)) continue;
          for (int dj = -1; dj <= 1; ++dj) {
            const long sj = static_cast<long>(j) + dj;
            if (sj < 0 || sj >= static_cast<long>(w)) continue;
            const std::size_t q = static_cast<std::size_t>((di + 1) * 3 + (dj + 1));
            const double* gsrc = gc.data() + row * 9 * c + q * c;
            double* gdst = ga.data() + (static_cast<std::size_t>(si) * w + static_cast<std::size_t>(sj)) * c;
            for (std::size_t ch = 0; ch < c; ++ch) gdst[ch] += gsrc[ch];
          }
        }
      }
    }
  });
}

Tensor Graph::broadcast_rows(Tensor v, std::size_t rows) {
  check_same_graph(v);
  if (v.shape().size() != 1)
    throw std::invalid_argument("broadcast_rows: rank-1 input required");
  const auto& dv = v.data();
  const std::size_t f = dv.size();
  std::vector<double> out(rows * f);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < f; ++j) out[r * f + j] = dv[j];
  const int iv = v.id_;
  return make(std::move(out), {rows, f}, v.requires_grad(),
              [iv, rows, f](Graph& g, int self) {
    if (!g.node(iv).requires_grad) return;
    const auto& gc = g.node(self).grad;
    auto& gv = g.grad_buf(iv);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < f; ++j) gv[j] += gc[r * f + j];
  });
}

Tensor Graph::gather_rows(Tensor a, std::vector<std::size_t> idx) {
  check_same_graph(a);
  const auto& sa = a.shape();
  if (sa.size() != 2) throw std::invalid_argument("gather_rows: rank-2 input required");
  if (idx.empty()) throw std::invalid_argument("gather_rows: empty index list");
  const std::size_t f = sa[1];
  for (std::size_t r : idx)
    if (r >= sa[0]) throw std::invalid_argument("gather_rows: index out of range");
  const auto& da = a.data();
  std::vector<double> out(idx.size() * f);
  for (std::size_t t = 0; t < idx.size(); ++t)
    for (std::size_t j = 0; j < f; ++j) out[t * f + j] = da[idx[t] * f + j];
  const int ia = a.id_;
  const std::size_t nout = idx.size();
  return make(std::move(out), {nout, f}, a.requires_grad(),
              [ia, idx = std::move(idx), f](Graph& g, int self) {
    if (!g.node(ia).requires_grad) return;
    const auto& gc = g.node(self).grad;
    auto& ga = g.grad_buf(ia);
    for (std::size_t t = 0; t < idx.size(); ++t)
      for (std::size_t j = 0; j < f; ++j) ga[idx[t] * f + j] += gc[t * f + j];
  });
}

Tensor Graph::mean_rows(Tensor a) {
  check_same_graph(a);
  const auto& sa = a.shape();
  if (sa.size() != 2 || sa[0] == 0)
    throw std::invalid_argument("mean_rows: nonempty rank-2 input required");
  const std::size_t n = sa[0], f = sa[1];
  const auto& da = a.data();
  std::vector<double> out(f, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < f; ++j) out[j] += da[r * f + j];
  const double dn = static_cast<double>(n);
  for (std::size_t j = 0; j < f; ++j) out[j] /= dn;
  const int ia = a.id_;
  return make(std::move(out), {f}, a.requires_grad(), [ia, n, f, dn](Graph& g, int self) {
    if (!g.node(ia).requires_grad) return;
    const auto& gc = g.node(self).grad;
    auto& ga = g.grad_buf(ia);
    std::vector<double> q(f);
    for (std::size_t j = 0; j < f; ++j) q[j] = gc[j] / dn;
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < f; ++j) ga[r * f + j] += q[j];
  });
}

void Graph::backward(Tensor root) {
  check_same_graph(root);
  if (backward_done_) throw std::logic_error("backward already called on this graph");
  if (root.size() != 1) throw std::invalid_argument("backward: root must be scalar");
  if (!root.requires_grad())
    throw std::invalid_argument("backward: root does not require gradients");
  backward_done_ = true;
  const int rid = root.id_;
  for (int id = 0; id <= rid; ++id) {
    Node& n = node(id);
    if (n.requires_grad) n.grad.assign(n.data.size(), 0.0);
  }
  node(rid).grad[0] = 1.0;
  for (int id = rid; id >= 0; --id) {
    Node& n = node(id);
    if (n.requires_grad && n.backward_fn) n.backward_fn(*this, id);
  }
}

double grad_check(const std::function<Tensor(Graph&, Tensor)>& f,
                  const std::vector<double>& x,
                  const std::vector<std::size_t>& shape, double eps) {
  if (x.size() != shape_numel(shape))
    throw std::invalid_argument("grad_check: data size does not match shape");
  std::vector<double> analytic;
  {
    Graph g;
    Tensor leaf = g.input(x, shape, true);
    Tensor root = f(g, leaf);
    if (root.size() != 1) throw std::invalid_argument("grad_check: f must produce a scalar");
    g.backward(root);
    analytic = leaf.grad();
  }
  auto eval = [&](const std::vector<double>& xv) {
    Graph g;
    Tensor leaf = g.input(xv, shape, false);
    return f(g, leaf).item();
  };
  double max_rel = 0.0;
  std::vector<double> xv = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    xv[i] = x[i] + eps;
    const double fp = eval(xv);
    xv[i] = x[i] - eps;
    const double fm = eval(xv);
    xv[i] = x[i];
    const double numeric = (fp - fm) / (2.0 * eps);
    const double denom = std::max({1e-3, std::fabs(analytic[i]), std::fabs(numeric)});
    max_rel = std::max(max_rel, std::fabs(analytic[i] - numeric) / denom);
  }
  return max_rel;
}

}  // namespace uada
