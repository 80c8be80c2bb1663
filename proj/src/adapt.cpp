#include "uada/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <utility>

#include "uada/evalmetrics.hpp"
#include "uada/geometry.hpp"

namespace uada {

namespace {

constexpr double kLogitClampAbs = 15.0;

double clamped_sigmoid(double logit) {
  return 1.0 / (1.0 + std::exp(-std::clamp(logit, -kLogitClampAbs, kLogitClampAbs)));
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

AlignmentMode alignment_mode_from_string(const std::string& s) {
  if (s == "none") return AlignmentMode::none;
  if (s == "conditional") return AlignmentMode::conditional;
  if (s == "marginal") return AlignmentMode::marginal;
  if (s == "combined") return AlignmentMode::combined;
  throw std::invalid_argument("unknown alignment mode: " + s);
}

std::string to_string(AlignmentMode mode) {
  switch (mode) {
    case AlignmentMode::none: return "none";
    case AlignmentMode::conditional: return "conditional";
    case AlignmentMode::marginal: return "marginal";
    case AlignmentMode::combined: return "combined";
  }
  throw std::logic_error("unreachable alignment mode");
}

DiscDesign disc_design_from_string(const std::string& s) {
  if (s == "a") return DiscDesign::a;
  if (s == "b") return DiscDesign::b;
  if (s == "c") return DiscDesign::c;
  throw std::invalid_argument("unknown discriminator design: " + s);
}

std::string to_string(DiscDesign design) {
  switch (design) {
    case DiscDesign::a: return "a";
    case DiscDesign::b: return "b";
    case DiscDesign::c: return "c";
  }
  throw std::logic_error("unreachable discriminator design");
}

void Mlp3::init(const std::string& prefix, std::size_t in, std::size_t h1,
                std::size_t h2, RngStream& rng) {
  w1 = Param(prefix + ".w1", {in, h1});
  b1 = Param(prefix + ".b1", {h1});
  w2 = Param(prefix + ".w2", {h1, h2});
  b2 = Param(prefix + ".b2", {h2});
  w3 = Param(prefix + ".w3", {h2, 1});
  b3 = Param(prefix + ".b3", {1});
  for (Param* p : params()) xavier_init(*p, rng);
}

std::vector<Param*> Mlp3::params() { return {&w1, &b1, &w2, &b2, &w3, &b3}; }

std::vector<const Param*> Mlp3::params() const {
  return {&w1, &b1, &w2, &b2, &w3, &b3};
}

Tensor mlp3_forward(Graph& g, Mlp3& mlp, const Tensor& x,
                    std::vector<Tensor>& leaves,
                    std::vector<Param*>& leaf_params) {
  const std::size_t rows = x.shape()[0];
  std::vector<Tensor> w;
  for (Param* p : mlp.params()) {
    w.push_back(g.input(p->value, p->shape, true));
    leaves.push_back(w.back());
    leaf_params.push_back(p);
  }
  const Tensor h1 =
      g.leaky_relu(g.add(g.matmul(x, w[0]), g.broadcast_rows(w[1], rows)));
  const Tensor h2 =
      g.leaky_relu(g.add(g.matmul(h1, w[2]), g.broadcast_rows(w[3], rows)));
  return g.add(g.matmul(h2, w[4]), g.broadcast_rows(w[5], rows));
}

Tensor mlp3_forward(Graph& g, const Mlp3& mlp, const Tensor& x) {
  const std::size_t rows = x.shape()[0];
  std::vector<Tensor> w;
  for (const Param* p : mlp.params()) {
    w.push_back(g.constant(p->value, p->shape));
  }
  const Tensor h1 =
      g.leaky_relu(g.add(g.matmul(x, w[0]), g.broadcast_rows(w[1], rows)));
  const Tensor h2 =
      g.leaky_relu(g.add(g.matmul(h1, w[2]), g.broadcast_rows(w[3], rows)));
  return g.add(g.matmul(h2, w[4]), g.broadcast_rows(w[5], rows));
}

void Discriminators::init(int f, AlignmentMode m, DiscDesign d, uint64_t seed) {
  if (m == AlignmentMode::none) {
    throw std::invalid_argument("discriminators need an alignment mode");
  }
  if (f < 1) throw std::invalid_argument("feature_channels must be >= 1");
  mode = m;
  design = d;
  feature_channels = f;
  instance.clear();
  RngStream rng(seed, "init/disc");
  const auto in = static_cast<std::size_t>(f) + kBoxVectorSize;
  if (m == AlignmentMode::conditional || m == AlignmentMode::combined) {
    const int n = d == DiscDesign::c ? kNumClasses : 1;
    for (int k = 0; k < n; ++k) {
      Mlp3 mlp;
      mlp.init("disc.inst" + std::to_string(k), in, kInstanceHidden1,
               kInstanceHidden2, rng);
      instance.push_back(std::move(mlp));
    }
  }
  if (m == AlignmentMode::marginal || m == AlignmentMode::combined) {
    marginal.init("disc.marg", static_cast<std::size_t>(f), kMarginalHidden1,
                  kMarginalHidden2, rng);
  }
}

std::vector<Param*> Discriminators::params() {
  std::vector<Param*> out;
  for (Mlp3& mlp : instance) {
    for (Param* p : mlp.params()) out.push_back(p);
  }
  if (mode == AlignmentMode::marginal || mode == AlignmentMode::combined) {
    for (Param* p : marginal.params()) out.push_back(p);
  }
  return out;
}

std::vector<const Param*> Discriminators::params() const {
  std::vector<const Param*> out;
  for (const Mlp3& mlp : instance) {
    for (const Param* p : mlp.params()) out.push_back(p);
  }
  if (mode == AlignmentMode::marginal || mode == AlignmentMode::combined) {
    for (const Param* p : marginal.params()) out.push_back(p);
  }
  return out;
}

std::vector<Param> discriminators_to_params(const Discriminators& d) {
  std::vector<Param> out;
  Param meta("meta.disc", {3});
  meta.value = {static_cast<double>(static_cast<int>(d.mode)),
                static_cast<double>(static_cast<int>(d.design)),
                static_cast<double>(d.feature_channels)};
  out.push_back(std::move(meta));
  for (const Param* p : d.params()) out.push_back(*p);
  return out;
}

Discriminators discriminators_from_params(const std::vector<Param>& params) {
  const Param* meta = nullptr;
  for (const Param& p : params) {
    if (p.name == "meta.disc") meta = &p;
  }
  if (!meta || meta->value.size() != 3) {
    throw std::invalid_argument("discriminator checkpoint lacks meta.disc");
  }
  Discriminators d;
  d.init(static_cast<int>(meta->value[2]),
         static_cast<AlignmentMode>(static_cast<int>(meta->value[0])),
         static_cast<DiscDesign>(static_cast<int>(meta->value[1])), 0);
  for (Param* own : d.params()) {
    const Param* found = nullptr;
    for (const Param& p : params) {
      if (p.name == own->name) found = &p;
    }
    if (!found || found->shape != own->shape) {
      throw std::invalid_argument("discriminator checkpoint tensor missing or "
                                  "mis-shaped: " +
                                  own->name);
    }
    own->value = found->value;
  }
  return d;
}

std::vector<std::size_t> footprint_cells(const GridSpec& grid, const Box3D& box) {
  const double hx = 0.5 * box.l;
  const double hy = 0.5 * box.w;
  const double c = std::abs(std::cos(box.yaw));
  const double s = std::abs(std::sin(box.yaw));
  const double ex = hx * c + hy * s;
  const double ey = hx * s + hy * c;
  const auto nx = static_cast<long>(grid.nx());
  const auto ny = static_cast<long>(grid.ny());
  const long ix_lo = std::max(
      0L, static_cast<long>(std::floor((box.cx - ex - grid.x0) / grid.cell)) - 1);
  const long ix_hi = std::min(
      nx - 1,
      static_cast<long>(std::floor((box.cx + ex - grid.x0) / grid.cell)) + 1);
  const long iy_lo = std::max(
      0L, static_cast<long>(std::floor((box.cy - ey - grid.y0) / grid.cell)) - 1);
  const long iy_hi = std::min(
      ny - 1,
      static_cast<long>(std::floor((box.cy + ey - grid.y0) / grid.cell)) + 1);
  std::vector<std::size_t> cells;
  for (long ix = ix_lo; ix <= ix_hi; ++ix) {
    for (long iy = iy_lo; iy <= iy_hi; ++iy) {
      const double x = cell_center_x(grid, static_cast<std::size_t>(ix));
      const double y = cell_center_y(grid, static_cast<std::size_t>(iy));
      if (footprint_contains(box, x, y)) {
        cells.push_back(static_cast<std::size_t>(ix) * static_cast<std::size_t>(ny) +
                        static_cast<std::size_t>(iy));
      }
    }
  }
  return cells;
}

std::optional<MaskedInstanceFeature> mask_features(Graph& g, const Tensor& fm,
                                                   const GridSpec& grid,
                                                   const Box3D& box) {
  std::vector<std::size_t> mask = footprint_cells(grid, box);
  if (mask.empty()) return std::nullopt;
  MaskedInstanceFeature out;
  out.pooled = g.mean_rows(g.gather_rows(fm, mask));
  out.mask = std::move(mask);
  return out;
}

ClassSizeMeans profile_size_means(const DomainProfile& profile) {
  ClassSizeMeans means;
  for (int c = 0; c < kNumClasses; ++c) {
    for (int j = 0; j < 3; ++j) {
      means[static_cast<std::size_t>(c)][static_cast<std::size_t>(j)] =
          profile.size_mean[static_cast<std::size_t>(c)][static_cast<std::size_t>(j)];
    }
  }
  return means;
}

InstanceBatch collect_instances(const std::vector<double>& cls_logits,
                                const std::vector<double>& reg,
                                const GridSpec& grid, double conf_floor,
                                std::size_t cap) {
  const std::size_t hw = grid.nx() * grid.ny();
  if (cls_logits.size() != hw * static_cast<std::size_t>(kNumClasses) ||
      reg.size() != hw * kRegFeatures) {
    throw std::invalid_argument("prediction buffers do not match the grid");
  }
  struct Candidate {
    std::size_t cell;
    int best;
    double score;
    std::array<double, 3> conf;
  };
  std::vector<Candidate> kept;
  for (std::size_t cell = 0; cell < hw; ++cell) {
    std::array<double, 3> conf;
    for (int k = 0; k < kNumClasses; ++k) {
      conf[static_cast<std::size_t>(k)] =
          clamped_sigmoid(cls_logits[cell * kNumClasses + static_cast<std::size_t>(k)]);
    }
    int best = 0;
    for (int k = 1; k < kNumClasses; ++k) {
      if (conf[static_cast<std::size_t>(k)] > conf[static_cast<std::size_t>(best)]) best = k;
    }
    const double score = conf[static_cast<std::size_t>(best)];
    if (!(score >= conf_floor)) continue;
    kept.push_back({cell, best, score, conf});
  }
  if (kept.size() > cap) {
    std::sort(kept.begin(), kept.end(), [](const Candidate& a, const Candidate& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.cell < b.cell;
    });
    kept.resize(cap);
    std::sort(kept.begin(), kept.end(),
              [](const Candidate& a, const Candidate& b) { return a.cell < b.cell; });
  }
  InstanceBatch batch;
  for (const Candidate& c : kept) {
    std::array<double, kRegFeatures> r;
    for (std::size_t j = 0; j < kRegFeatures; ++j) {
      r[j] = reg[c.cell * kRegFeatures + j];
    }
    const Box3D box = decode_box(r, cell_center_x(grid, c.cell / grid.ny()),
                                 cell_center_y(grid, c.cell % grid.ny()), grid.cell);
    std::vector<std::size_t> mask = footprint_cells(grid, box);
    if (mask.empty()) {
      ++batch.skipped_empty_mask;
      continue;
    }
    batch.cells.push_back(c.cell);
    batch.routed_class.push_back(c.best);
    batch.conf.push_back(c.conf);
    batch.boxes.push_back(box);
    batch.masks.push_back(std::move(mask));
  }
  return batch;
}

namespace {

Tensor disc_output(Graph& g, Discriminators& disc, std::size_t which,
                   const Tensor& x, std::vector<Tensor>* leaves,
                   std::vector<Param*>* leaf_params) {
  Tensor logits = leaves ? mlp3_forward(g, disc.instance[which], x, *leaves,
                                        *leaf_params)
                         : mlp3_forward(g, std::as_const(disc.instance[which]), x);
  return g.sigmoid(g.clamp(logits, -kLogitClampAbs, kLogitClampAbs));
}

}  // namespace

Tensor conditional_loss_term(Graph& g, const CondLossInput& in, int domain,
                             Discriminators& disc, std::vector<Tensor>* leaves,
                             std::vector<Param*>* leaf_params) {
  const std::size_t n = in.conf.size();
  if (n == 0) throw std::invalid_argument("conditional loss needs instances");
  if (in.inst.shape()[0] != n) {
    throw std::invalid_argument("instance matrix disagrees with confidences");
  }
  const Tensor d_col =
      g.constant(std::vector<double>(n, static_cast<double>(domain)), {n, 1});
  std::optional<Tensor> total;
  auto add_term = [&](std::size_t which, const Tensor& w_col) {
    const Tensor out = disc_output(g, disc, which, in.inst, leaves, leaf_params);
    const Tensor term = g.sum(g.mul(w_col, g.square(g.sub(out, d_col))));
    total = total ? g.add(*total, term) : term;
  };
  if (disc.design == DiscDesign::c) {
    for (int k = 0; k < kNumClasses; ++k) {
      Tensor w_col = [&] {
        if (in.conf_graph) {
          std::vector<double> basis(static_cast<std::size_t>(kNumClasses), 0.0);
          basis[static_cast<std::size_t>(k)] = 1.0;
          return g.matmul(*in.conf_graph,
                          g.constant(basis, {static_cast<std::size_t>(kNumClasses), 1}));
        }
        std::vector<double> w(n);
        for (std::size_t i = 0; i < n; ++i) w[i] = in.conf[i][static_cast<std::size_t>(k)];
        return g.constant(w, {n, 1});
      }();
      add_term(static_cast<std::size_t>(k), w_col);
    }
  } else {
    Tensor w_col = [&]() -> Tensor {
      if (disc.design == DiscDesign::a) {
        return g.constant(std::vector<double>(n, 1.0), {n, 1});
      }
      // Design b weights by the instance's maximum class confidence.
      if (in.conf_graph) {
        std::vector<double> onehot(n * static_cast<std::size_t>(kNumClasses), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
          int best = 0;
          for (int k = 1; k < kNumClasses; ++k) {
            if (in.conf[i][static_cast<std::size_t>(k)] >
                in.conf[i][static_cast<std::size_t>(best)]) {
              best = k;
            }
          }
          onehot[i * static_cast<std::size_t>(kNumClasses) +
                 static_cast<std::size_t>(best)] = 1.0;
        }
        const Tensor oh =
            g.constant(onehot, {n, static_cast<std::size_t>(kNumClasses)});
        const Tensor ones = g.constant(
            std::vector<double>(static_cast<std::size_t>(kNumClasses), 1.0),
            {static_cast<std::size_t>(kNumClasses), 1});
        return g.matmul(g.mul(*in.conf_graph, oh), ones);
      }
      std::vector<double> w(n);
      for (std::size_t i = 0; i < n; ++i) {
        w[i] = *std::max_element(in.conf[i].begin(), in.conf[i].end());
      }
      return g.constant(w, {n, 1});
    }();
    add_term(0, w_col);
  }
  return g.scalar_mul(*total, 1.0 / static_cast<double>(n));
}

Tensor marginal_loss_term(Graph& g, const Tensor& features, int domain,
                          Discriminators& disc, std::vector<Tensor>* leaves,
                          std::vector<Param*>* leaf_params) {
  Tensor logits = leaves
                      ? mlp3_forward(g, disc.marginal, features, *leaves, *leaf_params)
                      : mlp3_forward(g, std::as_const(disc.marginal), features);
  const Tensor out =
      g.sigmoid(g.clamp(logits, -kLogitClampAbs, kLogitClampAbs));
  const Tensor inner = domain == 1 ? out : g.sub(g.scalar(1.0), out);
  return g.scalar_mul(g.mean(g.log(inner)), -1.0);
}

AlignmentLoss alignment_loss(Graph& g, const DetectorForward& f,
                             const GridSpec& grid, Discriminators& disc,
                             int domain, const GrlCoefficient& coeff,
                             double progress, const AlignmentConfig& cfg) {
  if (cfg.mode == AlignmentMode::none) {
    throw std::invalid_argument("alignment loss needs an alignment mode");
  }
  AlignmentLoss out;
  std::optional<Tensor> total;

  if (cfg.mode == AlignmentMode::marginal || cfg.mode == AlignmentMode::combined) {
    const Tensor fm_r = g.grl(f.feature_map, coeff, progress);
    const Tensor m_term = marginal_loss_term(g, fm_r, domain, disc,
                                             &out.disc_leaves, &out.disc_params);
    total = m_term;
  }

  if (cfg.mode == AlignmentMode::conditional || cfg.mode == AlignmentMode::combined) {
    const InstanceBatch inst = collect_instances(
        f.cls_logits.data(), f.reg.data(), grid, cfg.conf_floor, cfg.instance_cap);
    out.n_instances = inst.cells.size();
    out.skipped_empty_mask = inst.skipped_empty_mask;
    if (!inst.cells.empty()) {
      out.has_conditional = true;
      const std::size_t n = inst.cells.size();
      const std::size_t hw = grid.nx() * grid.ny();

      // Row n of the selection matrix averages the instance's masked cells,
      // so one matmul pools every instance at once.
      std::vector<double> sel(n * hw, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const double inv = 1.0 / static_cast<double>(inst.masks[i].size());
        for (std::size_t cell : inst.masks[i]) sel[i * hw + cell] = inv;
      }
      const Tensor pooled =
          g.matmul(g.constant(sel, {n, hw}), f.feature_map);

      const double ext_x = grid.x1 - grid.x0;
      const double ext_y = grid.y1 - grid.y0;
      std::vector<double> scale(n * kBoxVectorSize), offset(n * kBoxVectorSize);
      for (std::size_t i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(inst.routed_class[i]);
        const double cx_c = cell_center_x(grid, inst.cells[i] / grid.ny());
        const double cy_c = cell_center_y(grid, inst.cells[i] % grid.ny());
        const auto& mean = cfg.class_size_means[k];
        double* s = &scale[i * kBoxVectorSize];
        double* o = &offset[i * kBoxVectorSize];
        s[0] = grid.cell / ext_x;
        o[0] = (cx_c - grid.x0) / ext_x;
        s[1] = grid.cell / ext_y;
        o[1] = (cy_c - grid.y0) / ext_y;
        s[2] = 1.0 / mean[2];
        o[2] = 0.0;
        for (int j = 0; j < 3; ++j) {
          s[3 + j] = 1.0;
          o[3 + j] = -std::log(mean[static_cast<std::size_t>(j)]);
        }
        s[6] = 1.0;
        o[6] = 0.0;
        s[7] = 1.0;
        o[7] = 0.0;
      }
      const Tensor raw = g.gather_rows(f.reg, inst.cells);
      const Tensor box_mat =
          g.add(g.mul(raw, g.constant(scale, {n, kBoxVectorSize})),
                g.constant(offset, {n, kBoxVectorSize}));
      const Tensor inst_rows = g.concat(pooled, box_mat, 1);
      CondLossInput in;
      in.inst = g.grl(inst_rows, coeff, progress);
      in.conf = inst.conf;
      if (cfg.differentiate_confidence) {
        in.conf_graph = g.sigmoid(
            g.clamp(g.gather_rows(f.cls_logits, inst.cells), -kLogitClampAbs,
                    kLogitClampAbs));
      }
      const Tensor c_term = conditional_loss_term(g, in, domain, disc,
                                                  &out.disc_leaves, &out.disc_params);
      total = total ? g.add(*total, c_term) : c_term;
    } else if (cfg.mode == AlignmentMode::conditional) {
      total = g.scalar(0.0);
    }
  }

  out.loss = *total;
  return out;
}

DiscAccuracy domain_accuracy(const std::vector<double>& source_scores,
                             const std::vector<double>& target_scores) {
  DiscAccuracy acc;
  acc.total_source = source_scores.size();
  acc.total_target = target_scores.size();
  for (double s : source_scores) acc.correct += s <= 0.5 ? 1 : 0;
  for (double s : target_scores) acc.correct += s > 0.5 ? 1 : 0;
  return acc;
}

std::vector<double> instance_domain_scores(const DetectorModel& model,
                                           const Discriminators& disc,
                                           const PointCloud& scan,
                                           const AlignmentConfig& cfg) {
  const BevGrid bev = featurize(scan, model.grid);
  Graph g;
  const DetectorForward f = detector_forward(g, model, bev);
  std::vector<double> scores;
  if (disc.mode == AlignmentMode::marginal) {
    const Tensor out = g.sigmoid(g.clamp(
        mlp3_forward(g, disc.marginal, f.feature_map), -kLogitClampAbs,
        kLogitClampAbs));
    return out.data();
  }
  const InstanceBatch inst = collect_instances(
      f.cls_logits.data(), f.reg.data(), model.grid, cfg.conf_floor,
      cfg.instance_cap);
  if (inst.cells.empty()) return scores;
  const auto fdim = static_cast<std::size_t>(model.feature_channels);
  // Copies: adding nodes below reallocates graph storage, which moves the
  // vectors these would otherwise reference.
  const std::vector<double> fm = f.feature_map.data();
  const std::vector<double> reg_vals = f.reg.data();
  const double ext_x = model.grid.x1 - model.grid.x0;
  const double ext_y = model.grid.y1 - model.grid.y0;
  // Instances route to their argmax class's discriminator (designs a and b
  // have a single one); rows are evaluated class by class, ascending cell.
  for (int k = 0; k < kNumClasses; ++k) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < inst.cells.size(); ++i) {
      if (inst.routed_class[i] == k) rows.push_back(i);
    }
    if (rows.empty()) continue;
    std::vector<double> x(rows.size() * (fdim + kBoxVectorSize));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const std::size_t i = rows[r];
      double* dst = &x[r * (fdim + kBoxVectorSize)];
      for (std::size_t c : inst.masks[i]) {
        for (std::size_t j = 0; j < fdim; ++j) dst[j] += fm[c * fdim + j];
      }
      const double inv = 1.0 / static_cast<double>(inst.masks[i].size());
      for (std::size_t j = 0; j < fdim; ++j) dst[j] *= inv;
      const auto cls = static_cast<std::size_t>(inst.routed_class[i]);
      const auto& mean = cfg.class_size_means[cls];
      const double cx_c = cell_center_x(model.grid, inst.cells[i] / model.grid.ny());
      const double cy_c = cell_center_y(model.grid, inst.cells[i] % model.grid.ny());
      const double* rr = &reg_vals[inst.cells[i] * kRegFeatures];
      double* b = dst + fdim;
      b[0] = (cx_c - model.grid.x0 + rr[0] * model.grid.cell) / ext_x;
      b[1] = (cy_c - model.grid.y0 + rr[1] * model.grid.cell) / ext_y;
      b[2] = rr[2] / mean[2];
      for (int j = 0; j < 3; ++j) {
        b[3 + j] = rr[3 + j] - std::log(mean[static_cast<std::size_t>(j)]);
      }
      b[6] = rr[6];
      b[7] = rr[7];
    }
    const std::size_t which =
        disc.design == DiscDesign::c ? static_cast<std::size_t>(k) : 0;
    const Tensor out = g.sigmoid(g.clamp(
        mlp3_forward(g, disc.instance[which],
                     g.constant(x, {rows.size(), fdim + kBoxVectorSize})),
        -kLogitClampAbs, kLogitClampAbs));
    for (double v : out.data()) scores.push_back(v);
  }
  return scores;
}

std::vector<std::vector<BatchItem>> build_epoch_schedule(
    std::size_t n_source, std::size_t n_target, std::size_t batch_size,
    uint64_t seed, uint64_t epoch) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be >= 1");
  std::vector<std::size_t> src(n_source), tgt(n_target);
  std::iota(src.begin(), src.end(), std::size_t{0});
  std::iota(tgt.begin(), tgt.end(), std::size_t{0});
  RngStream src_rng(seed, "batch-order/source", epoch);
  RngStream tgt_rng(seed, "batch-order/target", epoch);
  src_rng.shuffle(src);
  tgt_rng.shuffle(tgt);
  RngStream mix(seed, "batch-order/mix", epoch);
  std::vector<BatchItem> order;
  order.reserve(n_source + n_target);
  std::size_t si = 0, ti = 0;
  while (si < n_source || ti < n_target) {
    const std::size_t s_rem = n_source - si;
    const std::size_t t_rem = n_target - ti;
    bool take_source;
    if (t_rem == 0) {
      take_source = true;
    } else if (s_rem == 0) {
      take_source = false;
    } else {
      take_source = mix.uniform() <
                    static_cast<double>(s_rem) / static_cast<double>(s_rem + t_rem);
    }
    if (take_source) {
      order.push_back({0, src[si++]});
    } else {
      order.push_back({1, tgt[ti++]});
    }
  }
  std::vector<std::vector<BatchItem>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(
                                             std::min(i + batch_size, order.size())));
  }
  return batches;
}

MemoryScenes::MemoryScenes(DomainProfile profile, std::vector<Scene> scenes)
    : profile_(std::move(profile)), scenes_(std::move(scenes)) {}

Scene MemoryScenes::load(std::size_t i) const {
  if (i >= scenes_.size()) throw std::out_of_range("scene index out of range");
  return scenes_[i];
}

DiskScenes::DiskScenes(DatasetOnDisk data) : data_(std::move(data)) {}

Scene DiskScenes::load(std::size_t i) const { return data_.load_scene(i); }

std::string train_log_csv(const std::vector<EpochRow>& rows) {
  std::string text =
      "epoch,L_det,L_align,disc_acc,target_mAP_3D,target_mAP_BEV,lambda\n";
  for (const EpochRow& r : rows) {
    text += std::to_string(r.epoch);
    text += "," + format_double(r.l_det);
    text += ",";
    if (r.l_align) text += format_double(*r.l_align);
    text += ",";
    if (r.disc_acc) text += format_double(*r.disc_acc);
    text += ",";
    if (r.map3d) text += format_double(*r.map3d);
    text += ",";
    if (r.mapbev) text += format_double(*r.mapbev);
    text += "," + format_double(r.lambda) + "\n";
  }
  return text;
}

std::vector<Param> training_checkpoint_params(const DetectorModel& model,
                                              bool ground_shift,
                                              const ClassSizeMeans& means) {
  std::vector<Param> params = model_to_params(model);
  Param shift("meta.ground_shift", {1});
  shift.value = {ground_shift ? 1.0 : 0.0};
  params.push_back(std::move(shift));
  Param m("meta.class_size_means", {9});
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t j = 0; j < 3; ++j) m.value[c * 3 + j] = means[c][j];
  }
  params.push_back(std::move(m));
  return params;
}

namespace {

Scene prepare_labeled_scene(Scene scene, const DomainProfile& profile,
                            const TrainOptions& opt, uint64_t epoch,
                            std::size_t index, std::size_t n_labeled) {
  if (opt.ros) {
    RngStream rng(opt.seed, "ros", epoch * n_labeled + index);
    auto scaled =
        random_object_scaling(scene.scan, scene.labels, opt.ros_config, rng);
    scene.scan = std::move(scaled.first);
    scene.labels = std::move(scaled.second);
  }
  if (opt.downsample_k > 1) {
    scene.scan = downsample_layers(scene.scan, opt.downsample_k);
  }
  if (opt.ground_shift) {
    auto shifted =
        ground_plane_shift(scene.scan, scene.labels, profile.sensor_height);
    scene.scan = std::move(shifted.first);
    scene.labels = std::move(shifted.second);
  }
  return scene;
}

Scene prepare_target_scene(Scene scene, const DomainProfile& profile,
                           const TrainOptions& opt) {
  if (opt.ground_shift) {
    auto shifted =
        ground_plane_shift(scene.scan, scene.labels, profile.sensor_height);
    scene.scan = std::move(shifted.first);
    scene.labels = std::move(shifted.second);
  }
  return scene;
}

struct BatchOutcome {
  double l_det_sum = 0;
  std::size_t n_source_scenes = 0;
  double l_align = 0;
  bool has_align = false;
  bool any_instances = false;
};

void accumulate_grads(std::vector<std::vector<double>>& sums,
                      const std::vector<Tensor>& leaves) {
  for (std::size_t p = 0; p < leaves.size(); ++p) {
    const std::vector<double>& grad = leaves[p].grad();
    if (sums[p].empty()) {
      sums[p] = grad;
    } else {
      for (std::size_t i = 0; i < grad.size(); ++i) sums[p][i] += grad[i];
    }
  }
}

}  // namespace

TrainResult train_detector(const SceneSource& labeled,
                           const SceneSource* target, const TrainOptions& opt) {
  if (labeled.size() == 0) {
    throw std::invalid_argument("labeled dataset is empty");
  }
  if ((opt.mode == AlignmentMode::none) != (target == nullptr)) {
    throw std::invalid_argument(
        "alignment modes need a target dataset; source-only training forbids one");
  }
  if (target && target->size() == 0) {
    throw std::invalid_argument("target dataset is empty");
  }
  if (opt.epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (opt.batch_size == 0) throw std::invalid_argument("batch size must be >= 1");

  TrainResult result;
  result.model.grid = opt.grid;
  result.model.feature_channels = opt.feature_channels;
  result.model.init(opt.seed);
  const AlignmentConfig acfg{
      opt.mode,          opt.design,
      opt.conf_floor,    opt.instance_cap,
      opt.differentiate_confidence, profile_size_means(labeled.profile())};
  if (opt.mode != AlignmentMode::none) {
    result.discs.init(opt.feature_channels, opt.mode, opt.design, opt.seed);
  }

  Adam adam_det(AdamConfig{opt.lr_detector, 0.9, 0.999, 1e-8});
  Adam adam_disc(AdamConfig{opt.lr_discriminator, 0.9, 0.999, 1e-8});

  const std::size_t n_labeled = labeled.size();
  const std::size_t n_target = target ? target->size() : 0;
  const std::size_t per_epoch =
      (n_labeled + n_target + opt.batch_size - 1) / opt.batch_size;
  const std::size_t total_batches = static_cast<std::size_t>(opt.epochs) * per_epoch;
  std::size_t processed = 0;

  const auto det_params = result.model.params();
  const auto disc_canonical = result.discs.params();

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    const auto schedule = build_epoch_schedule(
        n_labeled, n_target, opt.batch_size, opt.seed,
        static_cast<uint64_t>(epoch));
    double epoch_det_sum = 0, epoch_align_sum = 0;
    std::size_t epoch_det_scenes = 0, epoch_align_batches = 0;
    double last_lambda = 0;

    for (std::size_t b = 0; b < schedule.size(); ++b) {
      const double progress =
          total_batches == 0
              ? 0.0
              : static_cast<double>(processed) / static_cast<double>(total_batches);
      const double lambda = opt.lambda.value(progress);
      last_lambda = lambda;

      // Scenes are loaded and augmented once per pass; the sequential variant
      // repeats the pass with refreshed weights for the alignment step.
      std::vector<Scene> scenes;
      std::vector<int> domains;
      for (const BatchItem& item : schedule[b]) {
        if (item.domain == 0) {
          scenes.push_back(prepare_labeled_scene(
              labeled.load(item.index), labeled.profile(), opt,
              static_cast<uint64_t>(epoch), item.index, n_labeled));
          domains.push_back(0);
        } else {
          scenes.push_back(
              prepare_target_scene(target->load(item.index), target->profile(), opt));
          domains.push_back(1);
        }
      }

      auto run_pass = [&](bool with_det, bool with_align)
          -> std::pair<BatchOutcome, bool> {
        Graph g;
        BatchOutcome outcome;
        std::vector<std::vector<double>> det_grads(det_params.size());
        std::map<Param*, std::vector<double>> disc_grads;
        std::vector<DetectorForward> fwds;
        std::vector<AlignmentLoss> aligns;
        fwds.reserve(scenes.size());
        std::optional<Tensor> det_total, align_total;
        for (std::size_t sidx = 0; sidx < scenes.size(); ++sidx) {
          const BevGrid bev = featurize(scenes[sidx].scan, opt.grid);
          fwds.push_back(detector_forward(g, result.model, bev));
          const DetectorForward& f = fwds.back();
          // Non-finite activations must surface as divergence before a loss
          // term (a log node in particular) rejects them with another error.
          for (const Tensor* t : {&f.feature_map, &f.cls_logits, &f.reg}) {
            for (double v : t->data()) {
              if (!std::isfinite(v)) {
                throw TrainingDiverged(
                    "training diverged at epoch " + std::to_string(epoch + 1) +
                    ", batch " + std::to_string(b + 1) +
                    ": non-finite detector activations");
              }
            }
          }
          if (with_det && domains[sidx] == 0) {
            const LossBreakdown det =
                detection_loss(g, f, scenes[sidx].labels, opt.grid);
            outcome.l_det_sum += det.total.item();
            ++outcome.n_source_scenes;
            det_total = det_total ? g.add(*det_total, det.total) : det.total;
          }
          if (with_align) {
            AlignmentLoss al =
                alignment_loss(g, f, opt.grid, result.discs, domains[sidx],
                               opt.lambda, progress, acfg);
            outcome.any_instances |= al.has_conditional ||
                                     opt.mode == AlignmentMode::marginal ||
                                     opt.mode == AlignmentMode::combined;
            align_total = align_total ? g.add(*align_total, al.loss) : al.loss;
            aligns.push_back(std::move(al));
          }
        }
        Tensor root;
        std::optional<Tensor> det_scalar, align_scalar;
        if (det_total) {
          det_scalar = g.scalar_mul(
              *det_total, 1.0 / static_cast<double>(outcome.n_source_scenes));
        }
        if (align_total) {
          align_scalar = g.scalar_mul(
              *align_total, 1.0 / static_cast<double>(scenes.size()));
          outcome.l_align = align_scalar->item();
          outcome.has_align = true;
        }
        if (det_scalar && align_scalar) {
          root = g.add(*det_scalar, *align_scalar);
        } else if (det_scalar) {
          root = *det_scalar;
        } else if (align_scalar) {
          root = *align_scalar;
        } else {
          return {outcome, false};
        }
        if (std::isnan(root.item()) || std::isinf(root.item())) {
          throw TrainingDiverged(
              "training diverged at epoch " + std::to_string(epoch + 1) +
              ", batch " + std::to_string(b + 1) + ": loss " +
              format_double(root.item()) + " (detection " +
              (det_scalar ? format_double(det_scalar->item()) : std::string("-")) +
              ", alignment " +
              (align_scalar ? format_double(align_scalar->item()) : std::string("-")) +
              ")");
        }
        if (!root.requires_grad()) {
          // A target-only batch where every scene yields zero masked
          // instances reduces to a constant: nothing to differentiate, no
          // step to take.
          if (with_align && !outcome.any_instances)
            ++result.batches_without_instances;
          return {outcome, true};
        }
        g.backward(root);
        for (const DetectorForward& f : fwds) {
          accumulate_grads(det_grads, f.leaves);
        }
        for (const AlignmentLoss& al : aligns) {
          for (std::size_t p = 0; p < al.disc_params.size(); ++p) {
            std::vector<double>& sum = disc_grads[al.disc_params[p]];
            const std::vector<double>& grad = al.disc_leaves[p].grad();
            if (sum.empty()) {
              sum = grad;
            } else {
              for (std::size_t i = 0; i < grad.size(); ++i) sum[i] += grad[i];
            }
          }
        }
        // Optimizer updates happen outside: hand the grads back.
        if (with_det || with_align) {
          const bool step_detector =
              with_det ? (outcome.n_source_scenes > 0 || lambda != 0.0)
                       : lambda != 0.0;
          if (step_detector && !det_grads.empty() && !det_grads[0].empty()) {
            std::vector<const std::vector<double>*> refs;
            for (const auto& gvec : det_grads) refs.push_back(&gvec);
            adam_det.step(det_params, refs);
          }
          if (!disc_grads.empty()) {
            std::vector<Param*> ps;
            std::vector<const std::vector<double>*> gs;
            for (Param* p : disc_canonical) {
              const auto it = disc_grads.find(p);
              if (it != disc_grads.end()) {
                ps.push_back(p);
                gs.push_back(&it->second);
              }
            }
            adam_disc.step(ps, gs);
          } else if (with_align && !outcome.any_instances) {
            ++result.batches_without_instances;
          }
        }
        return {outcome, true};
      };

      BatchOutcome outcome;
      if (!opt.sequential_updates || opt.mode == AlignmentMode::none) {
        outcome = run_pass(true, opt.mode != AlignmentMode::none).first;
      } else {
        const BatchOutcome det_out = run_pass(true, false).first;
        const BatchOutcome align_out = run_pass(false, true).first;
        outcome = det_out;
        outcome.l_align = align_out.l_align;
        outcome.has_align = align_out.has_align;
        outcome.any_instances = align_out.any_instances;
      }

      epoch_det_sum += outcome.l_det_sum;
      epoch_det_scenes += outcome.n_source_scenes;
      if (opt.mode != AlignmentMode::none) {
        epoch_align_sum += outcome.has_align ? outcome.l_align : 0.0;
        ++epoch_align_batches;
      }
      ++processed;
    }

    EpochRow row;
    row.epoch = epoch + 1;
    row.l_det = epoch_det_scenes
                    ? epoch_det_sum / static_cast<double>(epoch_det_scenes)
                    : 0.0;
    row.lambda = last_lambda;
    if (opt.mode != AlignmentMode::none) {
      row.l_align = epoch_align_batches
                        ? epoch_align_sum / static_cast<double>(epoch_align_batches)
                        : 0.0;
      const std::size_t n_src_acc = std::min(opt.disc_acc_scenes, n_labeled);
      const std::size_t n_tgt_acc = std::min(opt.disc_acc_scenes, n_target);
      std::vector<double> src_scores, tgt_scores;
      for (std::size_t i = 0; i < n_src_acc; ++i) {
        Scene s = labeled.load(i);
        // Accuracy probes skip the stochastic scaling so the diagnostic is a
        // function of the weights alone.
        if (opt.downsample_k > 1) s.scan = downsample_layers(s.scan, opt.downsample_k);
        if (opt.ground_shift) {
          s.scan = ground_plane_shift(s.scan, s.labels,
                                      labeled.profile().sensor_height)
                       .first;
        }
        for (double v : instance_domain_scores(result.model, result.discs,
                                               s.scan, acfg)) {
          src_scores.push_back(v);
        }
      }
      for (std::size_t i = 0; i < n_tgt_acc; ++i) {
        Scene s = target->load(i);
        if (opt.ground_shift) {
          s.scan = ground_plane_shift(s.scan, s.labels,
                                      target->profile().sensor_height)
                       .first;
        }
        for (double v : instance_domain_scores(result.model, result.discs,
                                               s.scan, acfg)) {
          tgt_scores.push_back(v);
        }
      }
      const DiscAccuracy acc = domain_accuracy(src_scores, tgt_scores);
      if (acc.valid()) row.disc_acc = acc.value();

      if (opt.log_target_map) {
        std::vector<EvalScene> eval_scenes;
        for (std::size_t i = 0; i < n_target; ++i) {
          Scene s = prepare_target_scene(target->load(i), target->profile(), opt);
          const BevGrid bev = featurize(s.scan, opt.grid);
          Graph g;
          const DetectorForward f = detector_forward(g, result.model, bev);
          EvalScene es;
          es.preds = decode_detections(f.cls_logits.data(), f.reg.data(),
                                       opt.grid, opt.eval_conf_threshold,
                                       opt.eval_nms_iou);
          es.gts = std::move(s.labels);
          eval_scenes.push_back(std::move(es));
        }
        const EvalResult er = evaluate(eval_scenes, kIouThresholds, opt.jobs);
        row.map3d = er.map3d;
        row.mapbev = er.mapbev;
      }
    }
    result.rows.push_back(std::move(row));
  }

  result.log_csv = train_log_csv(result.rows);
  return result;
}

}  // namespace uada
