#include "uada/detector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_set>

#include "uada/geometry.hpp"

namespace uada {

BevGrid featurize(const PointCloud& scan, const GridSpec& grid) {
  grid.validate();
  const std::size_t nx = grid.nx(), ny = grid.ny();
  BevGrid out;
  out.nx = nx;
  out.ny = ny;
  out.features.assign(nx * ny * kGridFeatures, 0.0);
  std::vector<double> count(nx * ny, 0.0), z_sum(nx * ny, 0.0),
      i_sum(nx * ny, 0.0);
  std::vector<double> z_max(nx * ny, -std::numeric_limits<double>::infinity());
  for (const LidarPoint& p : scan.points) {
    const double fx = (p.x - grid.x0) / grid.cell;
    const double fy = (p.y - grid.y0) / grid.cell;
    if (!(fx >= 0) || fx >= static_cast<double>(nx) || !(fy >= 0) ||
        fy >= static_cast<double>(ny)) {
      continue;
    }
    const std::size_t cell =
        static_cast<std::size_t>(fx) * ny + static_cast<std::size_t>(fy);
    count[cell] += 1.0;
    z_sum[cell] += p.z;
    i_sum[cell] += p.intensity;
    z_max[cell] = std::max(z_max[cell], p.z);
  }
  for (std::size_t c = 0; c < nx * ny; ++c) {
    if (count[c] == 0.0) continue;
    double* f = &out.features[c * kGridFeatures];
    f[0] = std::log1p(count[c]);
    f[1] = z_sum[c] / count[c];
    f[2] = z_max[c];
    f[3] = i_sum[c] / count[c];
  }
  return out;
}

double cell_center_x(const GridSpec& grid, std::size_t ix) {
  return grid.x0 + (static_cast<double>(ix) + 0.5) * grid.cell;
}

double cell_center_y(const GridSpec& grid, std::size_t iy) {
  return grid.y0 + (static_cast<double>(iy) + 0.5) * grid.cell;
}

void DetectorModel::init(uint64_t seed) {
  grid.validate();
  const auto f = static_cast<std::size_t>(feature_channels);
  if (feature_channels < 1) {
    throw std::invalid_argument("feature_channels must be >= 1");
  }
  const std::size_t k = static_cast<std::size_t>(kNumClasses);
  w1 = Param("det.w1", {9 * kGridFeatures, f});
  b1 = Param("det.b1", {f});
  w2 = Param("det.w2", {9 * f, f});
  b2 = Param("det.b2", {f});
  w_cls = Param("det.w_cls", {f, k});
  b_cls = Param("det.b_cls", {k});
  w_reg = Param("det.w_reg", {f, kRegFeatures});
  b_reg = Param("det.b_reg", {kRegFeatures});
  RngStream rng(seed, "init/det");
  for (Param* p : params()) xavier_init(*p, rng);
}

std::vector<Param*> DetectorModel::params() {
  return {&w1, &b1, &w2, &b2, &w_cls, &b_cls, &w_reg, &b_reg};
}

std::vector<const Param*> DetectorModel::params() const {
  return {&w1, &b1, &w2, &b2, &w_cls, &b_cls, &w_reg, &b_reg};
}

std::vector<Param> model_to_params(const DetectorModel& m) {
  std::vector<Param> out;
  for (const Param* p : m.params()) out.push_back(*p);
  Param grid("meta.grid", {5});
  grid.value = {m.grid.x0, m.grid.x1, m.grid.y0, m.grid.y1, m.grid.cell};
  out.push_back(std::move(grid));
  Param f("meta.feature_channels", {1});
  f.value = {static_cast<double>(m.feature_channels)};
  out.push_back(std::move(f));
  return out;
}

DetectorModel model_from_params(const std::vector<Param>& params) {
  auto find = [&params](const std::string& name) -> const Param& {
    for (const Param& p : params) {
      if (p.name == name) return p;
    }
    throw std::invalid_argument("checkpoint is missing tensor " + name);
  };
  DetectorModel m;
  const Param& grid = find("meta.grid");
  if (grid.value.size() != 5) {
    throw std::invalid_argument("checkpoint meta.grid must hold 5 values");
  }
  m.grid.x0 = grid.value[0];
  m.grid.x1 = grid.value[1];
  m.grid.y0 = grid.value[2];
  m.grid.y1 = grid.value[3];
  m.grid.cell = grid.value[4];
  try {
    m.grid.validate();
  } catch (const std::exception& e) {
    throw std::invalid_argument(std::string("checkpoint grid invalid: ") +
                                e.what());
  }
  const Param& f = find("meta.feature_channels");
  if (f.value.size() != 1 || f.value[0] < 1 ||
      f.value[0] != std::floor(f.value[0])) {
    throw std::invalid_argument("checkpoint feature_channels invalid");
  }
  m.feature_channels = static_cast<int>(f.value[0]);
  m.w1 = find("det.w1");
  m.b1 = find("det.b1");
  m.w2 = find("det.w2");
  m.b2 = find("det.b2");
  m.w_cls = find("det.w_cls");
  m.b_cls = find("det.b_cls");
  m.w_reg = find("det.w_reg");
  m.b_reg = find("det.b_reg");
  const auto fc = static_cast<std::size_t>(m.feature_channels);
  const std::size_t k = static_cast<std::size_t>(kNumClasses);
  const std::vector<std::pair<const Param*, std::vector<std::size_t>>> want = {
      {&m.w1, {9 * kGridFeatures, fc}}, {&m.b1, {fc}},
      {&m.w2, {9 * fc, fc}},            {&m.b2, {fc}},
      {&m.w_cls, {fc, k}},              {&m.b_cls, {k}},
      {&m.w_reg, {fc, kRegFeatures}},   {&m.b_reg, {kRegFeatures}},
  };
  for (const auto& [p, shape] : want) {
    if (p->shape != shape) {
      throw std::invalid_argument("checkpoint tensor " + p->name +
                                  " has a shape inconsistent with its meta");
    }
  }
  return m;
}

DetectorForward detector_forward(Graph& g, const DetectorModel& m,
                                 const BevGrid& grid) {
  if (grid.nx != m.grid.nx() || grid.ny != m.grid.ny()) {
    throw std::invalid_argument("grid shape does not match the model grid");
  }
  if (grid.nx < 3 || grid.ny < 3) {
    throw std::invalid_argument("grid must be at least 3x3 cells");
  }
  const std::size_t hw = grid.nx * grid.ny;
  const auto f = static_cast<std::size_t>(m.feature_channels);
  DetectorForward out;
  std::vector<Tensor> leaves;
  for (const Param* p : m.params()) {
    leaves.push_back(g.input(p->value, p->shape, true));
  }
  const Tensor x = g.constant(grid.features, {hw, kGridFeatures});
  const Tensor p1 = g.patches3x3(x, grid.nx, grid.ny, kGridFeatures);
  const Tensor h1 = g.leaky_relu(
      g.add(g.matmul(p1, leaves[0]), g.broadcast_rows(leaves[1], hw)));
  const Tensor p2 = g.patches3x3(h1, grid.nx, grid.ny, f);
  const Tensor h2 = g.leaky_relu(
      g.add(g.matmul(p2, leaves[2]), g.broadcast_rows(leaves[3], hw)));
  out.feature_map = h2;
  out.cls_logits =
      g.add(g.matmul(h2, leaves[4]), g.broadcast_rows(leaves[5], hw));
  out.reg = g.add(g.matmul(h2, leaves[6]), g.broadcast_rows(leaves[7], hw));
  out.leaves = std::move(leaves);
  return out;
}

std::array<double, kRegFeatures> encode_box(const Box3D& box, double center_x,
                                            double center_y, double cell) {
  return {(box.cx - center_x) / cell, (box.cy - center_y) / cell, box.cz,
          std::log(box.l),            std::log(box.w),            std::log(box.h),
          std::sin(box.yaw),          std::cos(box.yaw)};
}

Box3D decode_box(const std::array<double, kRegFeatures>& r, double center_x,
                 double center_y, double cell) {
  // Log extents clamp to [-4, 4] so an untrained head cannot produce boxes
  // that overflow the geometry (e^4 = 54.6 m).
  auto extent = [](double lv) { return std::exp(std::clamp(lv, -4.0, 4.0)); };
  return make_box(center_x + r[0] * cell, center_y + r[1] * cell, r[2],
                  extent(r[3]), extent(r[4]), extent(r[5]),
                  std::atan2(r[6], r[7]));
}

CellTargets assign_targets(const std::vector<LabeledBox>& labels,
                           const GridSpec& grid) {
  grid.validate();
  const std::size_t nx = grid.nx(), ny = grid.ny();
  CellTargets t;
  std::unordered_set<std::size_t> used;
  for (const LabeledBox& lb : labels) {
    if (lb.class_id < 0 || lb.class_id >= kNumClasses) {
      throw std::invalid_argument("label class id out of range");
    }
    const double fx = (lb.box.cx - grid.x0) / grid.cell;
    const double fy = (lb.box.cy - grid.y0) / grid.cell;
    if (!(fx >= 0) || fx >= static_cast<double>(nx) || !(fy >= 0) ||
        fy >= static_cast<double>(ny)) {
      ++t.skipped;
      continue;
    }
    const auto ix = static_cast<std::size_t>(fx);
    const auto iy = static_cast<std::size_t>(fy);
    const std::size_t cell = ix * ny + iy;
    if (!used.insert(cell).second) {
      ++t.skipped;  // a second center in one cell has no free slot
      continue;
    }
    t.cells.push_back(cell);
    t.classes.push_back(lb.class_id);
    t.residuals.push_back(encode_box(lb.box, cell_center_x(grid, ix),
                                     cell_center_y(grid, iy), grid.cell));
  }
  return t;
}

LossBreakdown detection_loss(Graph& g, const DetectorForward& f,
                             const std::vector<LabeledBox>& labels,
                             const GridSpec& grid) {
  const CellTargets t = assign_targets(labels, grid);
  const std::size_t hw = f.cls_logits.shape()[0];
  const std::size_t k = static_cast<std::size_t>(kNumClasses);
  std::vector<double> targets(hw * k, 0.0);
  for (std::size_t i = 0; i < t.cells.size(); ++i) {
    targets[t.cells[i] * k + static_cast<std::size_t>(t.classes[i])] = 1.0;
  }
  const Tensor target = g.constant(std::move(targets), {hw, k});
  const Tensor ones = g.constant(std::vector<double>(hw * k, 1.0), {hw, k});
  const Tensor s = g.sigmoid(g.clamp(f.cls_logits, -kLogitClamp, kLogitClamp));
  const Tensor hit = g.mul(target, g.log(s));
  const Tensor rest = g.mul(g.sub(ones, target), g.log(g.sub(ones, s)));
  LossBreakdown out;
  out.cls = g.scalar_mul(g.mean(g.add(hit, rest)), -1.0);
  if (t.cells.empty()) {
    out.reg = g.scalar(0.0);
  } else {
    std::vector<double> flat;
    flat.reserve(t.residuals.size() * kRegFeatures);
    for (const auto& r : t.residuals) flat.insert(flat.end(), r.begin(), r.end());
    const Tensor wanted =
        g.constant(std::move(flat), {t.residuals.size(), kRegFeatures});
    const Tensor picked = g.gather_rows(f.reg, t.cells);
    out.reg = g.mean(g.abs(g.sub(picked, wanted)));
  }
  out.total = g.add(out.cls, g.scalar_mul(out.reg, 2.0));
  out.positives = static_cast<int>(t.cells.size());
  out.skipped_labels = t.skipped;
  return out;
}

namespace {

double sigmoid_value(double logit) {
  const double c = std::clamp(logit, -kLogitClamp, kLogitClamp);
  return 1.0 / (1.0 + std::exp(-c));
}

}  // namespace

std::vector<Detection> decode_raw(const std::vector<double>& cls_logits,
                                  const std::vector<double>& reg,
                                  const GridSpec& grid, double conf_threshold) {
  const std::size_t nx = grid.nx(), ny = grid.ny();
  const std::size_t k = static_cast<std::size_t>(kNumClasses);
  if (cls_logits.size() != nx * ny * k || reg.size() != nx * ny * kRegFeatures) {
    throw std::invalid_argument("prediction buffers do not match the grid");
  }
  std::vector<Detection> dets;
  for (std::size_t cell = 0; cell < nx * ny; ++cell) {
    Detection d;
    int best = 0;
    for (std::size_t c = 0; c < k; ++c) {
      d.confidence[c] = sigmoid_value(cls_logits[cell * k + c]);
      if (d.confidence[c] > d.confidence[static_cast<std::size_t>(best)]) {
        best = static_cast<int>(c);
      }
    }
    const double score = d.confidence[static_cast<std::size_t>(best)];
    if (!(score >= conf_threshold)) continue;
    std::array<double, kRegFeatures> r;
    for (std::size_t j = 0; j < kRegFeatures; ++j) {
      r[j] = reg[cell * kRegFeatures + j];
    }
    d.box = decode_box(r, cell_center_x(grid, cell / ny),
                       cell_center_y(grid, cell % ny), grid.cell);
    d.class_id = best;
    d.score = score;
    dets.push_back(d);
  }
  return dets;
}

std::vector<Detection> decode_detections(const std::vector<double>& cls_logits,
                                         const std::vector<double>& reg,
                                         const GridSpec& grid,
                                         double conf_threshold, double nms_iou) {
  return nms(decode_raw(cls_logits, reg, grid, conf_threshold), nms_iou,
             IouMode::bev);
}

}  // namespace uada
