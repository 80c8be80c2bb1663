#include "uada/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace uada {

double normalize_yaw(double yaw) {
  while (yaw > M_PI) yaw -= 2.0 * M_PI;
  while (yaw <= -M_PI) yaw += 2.0 * M_PI;
  return yaw;
}

Box3D make_box(double cx, double cy, double cz, double l, double w, double h,
               double yaw) {
  if (!(l > 0.0) || !(w > 0.0) || !(h > 0.0))
    throw std::invalid_argument("box extents must be positive");
  return Box3D{cx, cy, cz, l, w, h, normalize_yaw(yaw)};
}

std::array<double, 3> to_object_frame(const std::array<double, 3>& p,
                                      const Box3D& box) {
  const double dx = p[0] - box.cx;
  const double dy = p[1] - box.cy;
  const double c = std::cos(box.yaw);
  const double s = std::sin(box.yaw);
  return {dx * c + dy * s, -dx * s + dy * c, p[2] - box.cz};
}

std::array<double, 3> from_object_frame(const std::array<double, 3>& p_obj,
                                        const Box3D& box) {
  const double c = std::cos(box.yaw);
  const double s = std::sin(box.yaw);
  return {box.cx + p_obj[0] * c - p_obj[1] * s,
          box.cy + p_obj[0] * s + p_obj[1] * c, box.cz + p_obj[2]};
}

bool contains(const Box3D& box, const std::array<double, 3>& p) {
  const auto q = to_object_frame(p, box);
  return std::fabs(q[0]) <= box.l * 0.5 && std::fabs(q[1]) <= box.w * 0.5 &&
         std::fabs(q[2]) <= box.h * 0.5;
}

bool footprint_contains(const Box3D& box, double x, double y) {
  const auto q = to_object_frame({x, y, box.cz}, box);
  return std::fabs(q[0]) <= box.l * 0.5 && std::fabs(q[1]) <= box.w * 0.5;
}

std::array<std::array<double, 2>, 4> bev_corners(const Box3D& box) {
  const double c = std::cos(box.yaw);
  const double s = std::sin(box.yaw);
  const double hl = box.l * 0.5, hw = box.w * 0.5;
  // Object-frame corners in counter-clockwise order.
  const double ox[4] = {hl, -hl, -hl, hl};
  const double oy[4] = {hw, hw, -hw, -hw};
  std::array<std::array<double, 2>, 4> out;
  for (int i = 0; i < 4; ++i)
    out[i] = {box.cx + ox[i] * c - oy[i] * s, box.cy + ox[i] * s + oy[i] * c};
  return out;
}

namespace {

double shoelace(const std::vector<std::array<double, 2>>& poly) {
  double a = 0.0;
  const std::size_t n = poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = poly[i];
    const auto& q = poly[(i + 1) % n];
    a += p[0] * q[1] - q[0] * p[1];
  }
  return 0.5 * a;
}

// Clip a convex CCW polygon by the half-plane left of edge (e1 -> e2).
std::vector<std::array<double, 2>> clip_edge(
    const std::vector<std::array<double, 2>>& poly,
    const std::array<double, 2>& e1, const std::array<double, 2>& e2) {
  std::vector<std::array<double, 2>> out;
  const std::size_t n = poly.size();
  if (n == 0) return out;
  const double ex = e2[0] - e1[0];
  const double ey = e2[1] - e1[1];
  auto side = [&](const std::array<double, 2>& p) {
    return ex * (p[1] - e1[1]) - ey * (p[0] - e1[0]);
  };
  for (std::size_t i = 0; i < n; ++i) {
    const auto& cur = poly[i];
    const auto& nxt = poly[(i + 1) % n];
    const double sc = side(cur);
    const double sn = side(nxt);
    if (sc >= 0.0) out.push_back(cur);
    if ((sc >= 0.0) != (sn >= 0.0)) {
      const double t = sc / (sc - sn);
      out.push_back({cur[0] + t * (nxt[0] - cur[0]), cur[1] + t * (nxt[1] - cur[1])});
    }
  }
  return out;
}

}  // namespace

double bev_intersection_area(const Box3D& a, const Box3D& b) {
  const auto ca = bev_corners(a);
  const auto cb = bev_corners(b);
  std::vector<std::array<double, 2>> poly(ca.begin(), ca.end());
  for (int e = 0; e < 4 && !poly.empty(); ++e)
    poly = clip_edge(poly, cb[e], cb[(e + 1) % 4]);
  if (poly.size() < 3) return 0.0;
  return std::max(0.0, shoelace(poly));
}

double iou_bev(const Box3D& a, const Box3D& b) {
  const double inter = bev_intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  const double ua = a.l * a.w + b.l * b.w - inter;
  if (ua <= 0.0) return 0.0;
  return std::min(1.0, inter / ua);
}

double iou_3d(const Box3D& a, const Box3D& b) {
  const double inter_area = bev_intersection_area(a, b);
  if (inter_area <= 0.0) return 0.0;
  const double z_lo = std::max(a.cz - a.h * 0.5, b.cz - b.h * 0.5);
  const double z_hi = std::min(a.cz + a.h * 0.5, b.cz + b.h * 0.5);
  const double dz = z_hi - z_lo;
  if (dz <= 0.0) return 0.0;
  const double inter = inter_area * dz;
  const double vol_union = a.l * a.w * a.h + b.l * b.w * b.h - inter;
  if (vol_union <= 0.0) return 0.0;
  return std::min(1.0, inter / vol_union);
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold,
                           IouMode mode) {
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.box.cx != b.box.cx) return a.box.cx < b.box.cx;
    return a.box.cy < b.box.cy;
  });
  std::vector<Detection> kept;
  for (const Detection& d : dets) {
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (k.class_id != d.class_id) continue;
      const double iou = mode == IouMode::bev ? iou_bev(k.box, d.box)
                                              : iou_3d(k.box, d.box);
      if (iou >= iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

}  // namespace uada
