#include "uada/augment.hpp"

#include <stdexcept>

namespace uada {

std::pair<PointCloud, std::vector<LabeledBox>> random_object_scaling(
    const PointCloud& scan, const std::vector<LabeledBox>& labels,
    const RosConfig& cfg, RngStream& rng) {
  for (const auto& [lo, hi] : cfg.intervals)
    if (!(lo > 0.0) || lo > hi)
      throw std::invalid_argument("ros: intervals must satisfy 0 < r_min <= r_max");
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t j = i + 1; j < labels.size(); ++j)
      if (bev_intersection_area(labels[i].box, labels[j].box) > 0.0)
        throw std::invalid_argument("ros: overlapping boxes make point ownership ambiguous");

  // Draw order is pinned to label order so results never depend on point
  // layout.
  std::vector<double> r(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto& [lo, hi] = cfg.intervals[static_cast<std::size_t>(labels[i].class_id)];
    r[i] = rng.uniform(lo, hi);
  }

  PointCloud out;
  out.points.reserve(scan.points.size());
  for (const LidarPoint& p : scan.points) {
    LidarPoint q = p;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const Box3D& b = labels[i].box;
      if (!contains(b, {p.x, p.y, p.z})) continue;
      if (r[i] == 1.0) break;  // keeps the unit scale bitwise transparent
      const auto obj = to_object_frame({p.x, p.y, p.z}, b);
      const auto back = from_object_frame({r[i] * obj[0], r[i] * obj[1], r[i] * obj[2]}, b);
      q.x = back[0];
      q.y = back[1];
      q.z = back[2];
      break;
    }
    out.points.push_back(q);
  }

  std::vector<LabeledBox> scaled = labels;
  for (std::size_t i = 0; i < scaled.size(); ++i) {
    scaled[i].box.l *= r[i];
    scaled[i].box.w *= r[i];
    scaled[i].box.h *= r[i];
  }
  return {std::move(out), std::move(scaled)};
}

PointCloud downsample_layers(const PointCloud& scan, int k) {
  if (k <= 0) throw std::invalid_argument("downsample_layers: k must be >= 1");
  PointCloud out;
  out.points.reserve(scan.points.size() / static_cast<std::size_t>(k) + 1);
  for (const LidarPoint& p : scan.points) {
    if (p.ring % k != 0) continue;
    LidarPoint q = p;
    q.ring = static_cast<uint16_t>(p.ring / k);
    out.points.push_back(q);
  }
  return out;
}

std::pair<PointCloud, std::vector<LabeledBox>> ground_plane_shift(
    const PointCloud& scan, const std::vector<LabeledBox>& labels,
    double sensor_height) {
  if (sensor_height < 0.0)
    throw std::invalid_argument("ground_plane_shift: sensor_height must be >= 0");
  PointCloud out = scan;
  for (LidarPoint& p : out.points) p.z += sensor_height;
  std::vector<LabeledBox> shifted = labels;
  for (LabeledBox& lb : shifted) lb.box.cz += sensor_height;
  return {std::move(out), std::move(shifted)};
}

}  // namespace uada
