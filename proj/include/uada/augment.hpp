#pragma once

#include <array>
#include <utility>
#include <vector>

#include "uada/pointcloud.hpp"
#include "uada/rng.hpp"

// Source-domain augmentations: per-object isotropic scaling, elevation-layer
// downsampling, and the vertical shift that puts the ground plane at z = 0.

namespace uada {

struct RosConfig {
  // (r_min, r_max) per class id.
  std::array<std::pair<double, double>, kNumClasses> intervals = {{
      {0.8, 1.2},  // Vehicle
      {0.9, 1.1},  // Pedestrian
      {0.9, 1.1},  // Cyclist
  }};
};

// One scale r ~ U(r_min, r_max) drawn per object in label order. Points
// inside a box move to its object frame, scale by r, and move back; the box
// extents scale by the same r; centers, yaws, and points outside every box
// are untouched. Requires pairwise non-overlapping footprints so point
// ownership is unique.
std::pair<PointCloud, std::vector<LabeledBox>> random_object_scaling(
    const PointCloud& scan, const std::vector<LabeledBox>& labels,
    const RosConfig& cfg, RngStream& rng);

// Keeps points with ring % k == 0 and renumbers rings to ring / k.
PointCloud downsample_layers(const PointCloud& scan, int k);

// z += sensor_height on points and box centers (sensor frame has the ground
// at z = -sensor_height).
std::pair<PointCloud, std::vector<LabeledBox>> ground_plane_shift(
    const PointCloud& scan, const std::vector<LabeledBox>& labels,
    double sensor_height);

}  // namespace uada
