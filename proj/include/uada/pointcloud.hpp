#pragma once

#include <cstdint>
#include <vector>

#include "uada/geometry.hpp"

namespace uada {

struct LidarPoint {
  double x = 0, y = 0, z = 0;
  double intensity = 0;  // [0, 1]
  uint16_t ring = 0;     // elevation layer index
};

struct PointCloud {
  std::vector<LidarPoint> points;
};

// Mean object extents (l, w, h) per class, shared by the scene generator and
// the box-parameter normalization fed to the discriminators.
constexpr double kClassMeanSize[kNumClasses][3] = {
    {4.5, 1.9, 1.7},  // Vehicle
    {0.8, 0.8, 1.7},  // Pedestrian
    {1.8, 0.6, 1.7},  // Cyclist
};

}  // namespace uada
