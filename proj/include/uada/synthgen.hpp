#pragma once

#include <array>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "uada/pointcloud.hpp"
#include "uada/rng.hpp"

// Ray-cast synthetic LiDAR scenes. A profile fixes the sensor fan (layer
// elevations, azimuth step, mount height, range), the object population
// (class mix, per-class distance and size distributions), and the BEV grid
// the downstream detector uses for this domain.

namespace uada {

struct GridSpec {
  double x0 = 0, x1 = 50, y0 = -25, y1 = 25;
  double cell = 0.5;
  // Throws unless the ranges are positive exact multiples of cell.
  void validate() const;
  std::size_t nx() const;  // cells along x
  std::size_t ny() const;  // cells along y
};

struct DomainProfile {
  std::string name;
  int n_layers = 16;
  double elev_min_deg = -15.0, elev_max_deg = 15.0;
  double azimuth_step_deg = 0.4;
  double sensor_height = 0.6;
  double max_range = 25.0;
  std::array<double, kNumClasses> class_mix = {0.3, 0.45, 0.25};
  std::array<std::pair<double, double>, kNumClasses> distance_range = {{
      {8.0, 15.0}, {2.0, 10.0}, {2.0, 10.0}}};
  std::array<std::array<double, 3>, kNumClasses> size_mean = {{
      {kClassMeanSize[0][0], kClassMeanSize[0][1], kClassMeanSize[0][2]},
      {kClassMeanSize[1][0], kClassMeanSize[1][1], kClassMeanSize[1][2]},
      {kClassMeanSize[2][0], kClassMeanSize[2][1], kClassMeanSize[2][2]}}};
  // Sigma 10% of the mean; draws clamp to +-2 sigma.
  std::array<std::array<double, 3>, kNumClasses> size_std;
  std::pair<int, int> objects_per_scene = {2, 5};
  double object_azimuth_deg = 45.0;  // placement window, +- degrees
  std::size_t point_budget = 12000;  // stride-subsample cap per scan
  GridSpec grid;

  void validate() const;
};

// car64, car16, robot16; throws std::invalid_argument on unknown names.
DomainProfile builtin_profile(const std::string& name);
std::vector<std::string> builtin_profile_names();

struct Scene {
  PointCloud scan;
  std::vector<LabeledBox> labels;
  int domain_id = 0;  // 0 source, 1 target
};

struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RayHit {
  std::array<double, 3> p;
  double range = 0;
  int box_index = -1;  // -1 means ground
};

// Nearest intersection of the unit ray (elevation, azimuth) from origin with
// the ground plane z = ground_z or any box (slab method in object frame);
// none when nothing lies within max_range. Box hits advance 1e-6 m along the
// ray so surface points sit strictly inside their box.
std::optional<RayHit> cast_ray(const std::array<double, 3>& origin,
                               double elevation_rad, double azimuth_rad,
                               double ground_z, const std::vector<Box3D>& boxes,
                               double max_range);

// Full elevation x azimuth fan in (ring-major, azimuth-ascending) order;
// exposed for density analysis of the pre-cap fan.
std::vector<std::pair<RayHit, uint16_t>> cast_full_fan(
    const DomainProfile& profile, const std::vector<Box3D>& boxes);

Scene generate_scene(const DomainProfile& profile, RngStream& rng);

struct ClassStats {
  std::size_t n_objects = 0;
  double mean_points = 0;                // valid iff n_objects > 0
  std::map<int, int> distance_hist;      // floor(range in meters) -> count
  std::map<int, int> points_hist;        // contained-point count -> count
};

struct DatasetStats {
  std::array<ClassStats, kNumClasses> per_class;
};

DatasetStats dataset_stats(const std::vector<Scene>& scenes);

}  // namespace uada
