#include "uada/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace uada {

namespace {

constexpr double kPi = 3.14159265358979323846;

double deg_to_rad(double d) { return d * kPi / 180.0; }

long positive_cell_count(double lo, double hi, double cell,
                         const char* axis_name) {
  if (!(cell > 0) || !(hi > lo)) {
    throw std::invalid_argument(std::string("grid ") + axis_name +
                                " range or cell size not positive");
  }
  const double span = hi - lo;
  const long n = std::lround(span / cell);
  if (n < 1 || std::abs(static_cast<double>(n) * cell - span) > 1e-9) {
    throw std::invalid_argument(std::string("grid ") + axis_name +
                                " span is not a multiple of the cell size");
  }
  return n;
}

}  // namespace

void GridSpec::validate() const {
  positive_cell_count(x0, x1, cell, "x");
  positive_cell_count(y0, y1, cell, "y");
}

std::size_t GridSpec::nx() const {
  return static_cast<std::size_t>(positive_cell_count(x0, x1, cell, "x"));
}

std::size_t GridSpec::ny() const {
  return static_cast<std::size_t>(positive_cell_count(y0, y1, cell, "y"));
}

void DomainProfile::validate() const {
  if (n_layers < 1) throw std::invalid_argument("n_layers must be >= 1");
  if (n_layers > 1 && !(elev_max_deg > elev_min_deg)) {
    throw std::invalid_argument("elevation fan must span a positive range");
  }
  if (!(azimuth_step_deg > 0)) {
    throw std::invalid_argument("azimuth step must be positive");
  }
  const double n_az = 360.0 / azimuth_step_deg;
  if (std::abs(n_az - std::lround(n_az)) > 1e-9) {
    throw std::invalid_argument("azimuth step must divide 360 degrees");
  }
  if (!(sensor_height > 0)) {
    throw std::invalid_argument("sensor height must be positive");
  }
  if (!(max_range > 0)) throw std::invalid_argument("max range must be positive");
  double mix_sum = 0;
  for (double m : class_mix) {
    if (m < 0) throw std::invalid_argument("class mix weights must be >= 0");
    mix_sum += m;
  }
  if (!(mix_sum > 0)) throw std::invalid_argument("class mix must not be all zero");
  for (int k = 0; k < kNumClasses; ++k) {
    const auto& [lo, hi] = distance_range[k];
    if (!(0 < lo && lo <= hi && hi < max_range)) {
      throw std::invalid_argument("distance range must satisfy 0 < lo <= hi < max_range");
    }
    for (int a = 0; a < 3; ++a) {
      if (!(size_mean[k][a] > 0) || size_std[k][a] < 0 ||
          !(size_mean[k][a] - 2 * size_std[k][a] > 0)) {
        throw std::invalid_argument("object sizes must stay positive at -2 sigma");
      }
    }
  }
  if (objects_per_scene.first < 1 ||
      objects_per_scene.second < objects_per_scene.first) {
    throw std::invalid_argument("objects_per_scene must satisfy 1 <= min <= max");
  }
  if (!(object_azimuth_deg > 0 && object_azimuth_deg <= 180)) {
    throw std::invalid_argument("object azimuth window must be in (0, 180]");
  }
  if (point_budget < 1) throw std::invalid_argument("point budget must be >= 1");
  grid.validate();
}

DomainProfile builtin_profile(const std::string& name) {
  DomainProfile p;
  p.name = name;
  if (name == "car64" || name == "car16") {
    p.n_layers = name == "car64" ? 64 : 16;
    p.elev_min_deg = -24.9;
    p.elev_max_deg = 2.0;
    p.azimuth_step_deg = 0.2;
    p.sensor_height = 2.0;
    p.max_range = 60.0;
    p.class_mix = {0.5, 0.25, 0.25};
    p.distance_range = {{{15.0, 45.0}, {15.0, 45.0}, {15.0, 45.0}}};
    p.objects_per_scene = {2, 6};
    p.object_azimuth_deg = 30.0;
    p.point_budget = 24000;
    p.grid = {0.0, 50.0, -25.0, 25.0, 0.5};
  } else if (name == "robot16") {
    p.n_layers = 16;
    p.elev_min_deg = -15.0;
    p.elev_max_deg = 15.0;
    p.azimuth_step_deg = 0.4;
    p.sensor_height = 0.6;
    p.max_range = 25.0;
    p.class_mix = {0.3, 0.45, 0.25};
    p.distance_range = {{{8.0, 15.0}, {2.0, 10.0}, {2.0, 10.0}}};
    p.objects_per_scene = {2, 5};
    p.object_azimuth_deg = 45.0;
    p.point_budget = 12000;
    p.grid = {0.0, 20.0, -10.0, 10.0, 0.5};
  } else {
    throw std::invalid_argument("unknown profile: " + name);
  }
  for (int k = 0; k < kNumClasses; ++k) {
    for (int a = 0; a < 3; ++a) p.size_std[k][a] = 0.1 * p.size_mean[k][a];
  }
  p.validate();
  return p;
}

std::vector<std::string> builtin_profile_names() {
  return {"car64", "car16", "robot16"};
}

std::optional<RayHit> cast_ray(const std::array<double, 3>& origin,
                               double elevation_rad, double azimuth_rad,
                               double ground_z, const std::vector<Box3D>& boxes,
                               double max_range) {
  const double ce = std::cos(elevation_rad);
  const std::array<double, 3> d = {ce * std::cos(azimuth_rad),
                                   ce * std::sin(azimuth_rad),
                                   std::sin(elevation_rad)};
  double best_t = std::numeric_limits<double>::infinity();
  int best_box = -2;
  if (d[2] < 0) {
    const double t = (ground_z - origin[2]) / d[2];
    if (t > 0 && t <= max_range) {
      best_t = t;
      best_box = -1;
    }
  }
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const Box3D& b = boxes[i];
    const double c = std::cos(b.yaw), s = std::sin(b.yaw);
    const double px = origin[0] - b.cx, py = origin[1] - b.cy,
                 pz = origin[2] - b.cz;
    const std::array<double, 3> po = {px * c + py * s, -px * s + py * c, pz};
    const std::array<double, 3> dir_obj = {d[0] * c + d[1] * s,
                                           -d[0] * s + d[1] * c, d[2]};
    const std::array<double, 3> half = {b.l / 2, b.w / 2, b.h / 2};
    double t_min = -std::numeric_limits<double>::infinity();
    double t_max = std::numeric_limits<double>::infinity();
    bool miss = false;
    for (int a = 0; a < 3 && !miss; ++a) {
      if (std::abs(dir_obj[a]) < 1e-12) {
        if (std::abs(po[a]) > half[a]) miss = true;
        continue;
      }
      const double t1 = (-half[a] - po[a]) / dir_obj[a];
      const double t2 = (half[a] - po[a]) / dir_obj[a];
      t_min = std::max(t_min, std::min(t1, t2));
      t_max = std::min(t_max, std::max(t1, t2));
    }
    if (miss || t_max < t_min) continue;
    const double t_enter = t_min;
    if (t_enter > 0 && t_enter <= max_range && t_enter < best_t) {
      best_t = t_enter;
      best_box = static_cast<int>(i);
    }
  }
  if (best_box == -2) return std::nullopt;
  // Box surface points advance a little along the ray so they land strictly
  // inside the box; ground hits stay on the plane.
  const double t_hit = best_box >= 0 ? best_t + 1e-6 : best_t;
  RayHit hit;
  hit.p = {origin[0] + t_hit * d[0], origin[1] + t_hit * d[1],
           origin[2] + t_hit * d[2]};
  hit.range = t_hit;
  hit.box_index = best_box;
  return hit;
}

namespace {

std::vector<double> layer_elevations_rad(const DomainProfile& p) {
  std::vector<double> elev(static_cast<std::size_t>(p.n_layers));
  if (p.n_layers == 1) {
    elev[0] = deg_to_rad(p.elev_min_deg);
    return elev;
  }
  const double step = (p.elev_max_deg - p.elev_min_deg) / (p.n_layers - 1);
  for (int i = 0; i < p.n_layers; ++i) {
    elev[static_cast<std::size_t>(i)] = deg_to_rad(p.elev_min_deg + i * step);
  }
  return elev;
}

}  // namespace

std::vector<std::pair<RayHit, uint16_t>> cast_full_fan(
    const DomainProfile& profile, const std::vector<Box3D>& boxes) {
  profile.validate();
  const std::array<double, 3> origin = {0, 0, 0};
  const double ground_z = -profile.sensor_height;
  const auto elev = layer_elevations_rad(profile);
  const long n_az = std::lround(360.0 / profile.azimuth_step_deg);
  const double az_step = deg_to_rad(profile.azimuth_step_deg);
  std::vector<std::pair<RayHit, uint16_t>> hits;
  for (std::size_t ring = 0; ring < elev.size(); ++ring) {
    for (long ai = 0; ai < n_az; ++ai) {
      const double az = -kPi + static_cast<double>(ai) * az_step;
      auto hit = cast_ray(origin, elev[ring], az, ground_z, boxes,
                          profile.max_range);
      if (hit) hits.emplace_back(*hit, static_cast<uint16_t>(ring));
    }
  }
  return hits;
}

namespace {

Box3D inflated_footprint(const Box3D& b) {
  Box3D out = b;
  out.l = b.l * 1.3;
  out.w = b.w * 1.3;
  return out;
}

int draw_class(const DomainProfile& p, RngStream& rng) {
  double total = 0;
  for (double m : p.class_mix) total += m;
  const double u = rng.uniform() * total;
  double cum = 0;
  for (int k = 0; k < kNumClasses; ++k) {
    cum += p.class_mix[k];
    if (u < cum) return k;
  }
  return kNumClasses - 1;
}

double clamped_size(double mean, double std_dev, RngStream& rng) {
  const double v = mean + std_dev * rng.normal();
  return std::clamp(v, mean - 2 * std_dev, mean + 2 * std_dev);
}

// Draws placements until the box center lies inside the grid (1 m margin)
// and the 1.3x-inflated footprint clears every box in `others`; throws
// GenerationError after 100 attempts.
Box3D place_object(const DomainProfile& p, int class_id,
                   const std::vector<Box3D>& others, std::size_t skip_index,
                   RngStream& rng) {
  const double ground_z = -p.sensor_height;
  const auto [d_lo, d_hi] = p.distance_range[static_cast<std::size_t>(class_id)];
  const double az_half = deg_to_rad(p.object_azimuth_deg);
  for (int attempt = 0; attempt < 100; ++attempt) {
    const double dist = rng.uniform(d_lo, d_hi);
    const double az = rng.uniform(-az_half, az_half);
    const double yaw = rng.uniform(-kPi, kPi);
    const auto& mean = p.size_mean[static_cast<std::size_t>(class_id)];
    const auto& sd = p.size_std[static_cast<std::size_t>(class_id)];
    const double l = clamped_size(mean[0], sd[0], rng);
    const double w = clamped_size(mean[1], sd[1], rng);
    const double h = clamped_size(mean[2], sd[2], rng);
    const double cx = dist * std::cos(az);
    const double cy = dist * std::sin(az);
    const Box3D box = make_box(cx, cy, ground_z + h / 2, l, w, h, yaw);
    if (cx < p.grid.x0 + 1 || cx > p.grid.x1 - 1 || cy < p.grid.y0 + 1 ||
        cy > p.grid.y1 - 1) {
      continue;
    }
    bool clear = true;
    for (std::size_t j = 0; j < others.size() && clear; ++j) {
      if (j == skip_index) continue;
      if (bev_intersection_area(inflated_footprint(box),
                                inflated_footprint(others[j])) > 0) {
        clear = false;
      }
    }
    if (clear) return box;
  }
  throw GenerationError("object placement failed after 100 attempts");
}

}  // namespace

Scene generate_scene(const DomainProfile& profile, RngStream& rng) {
  profile.validate();
  const int n_obj = rng.uniform_int(profile.objects_per_scene.first,
                                    profile.objects_per_scene.second);
  std::vector<LabeledBox> labels;
  std::vector<Box3D> boxes;
  labels.reserve(static_cast<std::size_t>(n_obj));
  for (int i = 0; i < n_obj; ++i) {
    const int class_id = draw_class(profile, rng);
    const Box3D box =
        place_object(profile, class_id, boxes, boxes.size(), rng);
    boxes.push_back(box);
    labels.push_back({box, class_id});
  }

  std::vector<std::pair<RayHit, uint16_t>> kept;
  for (int round = 0;; ++round) {
    if (round >= 100) {
      throw GenerationError("object kept zero scan points after 100 re-rolls");
    }
    const auto fan = cast_full_fan(profile, boxes);
    kept.clear();
    const std::size_t n = fan.size();
    if (n > profile.point_budget) {
      kept.reserve(profile.point_budget);
      for (std::size_t i = 0; i < profile.point_budget; ++i) {
        kept.push_back(fan[i * n / profile.point_budget]);
      }
    } else {
      kept = fan;
    }
    std::vector<int> hit_count(boxes.size(), 0);
    for (const auto& [hit, ring] : kept) {
      if (hit.box_index >= 0) ++hit_count[static_cast<std::size_t>(hit.box_index)];
    }
    bool all_hit = true;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      if (hit_count[i] == 0) {
        all_hit = false;
        boxes[i] = place_object(profile, labels[i].class_id, boxes, i, rng);
        labels[i].box = boxes[i];
      }
    }
    if (all_hit) break;
  }

  Scene scene;
  scene.scan.points.reserve(kept.size());
  for (const auto& [hit, ring] : kept) {
    LidarPoint pt;
    pt.x = hit.p[0];
    pt.y = hit.p[1];
    pt.z = hit.p[2];
    pt.intensity = rng.uniform();
    pt.ring = ring;
    scene.scan.points.push_back(pt);
  }
  scene.labels = std::move(labels);
  return scene;
}

DatasetStats dataset_stats(const std::vector<Scene>& scenes) {
  DatasetStats stats;
  std::array<double, kNumClasses> point_sum{};
  for (const Scene& scene : scenes) {
    for (const LabeledBox& label : scene.labels) {
      if (label.class_id < 0 || label.class_id >= kNumClasses) {
        throw std::invalid_argument("label class id out of range");
      }
      auto& cs = stats.per_class[static_cast<std::size_t>(label.class_id)];
      const double dist =
          std::sqrt(label.box.cx * label.box.cx + label.box.cy * label.box.cy);
      int n_inside = 0;
      for (const LidarPoint& p : scene.scan.points) {
        if (contains(label.box, {p.x, p.y, p.z})) ++n_inside;
      }
      ++cs.n_objects;
      cs.distance_hist[static_cast<int>(std::floor(dist))] += 1;
      cs.points_hist[n_inside] += 1;
      point_sum[static_cast<std::size_t>(label.class_id)] += n_inside;
    }
  }
  for (int k = 0; k < kNumClasses; ++k) {
    auto& cs = stats.per_class[static_cast<std::size_t>(k)];
    if (cs.n_objects > 0) {
      cs.mean_points = point_sum[static_cast<std::size_t>(k)] /
                       static_cast<double>(cs.n_objects);
    }
  }
  return stats;
}

}  // namespace uada
