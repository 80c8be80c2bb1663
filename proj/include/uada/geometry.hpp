#pragma once

#include <array>
#include <vector>

// Oriented 3D box math. World->object rotation uses the row-vector
// convention p_obj = (p - c) . R(yaw), so a box's own heading axis maps to
// object x. All boxes carry yaw in (-pi, pi] and positive extents.

namespace uada {

constexpr int kNumClasses = 3;  // 0 Vehicle, 1 Pedestrian, 2 Cyclist

struct Box3D {
  double cx = 0, cy = 0, cz = 0;
  double l = 1, w = 1, h = 1;
  double yaw = 0;
};

struct LabeledBox {
  Box3D box;
  int class_id = 0;
};

struct Detection {
  Box3D box;
  int class_id = 0;
  double score = 0;
  std::array<double, kNumClasses> confidence{};
};

enum class IouMode { bev, box3d };

// Wraps into (-pi, pi].
double normalize_yaw(double yaw);
// Throws std::invalid_argument unless l,w,h > 0 and class ids (when given)
// are valid; returns the box with yaw normalized.
Box3D make_box(double cx, double cy, double cz, double l, double w, double h,
               double yaw);

std::array<double, 3> to_object_frame(const std::array<double, 3>& p,
                                      const Box3D& box);
std::array<double, 3> from_object_frame(const std::array<double, 3>& p_obj,
                                        const Box3D& box);

// Boundary-inclusive: |p_obj| <= half extents on every axis.
bool contains(const Box3D& box, const std::array<double, 3>& p);
// BEV-only membership of an (x, y) position inside the yaw-rotated footprint.
bool footprint_contains(const Box3D& box, double x, double y);

// Footprint corners, counter-clockwise.
std::array<std::array<double, 2>, 4> bev_corners(const Box3D& box);

// Rotated-rectangle intersection by Sutherland-Hodgman clipping + shoelace;
// negative slivers from clipping round-off clamp to 0.
double bev_intersection_area(const Box3D& a, const Box3D& b);
double iou_bev(const Box3D& a, const Box3D& b);
double iou_3d(const Box3D& a, const Box3D& b);

// Greedy class-wise suppression: score descending (ties: lower cx, then
// lower cy), keep iff IoU with every kept same-class detection < threshold.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold,
                           IouMode mode);

}  // namespace uada
