#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "uada/autodiff.hpp"
#include "uada/optim.hpp"
#include "uada/pointcloud.hpp"
#include "uada/synthgen.hpp"

// Toy BEV detector: per-cell grid statistics, a two-layer 3x3-window feature
// network, and dense per-cell class/box heads. Cell (ix, iy) flattens to
// ix*ny + iy; H is the x axis, W the y axis.

namespace uada {

constexpr int kGridFeatures = 4;   // log1p count, mean z, max z, mean intensity
constexpr int kRegFeatures = 8;    // dx, dy, z, log l, log w, log h, sin, cos
constexpr double kLogitClamp = 15.0;

struct BevGrid {
  std::size_t nx = 0, ny = 0;
  std::vector<double> features;  // [nx*ny x kGridFeatures] row-major
};

// Bins points by floor((x-x0)/cell, (y-y0)/cell); out-of-range points are
// dropped; empty cells keep all-zero features.
BevGrid featurize(const PointCloud& scan, const GridSpec& grid);

double cell_center_x(const GridSpec& grid, std::size_t ix);
double cell_center_y(const GridSpec& grid, std::size_t iy);

struct DetectorModel {
  GridSpec grid;
  int feature_channels = 32;
  Param w1, b1;          // [9*kGridFeatures x F], [F]
  Param w2, b2;          // [9F x F], [F]
  Param w_cls, b_cls;    // [F x kNumClasses], [kNumClasses]
  Param w_reg, b_reg;    // [F x kRegFeatures], [kRegFeatures]

  // Xavier weights, zero biases, drawn from RngStream(seed, "init/det").
  void init(uint64_t seed);
  std::vector<Param*> params();
  std::vector<const Param*> params() const;
};

// Checkpoint layout: the eight det.* weight tensors plus meta.grid
// [x0, x1, y0, y1, cell] and meta.feature_channels. Extra meta.* entries are
// carried by the caller and ignored here.
std::vector<Param> model_to_params(const DetectorModel& m);
// Rebuilds the model; missing tensors, a malformed grid, or weight shapes
// that disagree with meta.feature_channels raise std::invalid_argument.
DetectorModel model_from_params(const std::vector<Param>& params);

struct DetectorForward {
  Tensor feature_map;  // [HW x F]
  Tensor cls_logits;   // [HW x K]
  Tensor reg;          // [HW x 8]
  // Graph leaves for the model parameters, ordered as DetectorModel::params();
  // gradients are read from these after backward().
  std::vector<Tensor> leaves;
};

DetectorForward detector_forward(Graph& g, const DetectorModel& m,
                                 const BevGrid& grid);

struct CellTargets {
  std::vector<std::size_t> cells;                 // positive flat indices
  std::vector<int> classes;                       // parallel to cells
  std::vector<std::array<double, kRegFeatures>> residuals;
  int skipped = 0;  // labels outside the grid or colliding on a cell
};

CellTargets assign_targets(const std::vector<LabeledBox>& labels,
                           const GridSpec& grid);

std::array<double, kRegFeatures> encode_box(const Box3D& box, double center_x,
                                            double center_y, double cell);
Box3D decode_box(const std::array<double, kRegFeatures>& r, double center_x,
                 double center_y, double cell);

struct LossBreakdown {
  Tensor total;  // cls + 2 * reg
  Tensor cls;
  Tensor reg;    // scalar zero when no positive cell
  int positives = 0;
  int skipped_labels = 0;
};

LossBreakdown detection_loss(Graph& g, const DetectorForward& f,
                             const std::vector<LabeledBox>& labels,
                             const GridSpec& grid);

// Per-cell sigmoid confidences and decoded boxes for cells whose best class
// confidence reaches conf_threshold, in cell order; no suppression.
std::vector<Detection> decode_raw(const std::vector<double>& cls_logits,
                                  const std::vector<double>& reg,
                                  const GridSpec& grid, double conf_threshold);

// decode_raw followed by class-wise BEV NMS.
std::vector<Detection> decode_detections(const std::vector<double>& cls_logits,
                                         const std::vector<double>& reg,
                                         const GridSpec& grid,
                                         double conf_threshold, double nms_iou);

}  // namespace uada
