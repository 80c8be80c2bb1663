#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "uada/dataset_io.hpp"
#include "uada/detector.hpp"
#include "uada/geometry.hpp"

// KITTI-style detection scoring: greedy matching, 40-point interpolated
// average precision, and the closed-gap summary used to compare adaptation
// runs against their source-only floor and oracle ceiling.

namespace uada {

// Matching thresholds per class id (vehicle, pedestrian, cyclist), used for
// both BEV and 3D IoU.
inline constexpr std::array<double, 3> kIouThresholds = {0.7, 0.5, 0.5};

struct EvalScene {
  std::vector<Detection> preds;
  std::vector<LabeledBox> gts;
};

struct MatchCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
};

// Predictions are matched per scene in descending score order; each ground
// truth matches at most once, at IoU >= iou_threshold, same class. AP is the
// mean over recall levels {1/40, ..., 40/40} of the best precision at or past
// that recall, with precision-recall points taken at score-group boundaries.
// Returns nullopt when no scene has ground truth of the class; counts (if
// requested) cover the full prediction set.
std::optional<double> average_precision(const std::vector<EvalScene>& scenes,
                                        int class_id, double iou_threshold,
                                        IouMode mode,
                                        MatchCounts* counts = nullptr);

struct EvalResult {
  std::array<std::optional<double>, 3> ap3d;
  std::array<std::optional<double>, 3> apbev;
  std::array<MatchCounts, 3> counts3d;
  std::array<MatchCounts, 3> countsbev;
  // Mean over classes that have ground truth; 0 when none do.
  double map3d = 0;
  double mapbev = 0;
  std::size_t n_scenes = 0;
};

// jobs > 1 spreads the six per-class computations over threads; results do
// not depend on jobs.
EvalResult evaluate(const std::vector<EvalScene>& scenes,
                    const std::array<double, 3>& thresholds = kIouThresholds,
                    int jobs = 1);

struct EvalOptions {
  double conf_threshold = 0.1;
  double nms_iou = 0.5;
  std::array<double, 3> iou_thresholds = kIouThresholds;
  // Mirrors the training-time ground-plane shift: when true, scans and labels
  // are lifted by the dataset profile's sensor height before scoring.
  bool apply_ground_shift = false;
  int jobs = 1;
};

// Runs the detector over every scene (decode, then suppression) and scores
// the detections against the dataset labels.
EvalResult evaluate_run(const DetectorModel& model, const DatasetOnDisk& data,
                        const EvalOptions& opt);

// (m_model - m_source) / (m_oracle - m_source) * 100; throws
// std::invalid_argument when oracle equals source.
double closed_gap(double m_model, double m_source, double m_oracle);

// Per-run means recomputed with a shared class denominator: classes without
// ground truth in every run are dropped; classes missing in only some runs
// count as 0 there.
struct HarmonizedMaps {
  std::vector<double> map3d;
  std::vector<double> mapbev;
};
HarmonizedMaps harmonize_maps(const std::vector<EvalResult>& runs);

// key,value CSV and a JSON object with the same field names; absent APs are
// empty in CSV and null in JSON. Numbers print with enough digits to
// round-trip exactly.
std::string eval_result_to_csv(const EvalResult& r);
EvalResult eval_result_from_csv(const std::string& text);
std::string eval_result_to_json(const EvalResult& r);

}  // namespace uada
