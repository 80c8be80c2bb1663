#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "uada/augment.hpp"
#include "uada/autodiff.hpp"
#include "uada/dataset_io.hpp"
#include "uada/detector.hpp"
#include "uada/optim.hpp"
#include "uada/synthgen.hpp"

// Adversarial domain alignment: per-instance feature masking, class-wise
// least-squares discriminators behind a gradient reversal layer, and the
// interleaved source/target training loop.

namespace uada {

enum class AlignmentMode { none, conditional, marginal, combined };
enum class DiscDesign { a, b, c };  // single, single max-conf-weighted, class-wise

AlignmentMode alignment_mode_from_string(const std::string& s);
std::string to_string(AlignmentMode mode);
DiscDesign disc_design_from_string(const std::string& s);
std::string to_string(DiscDesign design);

// Instance discriminators read the pooled features concatenated with the
// normalized box vector; the marginal discriminator reads single cells.
inline constexpr int kBoxVectorSize = 8;
inline constexpr int kInstanceHidden1 = 64;
inline constexpr int kInstanceHidden2 = 32;
inline constexpr int kMarginalHidden1 = 32;
inline constexpr int kMarginalHidden2 = 16;
inline constexpr double kDefaultConfidenceFloor = 0.1;
inline constexpr std::size_t kDefaultInstanceCap = 64;

struct Mlp3 {
  Param w1, b1, w2, b2, w3, b3;
  void init(const std::string& prefix, std::size_t in, std::size_t h1,
            std::size_t h2, RngStream& rng);
  std::vector<Param*> params();
  std::vector<const Param*> params() const;
};

// Two leaky_relu layers and a linear head; rows of x are independent inputs.
// The trainable overload routes parameters through differentiable graph
// inputs and appends them to the lists; the const overload fixes them.
Tensor mlp3_forward(Graph& g, Mlp3& mlp, const Tensor& x,
                    std::vector<Tensor>& leaves,
                    std::vector<Param*>& leaf_params);
Tensor mlp3_forward(Graph& g, const Mlp3& mlp, const Tensor& x);

struct Discriminators {
  AlignmentMode mode = AlignmentMode::conditional;
  DiscDesign design = DiscDesign::c;
  int feature_channels = 32;
  std::vector<Mlp3> instance;  // one per class for design c, one otherwise
  Mlp3 marginal;               // initialized for marginal and combined modes
  // Weights drawn from RngStream(seed, "init/disc").
  void init(int feature_channels, AlignmentMode mode, DiscDesign design,
            uint64_t seed);
  std::vector<Param*> params();
  std::vector<const Param*> params() const;
};

std::vector<Param> discriminators_to_params(const Discriminators& d);
Discriminators discriminators_from_params(const std::vector<Param>& params);

// Mean of the feature-map rows whose cell centers fall inside the box's BEV
// footprint; nullopt when no center does. pooled is differentiable back to
// exactly the masked cells.
struct MaskedInstanceFeature {
  Tensor pooled;                  // [F]
  std::vector<std::size_t> mask;  // flat cell indices, ascending
};
std::optional<MaskedInstanceFeature> mask_features(Graph& g, const Tensor& fm,
                                                   const GridSpec& grid,
                                                   const Box3D& box);

// Cells whose centers lie inside the footprint, ascending flat index.
std::vector<std::size_t> footprint_cells(const GridSpec& grid, const Box3D& box);

// Per-class mean (l, w, h), used to normalize box vectors.
using ClassSizeMeans = std::array<std::array<double, 3>, 3>;
ClassSizeMeans profile_size_means(const DomainProfile& profile);

struct AlignmentConfig {
  AlignmentMode mode = AlignmentMode::conditional;
  DiscDesign design = DiscDesign::c;
  double conf_floor = kDefaultConfidenceFloor;
  std::size_t instance_cap = kDefaultInstanceCap;
  // Confidence weights are plain numbers by default; switching this on routes
  // them through the graph so the weighting itself is differentiated.
  bool differentiate_confidence = false;
  ClassSizeMeans class_size_means = {{{4.2, 1.8, 1.6}, {0.6, 0.6, 1.7}, {1.8, 0.6, 1.5}}};
};

// Pre-suppression detections above the confidence floor, capped by score,
// with their footprint masks; ordered by anchor cell.
struct InstanceBatch {
  std::vector<std::size_t> cells;
  std::vector<int> routed_class;                    // argmax confidence
  std::vector<std::array<double, 3>> conf;
  std::vector<Box3D> boxes;                         // decoded, for masks
  std::vector<std::vector<std::size_t>> masks;      // footprint cells
  std::size_t skipped_empty_mask = 0;
};
InstanceBatch collect_instances(const std::vector<double>& cls_logits,
                                const std::vector<double>& reg,
                                const GridSpec& grid, double conf_floor,
                                std::size_t cap);

// Least-squares domain loss over explicit instance rows: for each instance n
// and class k, weight * (disc_k(row_n) - domain)^2, averaged over instances.
// Weights follow the design: per-class confidence (c), max confidence (b),
// or 1 (a). conf_graph (when set, [N x K]) replaces the plain weights so the
// confidences are differentiated through.
struct CondLossInput {
  Tensor inst;                              // [N x (F + kBoxVectorSize)]
  std::vector<std::array<double, 3>> conf;  // per instance
  std::optional<Tensor> conf_graph;
};
Tensor conditional_loss_term(Graph& g, const CondLossInput& in, int domain,
                             Discriminators& disc, std::vector<Tensor>* leaves,
                             std::vector<Param*>* leaf_params);

// Per-cell binary cross-entropy of the marginal discriminator against the
// domain label, averaged over cells.
Tensor marginal_loss_term(Graph& g, const Tensor& features, int domain,
                          Discriminators& disc, std::vector<Tensor>* leaves,
                          std::vector<Param*>* leaf_params);

// Builds the full alignment loss for one scene's forward pass: instances are
// collected from the decoded heads, features pass through the reversal layer,
// and the mode picks conditional, marginal, or their sum. disc_leaves and
// disc_params list exactly the discriminator tensors that entered the graph.
struct AlignmentLoss {
  Tensor loss;
  std::size_t n_instances = 0;
  std::size_t skipped_empty_mask = 0;
  bool has_conditional = false;  // false when no instance cleared the floor
  std::vector<Tensor> disc_leaves;
  std::vector<Param*> disc_params;
};
AlignmentLoss alignment_loss(Graph& g, const DetectorForward& f,
                             const GridSpec& grid, Discriminators& disc,
                             int domain, const GrlCoefficient& coeff,
                             double progress, const AlignmentConfig& cfg);

// Thresholded-at-0.5 domain classification accuracy; a score strictly above
// 0.5 predicts target, so ties break to source.
struct DiscAccuracy {
  std::size_t correct = 0;
  std::size_t total_source = 0;
  std::size_t total_target = 0;
  bool valid() const { return total_source > 0 && total_target > 0; }
  double value() const {
    return static_cast<double>(correct) /
           static_cast<double>(total_source + total_target);
  }
};
DiscAccuracy domain_accuracy(const std::vector<double>& source_scores,
                             const std::vector<double>& target_scores);

// Discriminator outputs for one scan: per instance through its routed class's
// discriminator (instance modes), or per cell (marginal mode).
std::vector<double> instance_domain_scores(const DetectorModel& model,
                                           const Discriminators& disc,
                                           const PointCloud& scan,
                                           const AlignmentConfig& cfg);

// Epoch schedule: both datasets shuffled, then interleaved by drawing each
// next sample from a domain with probability proportional to how many of its
// samples remain, and chunked into batches.
struct BatchItem {
  int domain;  // 0 source, 1 target
  std::size_t index;
};
std::vector<std::vector<BatchItem>> build_epoch_schedule(
    std::size_t n_source, std::size_t n_target, std::size_t batch_size,
    uint64_t seed, uint64_t epoch);

class SceneSource {
 public:
  virtual ~SceneSource() = default;
  virtual std::size_t size() const = 0;
  virtual Scene load(std::size_t i) const = 0;
  virtual const DomainProfile& profile() const = 0;
};

class MemoryScenes final : public SceneSource {
 public:
  MemoryScenes(DomainProfile profile, std::vector<Scene> scenes);
  std::size_t size() const override { return scenes_.size(); }
  Scene load(std::size_t i) const override;
  const DomainProfile& profile() const override { return profile_; }

 private:
  DomainProfile profile_;
  std::vector<Scene> scenes_;
};

// Reads each scene from disk on demand so large datasets never sit in memory.
class DiskScenes final : public SceneSource {
 public:
  explicit DiskScenes(DatasetOnDisk data);
  std::size_t size() const override { return data_.size(); }
  Scene load(std::size_t i) const override;
  const DomainProfile& profile() const override {
    return data_.manifest.profile;
  }

 private:
  DatasetOnDisk data_;
};

struct TrainOptions {
  uint64_t seed = 0;
  GridSpec grid;
  int feature_channels = 32;
  int epochs = 1;
  std::size_t batch_size = 1;
  AlignmentMode mode = AlignmentMode::none;
  DiscDesign design = DiscDesign::c;
  GrlCoefficient lambda = GrlCoefficient::constant(0.1);
  double lr_detector = 1e-3;
  double lr_discriminator = 1e-3;
  double conf_floor = kDefaultConfidenceFloor;
  std::size_t instance_cap = kDefaultInstanceCap;
  bool differentiate_confidence = false;
  bool ros = false;
  RosConfig ros_config{};
  int downsample_k = 1;
  bool ground_shift = false;
  // Detection and alignment gradients combine in one optimizer step by
  // default; the sequential variant steps on the detection loss first, then
  // re-runs the forward pass for the alignment step.
  bool sequential_updates = false;
  bool log_target_map = true;
  double eval_conf_threshold = 0.1;
  double eval_nms_iou = 0.5;
  std::size_t disc_acc_scenes = 50;
  int jobs = 1;  // per-class AP threads in the per-epoch evaluation
};

struct EpochRow {
  int epoch = 0;  // 1-based
  double l_det = 0;
  std::optional<double> l_align;
  std::optional<double> disc_acc;
  std::optional<double> map3d;
  std::optional<double> mapbev;
  double lambda = 0;  // value used in the epoch's final batch
};

// Header plus one row per epoch; absent values are empty fields.
std::string train_log_csv(const std::vector<EpochRow>& rows);

struct TrainResult {
  DetectorModel model;
  Discriminators discs;  // initialized only for alignment modes
  std::vector<EpochRow> rows;
  std::string log_csv;
  std::size_t batches_without_instances = 0;
};

struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// labeled supplies detection supervision (the source domain, or the target
// itself for an oracle run); target supplies unlabeled scans for alignment
// and must be present exactly when mode is not none. Scaling and layer
// downsampling apply to labeled scenes only; the ground shift applies to both
// domains with each profile's own sensor height.
TrainResult train_detector(const SceneSource& labeled,
                           const SceneSource* target, const TrainOptions& opt);

// Model weights plus the metadata evaluation needs: meta.ground_shift and
// meta.class_size_means ride along with the detector tensors.
std::vector<Param> training_checkpoint_params(const DetectorModel& model,
                                              bool ground_shift,
                                              const ClassSizeMeans& means);

}  // namespace uada
