#pragma once

#include <cstdint>
#include <string>

#include "uada/adapt.hpp"

// Flat key=value run configuration: greppable, diffable experiment ledgers.
// Unknown and duplicate keys are rejected so typos cannot silently fall back
// to defaults.

namespace uada {

// The five run modes: plain supervised training on the source, the oracle
// (supervised on the target's own labels), and the three alignment variants.
enum class RunMode { source_only, oracle, uada3d, uada3d_marginal, uada3d_combined };

RunMode run_mode_from_string(const std::string& s);
std::string to_string(RunMode mode);

// Alignment carried by each run mode; source-only and oracle train without one.
AlignmentMode alignment_of(RunMode mode);

struct RunConfig {
  uint64_t seed = 0;
  RunMode mode = RunMode::source_only;
  // Builtin profile name (scenes generated in memory) or dataset directory.
  std::string source;
  std::string target;
  std::size_t source_scenes = 100;  // used only when source names a profile
  std::size_t target_scenes = 100;
  double grid_x0 = 0.0, grid_x1 = 50.0, grid_y0 = -25.0, grid_y1 = 25.0;
  double grid_cell = 0.5;
  int feature_channels = 32;
  bool ros = false;
  double ros_vehicle_min = 0.8, ros_vehicle_max = 1.2;
  double ros_pedcyc_min = 0.9, ros_pedcyc_max = 1.1;
  int downsample_k = 1;
  bool ground_shift = false;
  DiscDesign design = DiscDesign::c;
  bool lambda_scheduled = false;
  double lambda = 0.1;         // constant mode
  double lambda_alpha = 0.1;   // scheduled mode
  double lambda_gamma = 10.0;
  int epochs = 1;
  std::size_t batch_size = 1;
  double lr_detector = 1e-3;
  double lr_discriminator = 1e-3;
  double conf_floor = 0.1;           // instance collection
  double eval_conf_threshold = 0.1;  // detection decoding
  std::string out_dir;

  GridSpec grid() const;
  GrlCoefficient grl() const;
  RosConfig ros_config() const;
};

// Parses and validates; context names the source in error messages.
RunConfig parse_run_config(const std::string& text,
                           const std::string& context = "<string>");
RunConfig load_run_config(const std::string& path);

// Every key with its resolved value, sufficient to re-run identically.
std::string resolved_config_json(const RunConfig& cfg);

}  // namespace uada
