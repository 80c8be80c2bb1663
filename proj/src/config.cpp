#include "uada/config.hpp"

#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace uada {
namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

[[noreturn]] void fail(const std::string& context, std::size_t line,
                       const std::string& what) {
  throw std::invalid_argument(context + ":" + std::to_string(line) + ": " + what);
}

double parse_double(const std::string& v, const std::string& context,
                    std::size_t line, const std::string& key) {
  std::size_t pos = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    fail(context, line, "key '" + key + "': not a number: '" + v + "'");
  }
  if (pos != v.size())
    fail(context, line, "key '" + key + "': trailing characters in '" + v + "'");
  return out;
}

int64_t parse_int(const std::string& v, const std::string& context,
                  std::size_t line, const std::string& key) {
  std::size_t pos = 0;
  int64_t out = 0;
  try {
    out = std::stoll(v, &pos);
  } catch (const std::exception&) {
    fail(context, line, "key '" + key + "': not an integer: '" + v + "'");
  }
  if (pos != v.size())
    fail(context, line, "key '" + key + "': trailing characters in '" + v + "'");
  return out;
}

bool parse_bool(const std::string& v, const std::string& context,
                std::size_t line, const std::string& key) {
  if (v == "true") return true;
  if (v == "false") return false;
  fail(context, line, "key '" + key + "': expected true or false, got '" + v + "'");
}

}  // namespace

RunMode run_mode_from_string(const std::string& s) {
  if (s == "source-only") return RunMode::source_only;
  if (s == "oracle") return RunMode::oracle;
  if (s == "uada3d") return RunMode::uada3d;
  if (s == "uada3d-marginal") return RunMode::uada3d_marginal;
  if (s == "uada3d-combined") return RunMode::uada3d_combined;
  throw std::invalid_argument("unknown mode: '" + s + "'");
}

std::string to_string(RunMode mode) {
  switch (mode) {
    case RunMode::source_only: return "source-only";
    case RunMode::oracle: return "oracle";
    case RunMode::uada3d: return "uada3d";
    case RunMode::uada3d_marginal: return "uada3d-marginal";
    case RunMode::uada3d_combined: return "uada3d-combined";
  }
  throw std::invalid_argument("bad RunMode");
}

AlignmentMode alignment_of(RunMode mode) {
  switch (mode) {
    case RunMode::source_only:
    case RunMode::oracle: return AlignmentMode::none;
    case RunMode::uada3d: return AlignmentMode::conditional;
    case RunMode::uada3d_marginal: return AlignmentMode::marginal;
    case RunMode::uada3d_combined: return AlignmentMode::combined;
  }
  throw std::invalid_argument("bad RunMode");
}

GridSpec RunConfig::grid() const {
  return GridSpec{grid_x0, grid_x1, grid_y0, grid_y1, grid_cell};
}

GrlCoefficient RunConfig::grl() const {
  if (lambda_scheduled) return GrlCoefficient::scheduled(lambda_alpha, lambda_gamma);
  return GrlCoefficient::constant(lambda);
}

RosConfig RunConfig::ros_config() const {
  RosConfig rc;
  rc.intervals[0] = {ros_vehicle_min, ros_vehicle_max};
  rc.intervals[1] = {ros_pedcyc_min, ros_pedcyc_max};
  rc.intervals[2] = {ros_pedcyc_min, ros_pedcyc_max};
  return rc;
}

RunConfig parse_run_config(const std::string& text, const std::string& context) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  bool have_mode = false;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      fail(context, line_no, "expected key = value, got '" + line + "'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) fail(context, line_no, "empty key");
    if (value.empty()) fail(context, line_no, "key '" + key + "': empty value");
    if (!seen.insert(key).second)
      fail(context, line_no, "duplicate key '" + key + "'");

    if (key == "seed") {
      int64_t v = parse_int(value, context, line_no, key);
      if (v < 0) fail(context, line_no, "seed must be >= 0");
      cfg.seed = static_cast<uint64_t>(v);
    } else if (key == "mode") {
      try {
        cfg.mode = run_mode_from_string(value);
      } catch (const std::invalid_argument& e) {
        fail(context, line_no, e.what());
      }
      have_mode = true;
    } else if (key == "source") {
      cfg.source = value;
    } else if (key == "target") {
      cfg.target = value;
    } else if (key == "source_scenes") {
      int64_t v = parse_int(value, context, line_no, key);
      if (v < 0) fail(context, line_no, "source_scenes must be >= 0");
      cfg.source_scenes = static_cast<std::size_t>(v);
    } else if (key == "target_scenes") {
      int64_t v = parse_int(value, context, line_no, key);
      if (v < 0) fail(context, line_no, "target_scenes must be >= 0");
      cfg.target_scenes = static_cast<std::size_t>(v);
    } else if (key == "grid_x0") {
      cfg.grid_x0 = parse_double(value, context, line_no, key);
    } else if (key == "grid_x1") {
      cfg.grid_x1 = parse_double(value, context, line_no, key);
    } else if (key == "grid_y0") {
      cfg.grid_y0 = parse_double(value, context, line_no, key);
    } else if (key == "grid_y1") {
      cfg.grid_y1 = parse_double(value, context, line_no, key);
    } else if (key == "grid_cell") {
      cfg.grid_cell = parse_double(value, context, line_no, key);
    } else if (key == "feature_channels") {
      int64_t v = parse_int(value, context, line_no, key);
      if (v < 1) fail(context, line_no, "feature_channels must be >= 1");
      cfg.feature_channels = static_cast<int>(v);
    } else if (key == "ros") {
      cfg.ros = parse_bool(value, context, line_no, key);
    } else if (key == "ros_vehicle_min") {
      cfg.ros_vehicle_min = parse_double(value, context, line_no, key);
    } else if (key == "ros_vehicle_max") {
      cfg.ros_vehicle_max = parse_double(value, context, line_no, key);
    } else if (key == "ros_pedcyc_min") {
      cfg.ros_pedcyc_min = parse_double(value, context, line_no, key);
    } else if (key == "ros_pedcyc_max") {
      cfg.ros_pedcyc_max = parse_double(value, context, line_no, key);
    } else if (key == "downsample_k") {
      int64_t v = parse_int(value, context, line_no, key);
      if (v < 1) fail(context, line_no, "downsample_k must be >= 1");
      cfg.downsample_k = static_cast<int>(v);
    } else if (key == "ground_shift") {
      cfg.ground_shift = parse_bool(value, context, line_no, key);
    } else if (key == "design") {
      try {
        cfg.design = disc_design_from_string(value);
      } catch (const std::invalid_argument& e) {
        fail(context, line_no, e.what());
      }
    } else if (key == "lambda_mode") {
      if (value == "constant") {
        cfg.lambda_scheduled = false;
      } else if (value == "scheduled") {
        cfg.lambda_scheduled = true;
      } else {
        fail(context, line_no, "lambda_mode must be constant or scheduled");
      }
    } else if (key == "lambda") {
      cfg.lambda = parse_double(value, context, line_no, key);
    } else if (key == "lambda_alpha") {
      cfg.lambda_alpha = parse_double(value, context, line_no, key);
    } else if (key == "lambda_gamma") {
      cfg.lambda_gamma = parse_double(value, context, line_no, key);
    } else if (key == "epochs") {
      int64_t v = parse_int(value, context, line_no, key);
      if (v < 0) fail(context, line_no, "epochs must be >= 0");
      cfg.epochs = static_cast<int>(v);
    } else if (key == "batch_size") {
      int64_t v = parse_int(value, context, line_no, key);
      if (v < 1) fail(context, line_no, "batch_size must be >= 1");
      cfg.batch_size = static_cast<std::size_t>(v);
    } else if (key == "lr_detector") {
      cfg.lr_detector = parse_double(value, context, line_no, key);
    } else if (key == "lr_discriminator") {
      cfg.lr_discriminator = parse_double(value, context, line_no, key);
    } else if (key == "conf_floor") {
      cfg.conf_floor = parse_double(value, context, line_no, key);
    } else if (key == "eval_conf_threshold") {
      cfg.eval_conf_threshold = parse_double(value, context, line_no, key);
    } else if (key == "out_dir") {
      cfg.out_dir = value;
    } else {
      fail(context, line_no, "unknown key '" + key + "'");
    }
  }

  if (!have_mode) throw std::invalid_argument(context + ": missing required key 'mode'");
  if (cfg.out_dir.empty())
    throw std::invalid_argument(context + ": missing required key 'out_dir'");
  const bool needs_source = cfg.mode != RunMode::oracle;
  const bool needs_target = cfg.mode != RunMode::source_only;
  if (needs_source && cfg.source.empty())
    throw std::invalid_argument(context + ": mode " + to_string(cfg.mode) +
                                " requires 'source'");
  if (needs_target && cfg.target.empty())
    throw std::invalid_argument(context + ": mode " + to_string(cfg.mode) +
                                " requires 'target'");
  cfg.grid().validate();
  for (const auto& iv : cfg.ros_config().intervals) {
    if (!(iv.first > 0.0) || !(iv.second >= iv.first))
      throw std::invalid_argument(context + ": ros interval [" +
                                  std::to_string(iv.first) + ", " +
                                  std::to_string(iv.second) + "] invalid");
  }
  if (!(cfg.lr_detector > 0.0) || !(cfg.lr_discriminator > 0.0))
    throw std::invalid_argument(context + ": learning rates must be > 0");
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path);
}

std::string resolved_config_json(const RunConfig& cfg) {
  nlohmann::ordered_json j;
  j["seed"] = cfg.seed;
  j["mode"] = to_string(cfg.mode);
  j["source"] = cfg.source;
  j["target"] = cfg.target;
  j["source_scenes"] = cfg.source_scenes;
  j["target_scenes"] = cfg.target_scenes;
  j["grid_x0"] = cfg.grid_x0;
  j["grid_x1"] = cfg.grid_x1;
  j["grid_y0"] = cfg.grid_y0;
  j["grid_y1"] = cfg.grid_y1;
  j["grid_cell"] = cfg.grid_cell;
  j["feature_channels"] = cfg.feature_channels;
  j["ros"] = cfg.ros;
  j["ros_vehicle_min"] = cfg.ros_vehicle_min;
  j["ros_vehicle_max"] = cfg.ros_vehicle_max;
  j["ros_pedcyc_min"] = cfg.ros_pedcyc_min;
  j["ros_pedcyc_max"] = cfg.ros_pedcyc_max;
  j["downsample_k"] = cfg.downsample_k;
  j["ground_shift"] = cfg.ground_shift;
  j["design"] = to_string(cfg.design);
  j["lambda_mode"] = cfg.lambda_scheduled ? "scheduled" : "constant";
  j["lambda"] = cfg.lambda;
  j["lambda_alpha"] = cfg.lambda_alpha;
  j["lambda_gamma"] = cfg.lambda_gamma;
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["lr_detector"] = cfg.lr_detector;
  j["lr_discriminator"] = cfg.lr_discriminator;
  j["conf_floor"] = cfg.conf_floor;
  j["eval_conf_threshold"] = cfg.eval_conf_threshold;
  j["out_dir"] = cfg.out_dir;
  return j.dump(2) + "\n";
}

}  // namespace uada
