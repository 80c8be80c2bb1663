#include "uada/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>

#include <json.hpp>

#include "uada/augment.hpp"

namespace uada {

namespace {

double box_iou(const Box3D& a, const Box3D& b, IouMode mode) {
  return mode == IouMode::bev ? iou_bev(a, b) : iou_3d(a, b);
}

struct RankedPred {
  double score;
  std::size_t scene;
  std::size_t index;
};

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::optional<double> average_precision(const std::vector<EvalScene>& scenes,
                                        int class_id, double iou_threshold,
                                        IouMode mode, MatchCounts* counts) {
  std::vector<std::vector<std::size_t>> gt_idx(scenes.size());
  std::size_t total_gt = 0;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    for (std::size_t i = 0; i < scenes[s].gts.size(); ++i) {
      if (scenes[s].gts[i].class_id == class_id) gt_idx[s].push_back(i);
    }
    total_gt += gt_idx[s].size();
  }

  std::vector<RankedPred> preds;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    for (std::size_t i = 0; i < scenes[s].preds.size(); ++i) {
      if (scenes[s].preds[i].class_id == class_id) {
        preds.push_back({scenes[s].preds[i].score, s, i});
      }
    }
  }
  std::sort(preds.begin(), preds.end(), [](const RankedPred& a, const RankedPred& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.scene != b.scene) return a.scene < b.scene;
    return a.index < b.index;
  });

  if (total_gt == 0) {
    if (counts) *counts = {0, preds.size(), 0};
    return std::nullopt;
  }

  std::vector<std::vector<bool>> used(scenes.size());
  for (std::size_t s = 0; s < scenes.size(); ++s) used[s].assign(gt_idx[s].size(), false);

  // Precision-recall points recorded at score-group boundaries so tied scores
  // enter or leave the prediction set together.
  std::vector<std::pair<double, double>> pr;  // (recall, precision)
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const RankedPred& rp = preds[i];
    const Detection& det = scenes[rp.scene].preds[rp.index];
    double best_iou = 0;
    std::size_t best = gt_idx[rp.scene].size();
    for (std::size_t j = 0; j < gt_idx[rp.scene].size(); ++j) {
      if (used[rp.scene][j]) continue;
      const double v = box_iou(det.box, scenes[rp.scene].gts[gt_idx[rp.scene][j]].box, mode);
      if (v >= iou_threshold && v > best_iou) {
        best_iou = v;
        best = j;
      }
    }
    if (best < gt_idx[rp.scene].size()) {
      used[rp.scene][best] = true;
      ++tp;
    } else {
      ++fp;
    }
    if (i + 1 == preds.size() || preds[i + 1].score != rp.score) {
      pr.emplace_back(static_cast<double>(tp) / static_cast<double>(total_gt),
                      static_cast<double>(tp) / static_cast<double>(tp + fp));
    }
  }

  double ap = 0;
  for (int i = 1; i <= 40; ++i) {
    const double r = static_cast<double>(i) / 40.0;
    double best_p = 0;
    for (const auto& [recall, precision] : pr) {
      if (recall >= r) best_p = std::max(best_p, precision);
    }
    ap += best_p;
  }
  ap /= 40.0;

  if (counts) *counts = {tp, fp, total_gt - tp};
  return ap;
}

EvalResult evaluate(const std::vector<EvalScene>& scenes,
                    const std::array<double, 3>& thresholds, int jobs) {
  EvalResult r;
  r.n_scenes = scenes.size();
  auto task = [&](int k) {
    r.ap3d[static_cast<std::size_t>(k)] =
        average_precision(scenes, k, thresholds[static_cast<std::size_t>(k)],
                          IouMode::box3d, &r.counts3d[static_cast<std::size_t>(k)]);
    r.apbev[static_cast<std::size_t>(k)] =
        average_precision(scenes, k, thresholds[static_cast<std::size_t>(k)],
                          IouMode::bev, &r.countsbev[static_cast<std::size_t>(k)]);
  };
  if (jobs > 1) {
    std::vector<std::thread> pool;
    for (int k = 0; k < kNumClasses; ++k) pool.emplace_back(task, k);
    for (std::thread& t : pool) t.join();
  } else {
    for (int k = 0; k < kNumClasses; ++k) task(k);
  }
  double sum3d = 0, sumbev = 0;
  int present = 0;
  for (int k = 0; k < kNumClasses; ++k) {
    if (r.ap3d[static_cast<std::size_t>(k)]) {
      sum3d += *r.ap3d[static_cast<std::size_t>(k)];
      sumbev += *r.apbev[static_cast<std::size_t>(k)];
      ++present;
    }
  }
  if (present > 0) {
    r.map3d = sum3d / present;
    r.mapbev = sumbev / present;
  }
  return r;
}

EvalResult evaluate_run(const DetectorModel& model, const DatasetOnDisk& data,
                        const EvalOptions& opt) {
  if (data.size() == 0) throw std::invalid_argument("evaluation dataset is empty");
  std::vector<EvalScene> scenes(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    PointCloud scan = data.load_scan_at(i);
    std::vector<LabeledBox> gts = data.load_labels_at(i);
    if (opt.apply_ground_shift) {
      auto shifted =
          ground_plane_shift(scan, gts, data.manifest.profile.sensor_height);
      scan = std::move(shifted.first);
      gts = std::move(shifted.second);
    }
    const BevGrid bev = featurize(scan, model.grid);
    Graph g;
    const DetectorForward f = detector_forward(g, model, bev);
    scenes[i].preds =
        decode_detections(f.cls_logits.data(), f.reg.data(), model.grid,
                          opt.conf_threshold, opt.nms_iou);
    scenes[i].gts = std::move(gts);
  }
  return evaluate(scenes, opt.iou_thresholds, opt.jobs);
}

double closed_gap(double m_model, double m_source, double m_oracle) {
  const double denom = m_oracle - m_source;
  if (denom == 0) {
    throw std::invalid_argument("closed gap undefined: oracle equals source");
  }
  return (m_model - m_source) / denom * 100.0;
}

HarmonizedMaps harmonize_maps(const std::vector<EvalResult>& runs) {
  HarmonizedMaps out;
  std::array<bool, 3> keep = {false, false, false};
  for (const EvalResult& r : runs) {
    for (std::size_t k = 0; k < 3; ++k) {
      if (r.ap3d[k]) keep[k] = true;
    }
  }
  int denom = 0;
  for (bool k : keep) denom += k ? 1 : 0;
  for (const EvalResult& r : runs) {
    double s3 = 0, sb = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      if (!keep[k]) continue;
      s3 += r.ap3d[k].value_or(0.0);
      sb += r.apbev[k].value_or(0.0);
    }
    out.map3d.push_back(denom ? s3 / denom : 0.0);
    out.mapbev.push_back(denom ? sb / denom : 0.0);
  }
  return out;
}

namespace {

constexpr std::array<const char*, 3> kClassNames = {"vehicle", "pedestrian",
                                                    "cyclist"};

}  // namespace

std::string eval_result_to_csv(const EvalResult& r) {
  std::string text = "key,value\n";
  auto put = [&text](const std::string& key, const std::string& value) {
    text += key + "," + value + "\n";
  };
  for (std::size_t k = 0; k < 3; ++k) {
    put(std::string("ap3d_") + kClassNames[k],
        r.ap3d[k] ? format_double(*r.ap3d[k]) : "");
  }
  for (std::size_t k = 0; k < 3; ++k) {
    put(std::string("apbev_") + kClassNames[k],
        r.apbev[k] ? format_double(*r.apbev[k]) : "");
  }
  put("map3d", format_double(r.map3d));
  put("mapbev", format_double(r.mapbev));
  for (std::size_t k = 0; k < 3; ++k) {
    const std::string suffix = kClassNames[k];
    put("tp3d_" + suffix, std::to_string(r.counts3d[k].tp));
    put("fp3d_" + suffix, std::to_string(r.counts3d[k].fp));
    put("fn3d_" + suffix, std::to_string(r.counts3d[k].fn));
    put("tpbev_" + suffix, std::to_string(r.countsbev[k].tp));
    put("fpbev_" + suffix, std::to_string(r.countsbev[k].fp));
    put("fnbev_" + suffix, std::to_string(r.countsbev[k].fn));
  }
  put("n_scenes", std::to_string(r.n_scenes));
  return text;
}

EvalResult eval_result_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "key,value") {
    throw std::runtime_error("eval csv missing key,value header");
  }
  std::map<std::string, std::string> kv;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) {
      throw std::runtime_error("malformed eval csv line: " + line);
    }
    kv[line.substr(0, comma)] = line.substr(comma + 1);
  }
  auto need = [&kv](const std::string& key) -> const std::string& {
    const auto it = kv.find(key);
    if (it == kv.end()) throw std::runtime_error("eval csv missing key: " + key);
    return it->second;
  };
  auto parse_opt = [&need](const std::string& key) -> std::optional<double> {
    const std::string& v = need(key);
    if (v.empty()) return std::nullopt;
    return std::stod(v);
  };
  EvalResult r;
  for (std::size_t k = 0; k < 3; ++k) {
    r.ap3d[k] = parse_opt(std::string("ap3d_") + kClassNames[k]);
    r.apbev[k] = parse_opt(std::string("apbev_") + kClassNames[k]);
    const std::string suffix = kClassNames[k];
    r.counts3d[k].tp = std::stoull(need("tp3d_" + suffix));
    r.counts3d[k].fp = std::stoull(need("fp3d_" + suffix));
    r.counts3d[k].fn = std::stoull(need("fn3d_" + suffix));
    r.countsbev[k].tp = std::stoull(need("tpbev_" + suffix));
    r.countsbev[k].fp = std::stoull(need("fpbev_" + suffix));
    r.countsbev[k].fn = std::stoull(need("fnbev_" + suffix));
  }
  r.map3d = std::stod(need("map3d"));
  r.mapbev = std::stod(need("mapbev"));
  r.n_scenes = std::stoull(need("n_scenes"));
  return r;
}

std::string eval_result_to_json(const EvalResult& r) {
  nlohmann::ordered_json j;
  for (std::size_t k = 0; k < 3; ++k) {
    const std::string key = std::string("ap3d_") + kClassNames[k];
    if (r.ap3d[k]) j[key] = *r.ap3d[k]; else j[key] = nullptr;
  }
  for (std::size_t k = 0; k < 3; ++k) {
    const std::string key = std::string("apbev_") + kClassNames[k];
    if (r.apbev[k]) j[key] = *r.apbev[k]; else j[key] = nullptr;
  }
  j["map3d"] = r.map3d;
  j["mapbev"] = r.mapbev;
  j["n_scenes"] = r.n_scenes;
  return j.dump(2) + "\n";
}

}  // namespace uada
