#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <set>
#include <stdexcept>
#include <vector>

#include "uada/evalmetrics.hpp"
#include "uada/rng.hpp"

using namespace uada;

namespace {

LabeledBox gt_at(double x, double y, int class_id = 0) {
  return {make_box(x, y, 0.0, 3.0, 2.0, 1.5, 0.0), class_id};
}

Detection pred_at(double x, double y, double score, int class_id = 0) {
  Detection d;
  d.box = make_box(x, y, 0.0, 3.0, 2.0, 1.5, 0.0);
  d.class_id = class_id;
  d.score = score;
  return d;
}

// Threshold-sweep oracle: at every distinct score, rematch the kept subset
// from scratch and take a PR point; AP is the 40-level interpolated mean.
double sweep_ap(const std::vector<EvalScene>& scenes, int class_id,
                double iou_threshold, IouMode mode) {
  struct Ref {
    double score;
    std::size_t scene, index;
  };
  std::vector<Ref> all;
  std::size_t total_gt = 0;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    for (std::size_t i = 0; i < scenes[s].preds.size(); ++i) {
      if (scenes[s].preds[i].class_id == class_id) {
        all.push_back({scenes[s].preds[i].score, s, i});
      }
    }
    for (const LabeledBox& gt : scenes[s].gts) {
      total_gt += gt.class_id == class_id ? 1 : 0;
    }
  }
  REQUIRE(total_gt > 0);
  std::sort(all.begin(), all.end(), [](const Ref& a, const Ref& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.scene != b.scene) return a.scene < b.scene;
    return a.index < b.index;
  });
  std::set<double, std::greater<double>> thresholds;
  for (const Ref& r : all) thresholds.insert(r.score);

  std::vector<std::pair<double, double>> pr;
  for (double t : thresholds) {
    std::vector<std::vector<bool>> used(scenes.size());
    for (std::size_t s = 0; s < scenes.size(); ++s) {
      used[s].assign(scenes[s].gts.size(), false);
    }
    std::size_t tp = 0, fp = 0;
    for (const Ref& r : all) {
      if (r.score < t) break;
      const Detection& det = scenes[r.scene].preds[r.index];
      double best_iou = 0;
      std::size_t best = scenes[r.scene].gts.size();
      for (std::size_t j = 0; j < scenes[r.scene].gts.size(); ++j) {
        const LabeledBox& gt = scenes[r.scene].gts[j];
        if (gt.class_id != class_id || used[r.scene][j]) continue;
        const double v = mode == IouMode::bev ? iou_bev(det.box, gt.box)
                                              : iou_3d(det.box, gt.box);
        if (v >= iou_threshold && v > best_iou) {
          best_iou = v;
          best = j;
        }
      }
      if (best < scenes[r.scene].gts.size()) {
        used[r.scene][best] = true;
        ++tp;
      } else {
        ++fp;
      }
    }
    pr.emplace_back(static_cast<double>(tp) / static_cast<double>(total_gt),
                    static_cast<double>(tp) / static_cast<double>(tp + fp));
  }
  double ap = 0;
  for (int i = 1; i <= 40; ++i) {
    const double r = static_cast<double>(i) / 40.0;
    double best = 0;
    for (const auto& [recall, precision] : pr) {
      if (recall >= r) best = std::max(best, precision);
    }
    ap += best;
  }
  return ap / 40.0;
}

std::vector<EvalScene> random_case(RngStream& rng) {
  const int n_scenes = static_cast<int>(rng.uniform_int(1, 3));
  std::vector<EvalScene> scenes(static_cast<std::size_t>(n_scenes));
  int total_preds = 0;
  for (EvalScene& s : scenes) {
    const int n_gt = static_cast<int>(rng.uniform_int(0, 3));
    for (int i = 0; i < n_gt; ++i) {
      s.gts.push_back(gt_at(rng.uniform(-20, 20), rng.uniform(-20, 20)));
    }
    if (rng.uniform() < 0.3) {
      s.gts.push_back(gt_at(rng.uniform(-20, 20), rng.uniform(-20, 20), 1));
    }
  }
  while (total_preds < 10 && rng.uniform() < 0.8) {
    EvalScene& s = scenes[static_cast<std::size_t>(
        rng.uniform_int(0, n_scenes - 1))];
    // Tied scores happen on purpose: draws come from a coarse grid.
    const double score = 0.1 * static_cast<double>(rng.uniform_int(1, 9));
    if (!s.gts.empty() && rng.uniform() < 0.6) {
      const auto g = static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<int64_t>(s.gts.size()) - 1));
      s.preds.push_back(pred_at(s.gts[g].box.cx + rng.uniform(-0.8, 0.8),
                                s.gts[g].box.cy + rng.uniform(-0.8, 0.8),
                                score));
    } else {
      s.preds.push_back(pred_at(rng.uniform(-20, 20), rng.uniform(-20, 20), score));
    }
    ++total_preds;
  }
  bool class0_gt = false;
  for (const EvalScene& s : scenes) {
    for (const LabeledBox& gt : s.gts) class0_gt |= gt.class_id == 0;
  }
  if (!class0_gt) scenes[0].gts.push_back(gt_at(0, 0));
  return scenes;
}

}  // namespace

TEST_CASE("hand-enumerated precision-recall curve fixes the AP value") {
  EvalScene s;
  s.gts = {gt_at(0, 0), gt_at(10, 0)};
  s.preds = {pred_at(0, 0, 0.9), pred_at(30, 30, 0.8), pred_at(10, 0, 0.7)};
  MatchCounts counts;
  const auto ap =
      average_precision({s}, 0, kIouThresholds[0], IouMode::bev, &counts);
  REQUIRE(ap.has_value());
  // Curve: (0.5, 1), (0.5, 0.5), (1, 2/3); twenty levels see precision 1 and
  // twenty see 2/3.
  CHECK(*ap == doctest::Approx(5.0 / 6.0).epsilon(1e-12));
  CHECK(counts.tp == 2);
  CHECK(counts.fp == 1);
  CHECK(counts.fn == 0);
}

TEST_CASE("exact predictions score AP 1 and absent predictions score 0") {
  std::vector<EvalScene> scenes(3);
  RngStream rng(2, "ap-trivial");
  for (EvalScene& s : scenes) {
    for (int c = 0; c < 3; ++c) {
      s.gts.push_back(gt_at(rng.uniform(-15, 15), rng.uniform(-15, 15), c));
      Detection d = pred_at(s.gts.back().box.cx, s.gts.back().box.cy, 1.0, c);
      s.preds.push_back(d);
    }
  }
  for (int c = 0; c < 3; ++c) {
    for (IouMode mode : {IouMode::bev, IouMode::box3d}) {
      const auto ap = average_precision(
          scenes, c, kIouThresholds[static_cast<std::size_t>(c)], mode);
      REQUIRE(ap.has_value());
      CHECK(*ap == 1.0);
    }
  }
  std::vector<EvalScene> none = scenes;
  for (EvalScene& s : none) s.preds.clear();
  CHECK(*average_precision(none, 0, 0.7, IouMode::bev) == 0.0);

  MatchCounts counts;
  EvalScene only_preds;
  only_preds.preds = {pred_at(0, 0, 0.9, 2), pred_at(5, 5, 0.8, 2)};
  const auto absent =
      average_precision({only_preds}, 2, 0.5, IouMode::bev, &counts);
  CHECK_FALSE(absent.has_value());
  CHECK(counts.fp == 2);
  CHECK(counts.fn == 0);
}

TEST_CASE("AP equals the exhaustive threshold sweep on small cases") {
  RngStream rng(77, "ap-oracle");
  for (int trial = 0; trial < 100; ++trial) {
    const std::vector<EvalScene> scenes = random_case(rng);
    const IouMode mode = trial % 2 == 0 ? IouMode::bev : IouMode::box3d;
    const auto got = average_precision(scenes, 0, 0.5, mode);
    REQUIRE(got.has_value());
    CHECK(*got == sweep_ap(scenes, 0, 0.5, mode));
  }
}

TEST_CASE("AP never drops when a top-scored true positive arrives") {
  RngStream rng(78, "ap-mono");
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<EvalScene> scenes = random_case(rng);
    const auto base = average_precision(scenes, 0, 0.5, IouMode::bev);
    scenes[0].gts.push_back(gt_at(40, 40));
    scenes[0].preds.push_back(pred_at(40, 40, 2.0));
    const auto more = average_precision(scenes, 0, 0.5, IouMode::bev);
    CHECK(*more >= *base);

    // A trailing false positive adds no precision at any reachable recall.
    scenes[0].preds.push_back(pred_at(-40, -40, 0.01));
    const auto with_fp = average_precision(scenes, 0, 0.5, IouMode::bev);
    CHECK(*with_fp <= *more);
  }
}

TEST_CASE("closed gap reproduces the published examples") {
  CHECK(closed_gap(26.89, 15.96, 52.84) == doctest::Approx(29.65).epsilon(0.0017));
  CHECK(std::abs(closed_gap(26.89, 15.96, 52.84) - 29.65) < 0.05);
  CHECK(std::abs(closed_gap(30.67, 17.87, 54.77) - 34.68) < 0.05);
  CHECK(closed_gap(15.96, 15.96, 52.84) == 0.0);
  CHECK(closed_gap(52.84, 15.96, 52.84) == 100.0);
  CHECK_THROWS_AS(closed_gap(20.0, 15.96, 15.96), std::invalid_argument);
}

TEST_CASE("closed gap ignores a common scale on its inputs") {
  RngStream rng(5, "gap-scale");
  for (int t = 0; t < 200; ++t) {
    const double s = rng.uniform(0, 40);
    const double o = s + rng.uniform(0.5, 40);
    const double m = rng.uniform(0, 60);
    const double c = rng.uniform(0.01, 100.0);
    CHECK(closed_gap(c * m, c * s, c * o) ==
          doctest::Approx(closed_gap(m, s, o)).epsilon(1e-9));
  }
}

TEST_CASE("mAP is the mean of present per-class APs and ignores job count") {
  RngStream rng(31, "map-mean");
  std::vector<EvalScene> scenes;
  for (int i = 0; i < 6; ++i) {
    EvalScene s;
    for (int c = 0; c < 3; ++c) {
      for (int k = 0; k < 2; ++k) {
        s.gts.push_back(gt_at(rng.uniform(-18, 18), rng.uniform(-18, 18), c));
        if (rng.uniform() < 0.8) {
          s.preds.push_back(pred_at(s.gts.back().box.cx + rng.uniform(-0.5, 0.5),
                                    s.gts.back().box.cy + rng.uniform(-0.5, 0.5),
                                    rng.uniform(0.2, 1.0), c));
        }
      }
      if (rng.uniform() < 0.5) {
        s.preds.push_back(
            pred_at(rng.uniform(-18, 18), rng.uniform(-18, 18),
                    rng.uniform(0.2, 1.0), c));
      }
    }
    scenes.push_back(std::move(s));
  }
  const EvalResult r = evaluate(scenes);
  double sum3d = 0, sumbev = 0;
  for (int c = 0; c < 3; ++c) {
    REQUIRE(r.ap3d[static_cast<std::size_t>(c)].has_value());
    sum3d += *r.ap3d[static_cast<std::size_t>(c)];
    sumbev += *r.apbev[static_cast<std::size_t>(c)];
  }
  CHECK(r.map3d == doctest::Approx(sum3d / 3).epsilon(1e-12));
  CHECK(r.mapbev == doctest::Approx(sumbev / 3).epsilon(1e-12));

  const EvalResult threaded = evaluate(scenes, kIouThresholds, 3);
  CHECK(threaded.map3d == r.map3d);
  CHECK(threaded.mapbev == r.mapbev);
  for (int c = 0; c < 3; ++c) {
    CHECK(threaded.ap3d[static_cast<std::size_t>(c)] == r.ap3d[static_cast<std::size_t>(c)]);
    CHECK(threaded.countsbev[static_cast<std::size_t>(c)].tp == r.countsbev[static_cast<std::size_t>(c)].tp);
  }
}

TEST_CASE("harmonized means give every run the same class denominator") {
  EvalResult a, b;
  a.ap3d = {0.6, 0.2, std::nullopt};
  a.apbev = {0.7, 0.3, std::nullopt};
  b.ap3d = {0.4, std::nullopt, 0.3};
  b.apbev = {0.5, std::nullopt, 0.4};
  const HarmonizedMaps h = harmonize_maps({a, b});
  REQUIRE(h.map3d.size() == 2);
  CHECK(h.map3d[0] == doctest::Approx((0.6 + 0.2 + 0.0) / 3).epsilon(1e-12));
  CHECK(h.map3d[1] == doctest::Approx((0.4 + 0.0 + 0.3) / 3).epsilon(1e-12));
  CHECK(h.mapbev[0] == doctest::Approx((0.7 + 0.3 + 0.0) / 3).epsilon(1e-12));

  // A class with ground truth nowhere drops out of the denominator.
  EvalResult c = a, d = a;
  c.ap3d = {0.6, 0.2, std::nullopt};
  d.ap3d = {0.4, 0.4, std::nullopt};
  c.apbev = {0.6, 0.2, std::nullopt};
  d.apbev = {0.4, 0.4, std::nullopt};
  const HarmonizedMaps h2 = harmonize_maps({c, d});
  CHECK(h2.map3d[0] == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(h2.map3d[1] == doctest::Approx(0.4).epsilon(1e-12));
}

TEST_CASE("eval results survive the CSV and JSON encodings") {
  EvalResult r;
  r.ap3d = {0.123456789012345, std::nullopt, 1.0 / 3.0};
  r.apbev = {0.5, std::nullopt, 0.25};
  r.counts3d[0] = {12, 5, 3};
  r.countsbev[2] = {7, 1, 2};
  r.map3d = (0.123456789012345 + 1.0 / 3.0) / 2;
  r.mapbev = 0.375;
  r.n_scenes = 42;
  const std::string csv = eval_result_to_csv(r);
  const EvalResult back = eval_result_from_csv(csv);
  CHECK(eval_result_to_csv(back) == csv);
  CHECK(back.ap3d[0] == r.ap3d[0]);
  CHECK_FALSE(back.ap3d[1].has_value());
  CHECK(back.ap3d[2] == r.ap3d[2]);
  CHECK(back.counts3d[0].tp == 12);
  CHECK(back.countsbev[2].fn == 2);
  CHECK(back.map3d == r.map3d);
  CHECK(back.n_scenes == 42);

  const std::string json = eval_result_to_json(r);
  CHECK(json.find("\"ap3d_vehicle\"") != std::string::npos);
  CHECK(json.find("\"ap3d_pedestrian\": null") != std::string::npos);
  CHECK(json.find("\"apbev_cyclist\"") != std::string::npos);
  CHECK(json.find("\"map3d\"") != std::string::npos);
  CHECK(json.find("\"mapbev\"") != std::string::npos);

  CHECK_THROWS_AS(eval_result_from_csv("nonsense\n"), std::runtime_error);
  CHECK_THROWS_AS(eval_result_from_csv("key,value\nmap3d,0.5\n"),
                  std::runtime_error);
}

TEST_CASE("checkpoint round-trip keeps the model scoring identically") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "uada_test_evalrun";
  fs::remove_all(dir);
  const DomainProfile prof = builtin_profile("robot16");
  {
    DatasetWriter w(dir.string(), prof, 11, false);
    for (uint64_t i = 0; i < 3; ++i) {
      RngStream rng(11, "data", i);
      w.add_scene(generate_scene(prof, rng));
    }
    w.finalize();
  }
  const DatasetOnDisk data = open_dataset(dir.string());
  DetectorModel model;
  model.grid = prof.grid;
  model.feature_channels = 6;
  model.init(4);

  EvalOptions opt;
  const EvalResult a = evaluate_run(model, data, opt);
  const EvalResult b = evaluate_run(model, data, opt);
  CHECK(eval_result_to_csv(a) == eval_result_to_csv(b));
  CHECK(a.n_scenes == 3);

  const DetectorModel restored = model_from_params(model_to_params(model));
  const EvalResult c = evaluate_run(restored, data, opt);
  CHECK(eval_result_to_csv(c) == eval_result_to_csv(a));

  // Ground-shifted scoring moves scan and labels together, so a model is
  // scored in the frame it trained in.
  EvalOptions shifted = opt;
  shifted.apply_ground_shift = true;
  const EvalResult d = evaluate_run(model, data, shifted);
  CHECK(d.n_scenes == 3);

  std::vector<Param> broken = model_to_params(model);
  for (Param& p : broken) {
    if (p.name == "meta.feature_channels") p.value[0] = 7;
  }
  CHECK_THROWS_AS(model_from_params(broken), std::invalid_argument);
  std::vector<Param> missing = model_to_params(model);
  missing.erase(missing.begin());
  CHECK_THROWS_AS(model_from_params(missing), std::invalid_argument);

  fs::remove_all(dir);
}
