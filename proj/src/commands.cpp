#include "uada/commands.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "uada/adapt.hpp"
#include "uada/config.hpp"
#include "uada/dataset_io.hpp"
#include "uada/evalmetrics.hpp"
#include "uada/synthgen.hpp"

namespace fs = std::filesystem;

namespace uada {
namespace {

constexpr const char* kClassNames[kNumClasses] = {"Vehicle", "Pedestrian",
                                                  "Cyclist"};

std::string full_digits(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string two_digits(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << content;
  if (!out) throw std::runtime_error("failed writing: " + path);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("cannot open: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool is_builtin_profile(const std::string& name) {
  const auto names = builtin_profile_names();
  return std::find(names.begin(), names.end(), name) != names.end();
}

// A dataset spec is either a builtin profile name (scenes generated in
// memory, one stream per index so the set matches what gen would write) or
// a dataset directory.
std::unique_ptr<SceneSource> open_scenes(const std::string& spec,
                                         std::size_t n_scenes, uint64_t seed,
                                         const std::string& role) {
  if (is_builtin_profile(spec)) {
    const DomainProfile profile = builtin_profile(spec);
    std::vector<Scene> scenes;
    scenes.reserve(n_scenes);
    for (std::size_t i = 0; i < n_scenes; ++i) {
      RngStream rng(seed, "data", i);
      scenes.push_back(generate_scene(profile, rng));
    }
    return std::make_unique<MemoryScenes>(profile, std::move(scenes));
  }
  if (!fs::exists(spec))
    throw std::invalid_argument(role + " dataset not found: " + spec +
                                " (not a builtin profile or directory)");
  return std::make_unique<DiskScenes>(open_dataset(spec));
}

DatasetOnDisk open_disk_dataset(const std::string& dir,
                                const std::string& role) {
  if (!fs::exists(dir))
    throw std::invalid_argument(role + " dataset not found: " + dir);
  return open_dataset(dir);
}

std::string opt_cell(const std::optional<double>& v) {
  return v ? full_digits(*v) : std::string();
}

}  // namespace

void cmd_gen(const GenOptions& opt, std::ostream& out) {
  if (!is_builtin_profile(opt.profile)) {
    std::string names;
    for (const auto& n : builtin_profile_names())
      names += (names.empty() ? "" : ", ") + n;
    throw std::invalid_argument("unknown profile '" + opt.profile +
                                "' (available: " + names + ")");
  }
  if (opt.jobs < 1) throw std::invalid_argument("--jobs must be >= 1");
  const DomainProfile profile = builtin_profile(opt.profile);

  std::unique_ptr<DatasetWriter> writer;
  try {
    writer = std::make_unique<DatasetWriter>(opt.out_dir, profile, opt.seed,
                                             opt.force);
  } catch (const std::runtime_error& e) {
    throw std::invalid_argument(e.what());
  }

  // Scenes derive from per-index streams, so generation order (and thread
  // count) cannot change the bytes; writing stays in index order.
  const std::size_t chunk =
      std::max<std::size_t>(static_cast<std::size_t>(opt.jobs) * 16, 16);
  std::vector<Scene> buffer;
  for (std::size_t begin = 0; begin < opt.n_scenes; begin += chunk) {
    const std::size_t end = std::min(begin + chunk, opt.n_scenes);
    buffer.assign(end - begin, Scene{});
    if (opt.jobs == 1) {
      for (std::size_t i = begin; i < end; ++i) {
        RngStream rng(opt.seed, "data", i);
        buffer[i - begin] = generate_scene(profile, rng);
      }
    } else {
      std::vector<std::thread> pool;
      std::atomic<std::size_t> next{begin};
      for (int t = 0; t < opt.jobs; ++t) {
        pool.emplace_back([&] {
          for (std::size_t i = next++; i < end; i = next++) {
            RngStream rng(opt.seed, "data", i);
            buffer[i - begin] = generate_scene(profile, rng);
          }
        });
      }
      for (auto& th : pool) th.join();
    }
    for (auto& scene : buffer) writer->add_scene(scene);
  }
  writer->finalize();
  out << "wrote " << opt.n_scenes << " " << opt.profile << " scenes to "
      << opt.out_dir << "\n";
}

void cmd_train(const std::string& config_path, int jobs, std::ostream& out) {
  if (jobs < 1) throw std::invalid_argument("--jobs must be >= 1");
  const RunConfig cfg = load_run_config(config_path);

  // source-only never touches the target spec, oracle never the source.
  std::unique_ptr<SceneSource> labeled, target;
  if (cfg.mode == RunMode::oracle) {
    labeled = open_scenes(cfg.target, cfg.target_scenes, cfg.seed, "target");
  } else {
    labeled = open_scenes(cfg.source, cfg.source_scenes, cfg.seed, "source");
  }
  const bool adversarial = alignment_of(cfg.mode) != AlignmentMode::none;
  if (adversarial)
    target = open_scenes(cfg.target, cfg.target_scenes, cfg.seed, "target");

  TrainOptions topt;
  topt.seed = cfg.seed;
  topt.grid = cfg.grid();
  topt.feature_channels = cfg.feature_channels;
  topt.epochs = cfg.epochs;
  topt.batch_size = cfg.batch_size;
  topt.mode = alignment_of(cfg.mode);
  topt.design = cfg.design;
  topt.lambda = cfg.grl();
  topt.lr_detector = cfg.lr_detector;
  topt.lr_discriminator = cfg.lr_discriminator;
  topt.conf_floor = cfg.conf_floor;
  topt.ros = cfg.ros;
  topt.ros_config = cfg.ros_config();
  topt.downsample_k = cfg.downsample_k;
  topt.ground_shift = cfg.ground_shift;
  topt.eval_conf_threshold = cfg.eval_conf_threshold;
  topt.jobs = jobs;

  const TrainResult result =
      train_detector(*labeled, target ? target.get() : nullptr, topt);

  fs::create_directories(cfg.out_dir);
  std::vector<Param> ckpt = training_checkpoint_params(
      result.model, cfg.ground_shift, profile_size_means(labeled->profile()));
  if (adversarial) {
    for (auto& p : discriminators_to_params(result.discs))
      ckpt.push_back(std::move(p));
  }
  const std::string ckpt_path = (fs::path(cfg.out_dir) / "final.ckpt").string();
  save_checkpoint(ckpt_path, ckpt);
  write_file((fs::path(cfg.out_dir) / "train_log.csv").string(),
             result.log_csv);
  write_file((fs::path(cfg.out_dir) / "resolved_config.json").string(),
             resolved_config_json(cfg));

  out << "trained " << to_string(cfg.mode) << " for " << cfg.epochs
      << " epochs (" << labeled->size() << " labeled scenes";
  if (target) out << ", " << target->size() << " target scenes";
  out << ")\n";
  if (!result.rows.empty()) {
    const EpochRow& last = result.rows.back();
    out << "final detection loss " << full_digits(last.l_det) << "\n";
    if (last.l_align)
      out << "final alignment loss " << full_digits(*last.l_align) << "\n";
    if (last.mapbev)
      out << "final target mAP_3D " << full_digits(last.map3d.value_or(0.0))
          << " mAP_BEV " << full_digits(*last.mapbev) << "\n";
  }
  out << "checkpoint: " << ckpt_path << "\n";
}

void cmd_eval(const EvalCmdOptions& opt, std::ostream& out) {
  if (opt.jobs < 1) throw std::invalid_argument("--jobs must be >= 1");
  if (!fs::exists(opt.checkpoint))
    throw std::invalid_argument("checkpoint not found: " + opt.checkpoint);
  const std::vector<Param> params = load_checkpoint(opt.checkpoint);
  const DetectorModel model = model_from_params(params);

  EvalOptions eopt;
  eopt.jobs = opt.jobs;
  for (const auto& p : params)
    if (p.name == "meta.ground_shift" && !p.value.empty())
      eopt.apply_ground_shift = p.value[0] != 0.0;

  const DatasetOnDisk data = open_disk_dataset(opt.dataset, "eval");
  const EvalResult r = evaluate_run(model, data, eopt);

  fs::create_directories(opt.out_dir);
  write_file((fs::path(opt.out_dir) / "metrics.csv").string(),
             eval_result_to_csv(r));
  write_file((fs::path(opt.out_dir) / "metrics.json").string(),
             eval_result_to_json(r));

  out << "evaluated " << r.n_scenes << " scenes\n";
  for (int k = 0; k < kNumClasses; ++k) {
    out << kClassNames[k] << ": AP_3D "
        << (r.ap3d[k] ? full_digits(*r.ap3d[k]) : "n/a") << " AP_BEV "
        << (r.apbev[k] ? full_digits(*r.apbev[k]) : "n/a") << "\n";
  }
  out << "mAP_3D " << full_digits(r.map3d) << " mAP_BEV "
      << full_digits(r.mapbev) << "\n";
}

void cmd_stats(const std::string& dataset, const std::string& out_dir,
               std::ostream& out) {
  const DatasetOnDisk data = open_disk_dataset(dataset, "stats");
  std::vector<Scene> scenes;
  scenes.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i)
    scenes.push_back(data.load_scene(i));
  const DatasetStats stats = dataset_stats(scenes);

  std::string summary = "class,n_objects,mean_points\n";
  std::string dist = "class,distance_m,count\n";
  std::string pts = "class,n_points,count\n";
  for (int k = 0; k < kNumClasses; ++k) {
    const ClassStats& c = stats.per_class[k];
    summary += std::string(kClassNames[k]) + "," + std::to_string(c.n_objects) +
               "," + (c.n_objects ? full_digits(c.mean_points) : "") + "\n";
    for (const auto& [bucket, count] : c.distance_hist)
      dist += std::string(kClassNames[k]) + "," + std::to_string(bucket) + "," +
              std::to_string(count) + "\n";
    for (const auto& [bucket, count] : c.points_hist)
      pts += std::string(kClassNames[k]) + "," + std::to_string(bucket) + "," +
             std::to_string(count) + "\n";
  }

  fs::create_directories(out_dir);
  write_file((fs::path(out_dir) / "summary.csv").string(), summary);
  write_file((fs::path(out_dir) / "distance_hist.csv").string(), dist);
  write_file((fs::path(out_dir) / "points_hist.csv").string(), pts);

  out << "dataset " << dataset << ": " << data.size() << " scenes\n";
  for (int k = 0; k < kNumClasses; ++k) {
    const ClassStats& c = stats.per_class[k];
    out << kClassNames[k] << ": " << c.n_objects << " objects";
    if (c.n_objects)
      out << ", mean " << full_digits(c.mean_points) << " points";
    out << "\n";
  }
}

void cmd_compare(const CompareOptions& opt, std::ostream& out) {
  if (opt.adapted_csvs.empty())
    throw std::invalid_argument("compare needs at least one adapted result");

  std::vector<std::string> names;
  std::vector<EvalResult> runs;
  auto add = [&](const std::string& path) {
    names.push_back(fs::path(path).stem().string());
    runs.push_back(eval_result_from_csv(read_file(path)));
  };
  add(opt.source_csv);
  for (const auto& p : opt.adapted_csvs) add(p);
  add(opt.oracle_csv);

  const HarmonizedMaps maps = harmonize_maps(runs);
  const std::size_t n = runs.size();
  const double s3 = maps.map3d.front(), o3 = maps.map3d.back();
  const double sb = maps.mapbev.front(), ob = maps.mapbev.back();

  // Change and closed gap are relative to the source row, so that row keeps
  // both blank; a degenerate oracle (equal to source) renders n/a.
  std::vector<std::optional<double>> change3(n), changeb(n), gap3(n), gapb(n);
  for (std::size_t i = 1; i < n; ++i) {
    change3[i] = maps.map3d[i] - s3;
    changeb[i] = maps.mapbev[i] - sb;
    try {
      gap3[i] = closed_gap(maps.map3d[i], s3, o3);
    } catch (const std::invalid_argument&) {
    }
    try {
      gapb[i] = closed_gap(maps.mapbev[i], sb, ob);
    } catch (const std::invalid_argument&) {
    }
  }

  std::string csv =
      "method,map_3d,map_bev,change_3d,change_bev,closed_gap_3d,closed_gap_bev\n";
  for (std::size_t i = 0; i < n; ++i) {
    csv += names[i] + "," + full_digits(maps.map3d[i]) + "," +
           full_digits(maps.mapbev[i]) + "," + opt_cell(change3[i]) + "," +
           opt_cell(changeb[i]) + "," + opt_cell(gap3[i]) + "," +
           opt_cell(gapb[i]) + "\n";
  }

  std::size_t name_w = 6;
  for (const auto& nm : names) name_w = std::max(name_w, nm.size());
  auto cell2 = [](const std::optional<double>& v) {
    return v ? two_digits(*v) : std::string("n/a");
  };
  std::ostringstream table;
  table << std::left;
  auto row = [&](const std::string& nm, const std::string& a,
                 const std::string& b, const std::string& c,
                 const std::string& d, const std::string& e,
                 const std::string& f) {
    table << nm << std::string(name_w + 2 - nm.size(), ' ');
    for (const std::string* v : {&a, &b, &c, &d, &e, &f})
      table << std::string(v->size() < 10 ? 10 - v->size() : 1, ' ') << *v;
    table << "\n";
  };
  row("method", "mAP_3D", "mAP_BEV", "chg_3D", "chg_BEV", "gap_3D", "gap_BEV");
  for (std::size_t i = 0; i < n; ++i) {
    const bool is_source = i == 0;
    row(names[i], two_digits(maps.map3d[i]), two_digits(maps.mapbev[i]),
        is_source ? "-" : cell2(change3[i]),
        is_source ? "-" : cell2(changeb[i]),
        is_source ? "-" : cell2(gap3[i]), is_source ? "-" : cell2(gapb[i]));
  }

  fs::create_directories(opt.out_dir);
  write_file((fs::path(opt.out_dir) / "compare.csv").string(), csv);
  write_file((fs::path(opt.out_dir) / "compare.txt").string(), table.str());
  out << table.str();
}

}  // namespace uada
