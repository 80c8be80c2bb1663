#include "uada/dataset_io.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace uada {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "scan files are little-endian and written by memcpy");

namespace {

constexpr char kScanMagic[4] = {'P', 'C', 'L', 'D'};
constexpr uint32_t kScanVersion = 1;

void write_bytes(std::ofstream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void read_bytes(std::ifstream& in, void* p, std::size_t n,
                const std::string& path) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (in.gcount() != static_cast<std::streamsize>(n)) {
    throw std::runtime_error("truncated scan file: " + path);
  }
}

std::string scene_basename(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06zu", index);
  return buf;
}

}  // namespace

void save_scan(const std::string& path, const PointCloud& scan) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open scan file for writing: " + path);
  write_bytes(out, kScanMagic, 4);
  const uint32_t version = kScanVersion;
  write_bytes(out, &version, 4);
  const auto count = static_cast<uint32_t>(scan.points.size());
  write_bytes(out, &count, 4);
  for (const LidarPoint& p : scan.points) {
    const float f[4] = {static_cast<float>(p.x), static_cast<float>(p.y),
                        static_cast<float>(p.z), static_cast<float>(p.intensity)};
    write_bytes(out, f, sizeof f);
    write_bytes(out, &p.ring, 2);
  }
  if (!out) throw std::runtime_error("failed writing scan file: " + path);
}

PointCloud load_scan(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open scan file: " + path);
  char magic[4];
  read_bytes(in, magic, 4, path);
  if (std::memcmp(magic, kScanMagic, 4) != 0) {
    throw std::runtime_error("bad scan magic in " + path);
  }
  uint32_t version = 0, count = 0;
  read_bytes(in, &version, 4, path);
  if (version != kScanVersion) {
    throw std::runtime_error("unsupported scan version in " + path);
  }
  read_bytes(in, &count, 4, path);
  PointCloud scan;
  scan.points.resize(count);
  for (uint32_t i = 0; i < count; ++i) {
    float f[4];
    read_bytes(in, f, sizeof f, path);
    uint16_t ring = 0;
    read_bytes(in, &ring, 2, path);
    LidarPoint& p = scan.points[i];
    p.x = f[0];
    p.y = f[1];
    p.z = f[2];
    p.intensity = f[3];
    p.ring = ring;
  }
  char extra;
  if (in.read(&extra, 1).gcount() != 0) {
    throw std::runtime_error("trailing bytes after declared count in " + path);
  }
  return scan;
}

std::string format_labels(const std::vector<LabeledBox>& labels) {
  std::string text;
  char line[192];
  for (const LabeledBox& lb : labels) {
    const Box3D& b = lb.box;
    std::snprintf(line, sizeof line, "%d %.6f %.6f %.6f %.6f %.6f %.6f %.6f\n",
                  lb.class_id, b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw);
    text += line;
  }
  return text;
}

void save_labels(const std::string& path, const std::vector<LabeledBox>& labels) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open label file for writing: " + path);
  const std::string text = format_labels(labels);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw std::runtime_error("failed writing label file: " + path);
}

std::vector<LabeledBox> parse_labels(const std::string& text,
                                     const std::string& context) {
  const std::string& path = context;
  std::istringstream in(text);
  std::vector<LabeledBox> labels;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream fields(line);
    LabeledBox lb;
    Box3D& b = lb.box;
    std::string trailing;
    if (!(fields >> lb.class_id >> b.cx >> b.cy >> b.cz >> b.l >> b.w >> b.h >>
          b.yaw) ||
        (fields >> trailing)) {
      throw std::runtime_error("malformed label line " + std::to_string(line_no) +
                               " in " + path);
    }
    if (lb.class_id < 0 || lb.class_id >= kNumClasses) {
      throw std::runtime_error("label class id out of range in " + path);
    }
    const double vals[7] = {b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw};
    for (double v : vals) {
      if (!std::isfinite(v)) {
        throw std::runtime_error("non-finite label value in " + path);
      }
    }
    if (!(b.l > 0 && b.w > 0 && b.h > 0)) {
      throw std::runtime_error("non-positive box extents in " + path);
    }
    // 6-decimal rounding can push yaw a hair past pi; keep it as parsed so
    // re-serialization reproduces the file.
    if (std::abs(b.yaw) > 3.1416) {
      throw std::runtime_error("label yaw outside (-pi, pi] in " + path);
    }
    labels.push_back(lb);
  }
  return labels;
}

std::vector<LabeledBox> load_labels(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open label file: " + path);
  const std::string text(std::istreambuf_iterator<char>(in), {});
  return parse_labels(text, path);
}

namespace {

json grid_to_json(const GridSpec& g) {
  return json{{"x0", g.x0}, {"x1", g.x1}, {"y0", g.y0},
              {"y1", g.y1}, {"cell", g.cell}};
}

GridSpec grid_from_json(const json& j) {
  GridSpec g;
  g.x0 = j.at("x0").get<double>();
  g.x1 = j.at("x1").get<double>();
  g.y0 = j.at("y0").get<double>();
  g.y1 = j.at("y1").get<double>();
  g.cell = j.at("cell").get<double>();
  return g;
}

json profile_to_json(const DomainProfile& p) {
  json j;
  j["name"] = p.name;
  j["n_layers"] = p.n_layers;
  j["elev_min_deg"] = p.elev_min_deg;
  j["elev_max_deg"] = p.elev_max_deg;
  j["azimuth_step_deg"] = p.azimuth_step_deg;
  j["sensor_height"] = p.sensor_height;
  j["max_range"] = p.max_range;
  j["class_mix"] = p.class_mix;
  json ranges = json::array();
  for (const auto& [lo, hi] : p.distance_range) ranges.push_back({lo, hi});
  j["distance_range"] = ranges;
  j["size_mean"] = p.size_mean;
  j["size_std"] = p.size_std;
  j["objects_per_scene"] = {p.objects_per_scene.first, p.objects_per_scene.second};
  j["object_azimuth_deg"] = p.object_azimuth_deg;
  j["point_budget"] = p.point_budget;
  j["grid"] = grid_to_json(p.grid);
  return j;
}

DomainProfile profile_from_json(const json& j) {
  DomainProfile p;
  p.name = j.at("name").get<std::string>();
  p.n_layers = j.at("n_layers").get<int>();
  p.elev_min_deg = j.at("elev_min_deg").get<double>();
  p.elev_max_deg = j.at("elev_max_deg").get<double>();
  p.azimuth_step_deg = j.at("azimuth_step_deg").get<double>();
  p.sensor_height = j.at("sensor_height").get<double>();
  p.max_range = j.at("max_range").get<double>();
  p.class_mix = j.at("class_mix").get<std::array<double, kNumClasses>>();
  const json& ranges = j.at("distance_range");
  if (ranges.size() != kNumClasses) {
    throw std::runtime_error("manifest distance_range must have one entry per class");
  }
  for (int k = 0; k < kNumClasses; ++k) {
    p.distance_range[static_cast<std::size_t>(k)] = {
        ranges[static_cast<std::size_t>(k)].at(0).get<double>(),
        ranges[static_cast<std::size_t>(k)].at(1).get<double>()};
  }
  p.size_mean = j.at("size_mean").get<std::array<std::array<double, 3>, kNumClasses>>();
  p.size_std = j.at("size_std").get<std::array<std::array<double, 3>, kNumClasses>>();
  p.objects_per_scene = {j.at("objects_per_scene").at(0).get<int>(),
                         j.at("objects_per_scene").at(1).get<int>()};
  p.object_azimuth_deg = j.at("object_azimuth_deg").get<double>();
  p.point_budget = j.at("point_budget").get<std::size_t>();
  p.grid = grid_from_json(j.at("grid"));
  p.validate();
  return p;
}

}  // namespace

std::string manifest_to_json(const DatasetManifest& m) {
  json j;
  j["format_version"] = 1;
  j["profile"] = profile_to_json(m.profile);
  j["seed"] = m.seed;
  j["n_scenes"] = m.scan_files.size();
  j["scans"] = m.scan_files;
  j["labels"] = m.label_files;
  return j.dump(2) + "\n";
}

DatasetManifest manifest_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("invalid manifest json: ") + e.what());
  }
  try {
    if (j.at("format_version").get<int>() != 1) {
      throw std::runtime_error("unsupported manifest format version");
    }
    DatasetManifest m;
    m.profile = profile_from_json(j.at("profile"));
    m.seed = j.at("seed").get<uint64_t>();
    m.scan_files = j.at("scans").get<std::vector<std::string>>();
    m.label_files = j.at("labels").get<std::vector<std::string>>();
    if (m.scan_files.size() != m.label_files.size()) {
      throw std::runtime_error("manifest scan/label lists differ in length");
    }
    if (j.at("n_scenes").get<std::size_t>() != m.scan_files.size()) {
      throw std::runtime_error("manifest n_scenes disagrees with file list");
    }
    return m;
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("invalid manifest: ") + e.what());
  }
}

DatasetWriter::DatasetWriter(std::string dir, const DomainProfile& profile,
                             uint64_t seed, bool force)
    : dir_(std::move(dir)) {
  const fs::path root(dir_);
  if (fs::exists(root) && !fs::is_directory(root)) {
    throw std::runtime_error("dataset path exists and is not a directory: " + dir_);
  }
  if (fs::exists(root) && !fs::is_empty(root)) {
    if (!force) {
      throw std::runtime_error("refusing to write into non-empty directory " +
                               dir_ + " (use --force)");
    }
    // Clear the managed paths so a smaller rebuild leaves no stale scenes.
    fs::remove_all(root / "scans");
    fs::remove_all(root / "labels");
    fs::remove(root / "manifest.json");
  }
  fs::create_directories(root / "scans");
  fs::create_directories(root / "labels");
  manifest_.profile = profile;
  manifest_.seed = seed;
}

void DatasetWriter::add_scene(const Scene& scene) {
  if (finalized_) throw std::logic_error("dataset writer already finalized");
  const std::string base = scene_basename(manifest_.scan_files.size());
  const std::string scan_rel = "scans/" + base + ".pcld";
  const std::string label_rel = "labels/" + base + ".txt";
  save_scan(dir_ + "/" + scan_rel, scene.scan);
  save_labels(dir_ + "/" + label_rel, scene.labels);
  manifest_.scan_files.push_back(scan_rel);
  manifest_.label_files.push_back(label_rel);
}

void DatasetWriter::finalize() {
  if (finalized_) throw std::logic_error("dataset writer already finalized");
  std::ofstream out(dir_ + "/manifest.json", std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest in " + dir_);
  const std::string text = manifest_to_json(manifest_);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw std::runtime_error("failed writing manifest in " + dir_);
  finalized_ = true;
}

PointCloud DatasetOnDisk::load_scan_at(std::size_t i) const {
  if (i >= size()) throw std::out_of_range("scene index out of range");
  return load_scan(dir + "/" + manifest.scan_files[i]);
}

std::vector<LabeledBox> DatasetOnDisk::load_labels_at(std::size_t i) const {
  if (i >= size()) throw std::out_of_range("scene index out of range");
  return load_labels(dir + "/" + manifest.label_files[i]);
}

Scene DatasetOnDisk::load_scene(std::size_t i) const {
  Scene scene;
  scene.scan = load_scan_at(i);
  scene.labels = load_labels_at(i);
  return scene;
}

DatasetOnDisk open_dataset(const std::string& dir) {
  std::ifstream in(dir + "/manifest.json", std::ios::binary);
  if (!in) throw std::runtime_error("no manifest.json in " + dir);
  std::stringstream buf;
  buf << in.rdbuf();
  DatasetOnDisk ds;
  ds.dir = dir;
  ds.manifest = manifest_from_json(buf.str());
  for (const std::string& rel : ds.manifest.scan_files) {
    if (rel.find("..") != std::string::npos) {
      throw std::runtime_error("manifest path escapes the dataset dir: " + rel);
    }
  }
  return ds;
}

}  // namespace uada
