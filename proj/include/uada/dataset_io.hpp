#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "uada/synthgen.hpp"

// Dataset persistence. A dataset directory holds scans/NNNNNN.pcld,
// labels/NNNNNN.txt, and manifest.json echoing the generating profile, seed,
// and file list. Scan files are little-endian binary (magic "PCLD"); label
// files are text with canonical 6-decimal formatting, so parse-then-serialize
// reproduces the bytes.

namespace uada {

void save_scan(const std::string& path, const PointCloud& scan);
PointCloud load_scan(const std::string& path);

std::string format_labels(const std::vector<LabeledBox>& labels);
void save_labels(const std::string& path, const std::vector<LabeledBox>& labels);
// Validates field count, class ids, finiteness, and positive extents; yaw is
// kept exactly as parsed so round trips stay byte-identical.  context names
// the source in error messages.
std::vector<LabeledBox> parse_labels(const std::string& text,
                                     const std::string& context = "<string>");
std::vector<LabeledBox> load_labels(const std::string& path);

struct DatasetManifest {
  DomainProfile profile;
  uint64_t seed = 0;
  std::vector<std::string> scan_files;   // relative to the dataset dir
  std::vector<std::string> label_files;  // parallel to scan_files
};

std::string manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const std::string& text);

// Streams scenes to disk one at a time; finalize() writes manifest.json.
class DatasetWriter {
 public:
  // Refuses a non-empty existing directory unless force is set.
  DatasetWriter(std::string dir, const DomainProfile& profile, uint64_t seed,
                bool force);
  void add_scene(const Scene& scene);
  void finalize();

 private:
  std::string dir_;
  DatasetManifest manifest_;
  bool finalized_ = false;
};

struct DatasetOnDisk {
  std::string dir;
  DatasetManifest manifest;
  std::size_t size() const { return manifest.scan_files.size(); }
  PointCloud load_scan_at(std::size_t i) const;
  std::vector<LabeledBox> load_labels_at(std::size_t i) const;
  Scene load_scene(std::size_t i) const;
};

DatasetOnDisk open_dataset(const std::string& dir);

}  // namespace uada
