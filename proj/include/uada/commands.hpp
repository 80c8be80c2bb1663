#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

// Command implementations behind the CLI: each takes plain options, writes
// its artifacts, and reports to the given stream. Errors are exceptions;
// std::invalid_argument marks usage and configuration mistakes, anything
// else a runtime failure.

namespace uada {

struct GenOptions {
  std::string profile;
  std::size_t n_scenes = 0;
  uint64_t seed = 0;
  std::string out_dir;
  bool force = false;
  int jobs = 1;
};
void cmd_gen(const GenOptions& opt, std::ostream& out);

void cmd_train(const std::string& config_path, int jobs, std::ostream& out);

struct EvalCmdOptions {
  std::string checkpoint;
  std::string dataset;
  std::string out_dir;
  int jobs = 1;
};
void cmd_eval(const EvalCmdOptions& opt, std::ostream& out);

void cmd_stats(const std::string& dataset, const std::string& out_dir,
               std::ostream& out);

struct CompareOptions {
  std::string source_csv;
  std::vector<std::string> adapted_csvs;
  std::string oracle_csv;
  std::string out_dir;
};
void cmd_compare(const CompareOptions& opt, std::ostream& out);

}  // namespace uada
