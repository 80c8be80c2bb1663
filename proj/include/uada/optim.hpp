#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "uada/rng.hpp"

namespace uada {

struct Param {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> value;
  // Adam state, kept with the parameter so optimizer instances stay stateless
  // apart from their step counter.
  std::vector<double> m;
  std::vector<double> v;

  Param() = default;
  Param(std::string name, std::vector<std::size_t> shape);
  std::size_t size() const { return value.size(); }
};

// Xavier-uniform fill: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)) for
// rank-2 [in x out]; rank-1 parameters are zero-filled (biases).
void xavier_init(Param& p, RngStream& rng);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}
  // One update over matched (param, gradient) lists; advances the shared
  // step counter once per call.
  void step(const std::vector<Param*>& params,
            const std::vector<const std::vector<double>*>& grads);
  int64_t steps_taken() const { return t_; }

 private:
  AdamConfig cfg_;
  int64_t t_ = 0;
};

// Flat binary checkpoint: magic "UADA", u32 version, then per parameter
// u32 name length, name bytes, u32 rank, u32 dims, f64 little-endian data.
void save_checkpoint(const std::string& path, const std::vector<Param>& params);
std::vector<Param> load_checkpoint(const std::string& path);

}  // namespace uada
