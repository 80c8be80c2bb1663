#include "uada/optim.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "checkpoint IO assumes a little-endian host");

namespace uada {

Param::Param(std::string name_, std::vector<std::size_t> shape_) {
  name = std::move(name_);
  shape = std::move(shape_);
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  value.assign(n, 0.0);
  m.assign(n, 0.0);
  v.assign(n, 0.0);
}

void xavier_init(Param& p, RngStream& rng) {
  if (p.shape.size() == 2) {
    const double fan_in = static_cast<double>(p.shape[0]);
    const double fan_out = static_cast<double>(p.shape[1]);
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    for (double& w : p.value) w = rng.uniform(-a, a);
  } else {
    for (double& w : p.value) w = 0.0;
  }
}

void Adam::step(const std::vector<Param*>& params,
                const std::vector<const std::vector<double>*>& grads) {
  if (params.size() != grads.size())
    throw std::invalid_argument("Adam::step: params/grads size mismatch");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Param& p = *params[pi];
    const std::vector<double>& g = *grads[pi];
    if (g.size() != p.value.size())
      throw std::invalid_argument("Adam::step: gradient size mismatch for " + p.name);
    for (std::size_t i = 0; i < g.size(); ++i) {
      p.m[i] = cfg_.beta1 * p.m[i] + (1.0 - cfg_.beta1) * g[i];
      p.v[i] = cfg_.beta2 * p.v[i] + (1.0 - cfg_.beta2) * (g[i] * g[i]);
      const double mhat = p.m[i] / bc1;
      const double vhat = p.v[i] / bc2;
      p.value[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

namespace {

constexpr char kMagic[4] = {'U', 'A', 'D', 'A'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ostream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint32_t read_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw std::runtime_error("checkpoint: truncated integer field");
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::vector<Param>& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
  os.write(kMagic, 4);
  write_u32(os, kVersion);
  for (const Param& p : params) {
    write_u32(os, static_cast<uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    write_u32(os, static_cast<uint32_t>(p.shape.size()));
    for (std::size_t d : p.shape) write_u32(os, static_cast<uint32_t>(d));
    os.write(reinterpret_cast<const char*>(p.value.data()),
             static_cast<std::streamsize>(p.value.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

std::vector<Param> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic: " + path);
  const uint32_t version = read_u32(is);
  if (version != kVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  std::vector<Param> params;
  while (true) {
    uint32_t name_len = 0;
    is.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
    if (is.eof()) break;
    if (!is) throw std::runtime_error("checkpoint: truncated name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const uint32_t rank = read_u32(is);
    if (rank > 8) throw std::runtime_error("checkpoint: implausible rank");
    std::vector<std::size_t> shape(rank);
    std::size_t n = 1;
    for (uint32_t i = 0; i < rank; ++i) {
      shape[i] = read_u32(is);
      n *= shape[i];
    }
    Param p(std::move(name), std::move(shape));
    is.read(reinterpret_cast<char*>(p.value.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint: truncated parameter data");
    params.push_back(std::move(p));
  }
  return params;
}

}  // namespace uada
