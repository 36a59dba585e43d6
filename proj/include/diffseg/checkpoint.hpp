#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffseg/optim.hpp"
#include "diffseg/tensor.hpp"

namespace diffseg {

// DSCKPT1 layout (little-endian):
//   magic "DSCKPT1\0"
//   u64 config hash
//   schedule descriptor: u32 T, f64 beta_start, f64 beta_end, u32 K
//   u32 param count; per param: u32 name_len, name bytes, u8 ndim, u32 dims[],
//     f32 payload
//   optimizer state: u64 adam step; per param (same order): f32 m, f32 v payloads
//   rng state: u32 len, bytes (mt19937_64 text serialization)
//   u64 training step counter
inline constexpr char kCheckpointMagic[8] = {'D', 'S', 'C', 'K', 'P', 'T', '1', '\0'};

struct Checkpoint {
  uint64_t config_hash = 0;
  int schedule_T = 0;
  double beta_start = 0;
  double beta_end = 0;
  int schedule_K = 0;
  std::map<std::string, Tensor<float>> params;
  OptimState<float> optim;
  std::string rng_state;
  uint64_t step = 0;
};

namespace detail_ckpt {

template <typename V>
void put(std::ofstream& f, const V& v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::ifstream& f) {
  V v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(V));
  return v;
}

inline void put_tensor(std::ofstream& f, const Tensor<float>& t) {
  put<uint8_t>(f, static_cast<uint8_t>(t.shape.size()));
  for (int d : t.shape) put<uint32_t>(f, static_cast<uint32_t>(d));
  f.write(reinterpret_cast<const char*>(t.data.data()),
          static_cast<std::streamsize>(t.data.size() * sizeof(float)));
}

inline Tensor<float> get_tensor(std::ifstream& f) {
  uint8_t nd = get<uint8_t>(f);
  std::vector<int> shape(nd);
  for (auto& d : shape) d = static_cast<int>(get<uint32_t>(f));
  Tensor<float> t(shape);
  f.read(reinterpret_cast<char*>(t.data.data()),
         static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  return t;
}

}  // namespace detail_ckpt

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open for write: " + path);
  f.write(kCheckpointMagic, 8);
  detail_ckpt::put<uint64_t>(f, c.config_hash);
  detail_ckpt::put<uint32_t>(f, static_cast<uint32_t>(c.schedule_T));
  detail_ckpt::put<double>(f, c.beta_start);
  detail_ckpt::put<double>(f, c.beta_end);
  detail_ckpt::put<uint32_t>(f, static_cast<uint32_t>(c.schedule_K));
  detail_ckpt::put<uint32_t>(f, static_cast<uint32_t>(c.params.size()));
  for (const auto& [name, t] : c.params) {
    detail_ckpt::put<uint32_t>(f, static_cast<uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail_ckpt::put_tensor(f, t);
  }
  detail_ckpt::put<uint64_t>(f, static_cast<uint64_t>(c.optim.step));
  for (const auto& [name, t] : c.params) {
    detail_ckpt::put_tensor(f, c.optim.m.at(name));
    detail_ckpt::put_tensor(f, c.optim.v.at(name));
  }
  detail_ckpt::put<uint32_t>(f, static_cast<uint32_t>(c.rng_state.size()));
  f.write(c.rng_state.data(), static_cast<std::streamsize>(c.rng_state.size()));
  detail_ckpt::put<uint64_t>(f, c.step);
  if (!f) throw std::runtime_error("checkpoint: write failed: " + path);
}

/// Load and verify. A config-hash mismatch is rejected unless `force`.
inline Checkpoint load_checkpoint(const std::string& path, uint64_t expected_hash, bool force) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open: " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path);
  }
  Checkpoint c;
  c.config_hash = detail_ckpt::get<uint64_t>(f);
  if (c.config_hash != expected_hash && !force) {
    throw std::runtime_error("checkpoint: config hash mismatch in " + path +
                             " (pass force to override)");
  }
  c.schedule_T = static_cast<int>(detail_ckpt::get<uint32_t>(f));
  c.beta_start = detail_ckpt::get<double>(f);
  c.beta_end = detail_ckpt::get<double>(f);
  c.schedule_K = static_cast<int>(detail_ckpt::get<uint32_t>(f));
  uint32_t n = detail_ckpt::get<uint32_t>(f);
  std::vector<std::string> order;
  for (uint32_t i = 0; i < n; ++i) {
    uint32_t len = detail_ckpt::get<uint32_t>(f);
    std::string name(len, '\0');
    f.read(name.data(), len);
    c.params.emplace(name, detail_ckpt::get_tensor(f));
    order.push_back(std::move(name));
  }
  c.optim.step = static_cast<int64_t>(detail_ckpt::get<uint64_t>(f));
  for (const auto& name : order) {
    c.optim.m.emplace(name, detail_ckpt::get_tensor(f));
    c.optim.v.emplace(name, detail_ckpt::get_tensor(f));
  }
  uint32_t rlen = detail_ckpt::get<uint32_t>(f);
  c.rng_state.resize(rlen);
  f.read(c.rng_state.data(), rlen);
  c.step = detail_ckpt::get<uint64_t>(f);
  if (!f) throw std::runtime_error("checkpoint: truncated file " + path);
  return c;
}

}  // namespace diffseg
