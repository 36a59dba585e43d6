#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffseg/diffusion.hpp"
#include "diffseg/tensor.hpp"

namespace diffseg {
namespace volio {

// VOLB layout (little-endian):
//   magic "VOLB1\0" (6 bytes)
//   u8 dtype: 0 = float32 image, 1 = u8 labels
//   u8 ndim
//   ndim x u32 dims
//   3 x f32 spacing (mm)
//   raw row-major payload
inline constexpr char kMagic[6] = {'V', 'O', 'L', 'B', '1', '\0'};

/// Test hook: called with the path on every VOLB read.
inline std::function<void(const std::string&)>& read_audit_hook() {
  static std::function<void(const std::string&)> hook;
  return hook;
}

namespace detail {

template <typename V>
void write_raw(std::ofstream& f, const V& v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_raw(std::ifstream& f) {
  V v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(V));
  return v;
}

struct Header {
  uint8_t dtype = 0;
  std::vector<uint32_t> dims;
  std::array<float, 3> spacing{1.f, 1.f, 1.f};
};

inline void write_header(std::ofstream& f, const Header& h) {
  f.write(kMagic, 6);
  write_raw(f, h.dtype);
  uint8_t nd = static_cast<uint8_t>(h.dims.size());
  write_raw(f, nd);
  for (uint32_t d : h.dims) write_raw(f, d);
  for (float s : h.spacing) write_raw(f, s);
}

inline Header read_header(std::ifstream& f, const std::string& path) {
  char magic[6];
  f.read(magic, 6);
  if (!f || std::memcmp(magic, kMagic, 6) != 0) {
    throw std::runtime_error("VOLB: bad magic in " + path);
  }
  Header h;
  h.dtype = read_raw<uint8_t>(f);
  uint8_t nd = read_raw<uint8_t>(f);
  h.dims.resize(nd);
  for (auto& d : h.dims) d = read_raw<uint32_t>(f);
  for (auto& s : h.spacing) s = read_raw<float>(f);
  if (!f) throw std::runtime_error("VOLB: truncated header in " + path);
  return h;
}

}  // namespace detail

inline void write_volume(const std::string& path, const Volume& vol) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("VOLB: cannot open for write: " + path);
  detail::Header h;
  h.dtype = 0;
  for (int d : vol.intensities.shape) h.dims.push_back(static_cast<uint32_t>(d));
  h.spacing = vol.spacing;
  detail::write_header(f, h);
  f.write(reinterpret_cast<const char*>(vol.intensities.data.data()),
          static_cast<std::streamsize>(vol.intensities.data.size() * sizeof(float)));
  if (!f) throw std::runtime_error("VOLB: write failed: " + path);
}

inline void write_mask(const std::string& path, const LabelMask& mask) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("VOLB: cannot open for write: " + path);
  detail::Header h;
  h.dtype = 1;
  for (int d : mask.shape) h.dims.push_back(static_cast<uint32_t>(d));
  h.spacing = mask.spacing;
  detail::write_header(f, h);
  f.write(reinterpret_cast<const char*>(mask.labels.data()),
          static_cast<std::streamsize>(mask.labels.size()));
  if (!f) throw std::runtime_error("VOLB: write failed: " + path);
}

inline Volume read_volume(const std::string& path) {
  if (read_audit_hook()) read_audit_hook()(path);
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("VOLB: cannot open: " + path);
  detail::Header h = detail::read_header(f, path);
  if (h.dtype != 0) throw std::runtime_error("VOLB: expected float32 volume in " + path);
  Volume vol;
  vol.spacing = h.spacing;
  std::vector<int> shape;
  for (uint32_t d : h.dims) shape.push_back(static_cast<int>(d));
  if (shape.size() == 3) shape.insert(shape.begin(), 1);  // accept [D,H,W]
  if (shape.size() != 4 || shape[0] != 1) {
    throw std::runtime_error("VOLB: volume must be [1,D,H,W] in " + path);
  }
  vol.intensities = Tensor<float>(shape);
  f.read(reinterpret_cast<char*>(vol.intensities.data.data()),
         static_cast<std::streamsize>(vol.intensities.data.size() * sizeof(float)));
  if (!f) throw std::runtime_error("VOLB: truncated payload in " + path);
  return vol;
}

inline LabelMask read_mask(const std::string& path) {
  if (read_audit_hook()) read_audit_hook()(path);
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("VOLB: cannot open: " + path);
  detail::Header h = detail::read_header(f, path);
  if (h.dtype != 1) throw std::runtime_error("VOLB: expected u8 labels in " + path);
  if (h.dims.size() != 3) throw std::runtime_error("VOLB: mask must be [D,H,W] in " + path);
  LabelMask m;
  m.shape = {static_cast<int>(h.dims[0]), static_cast<int>(h.dims[1]), static_cast<int>(h.dims[2])};
  m.spacing = h.spacing;
  m.labels.resize(static_cast<size_t>(m.numel()));
  f.read(reinterpret_cast<char*>(m.labels.data()), static_cast<std::streamsize>(m.labels.size()));
  if (!f) throw std::runtime_error("VOLB: truncated payload in " + path);
  return m;
}

}  // namespace volio
}  // namespace diffseg
