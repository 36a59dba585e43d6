#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffseg/diffusion.hpp"
#include "diffseg/rng.hpp"

namespace diffseg {

/// Synthetic volume generation settings. The defaults are the desk-scale
/// stand-in for the clinical datasets: 24^3 volumes, background + 3 structures
/// with distinct mean intensities, Gaussian noise and a linear bias field.
struct SynthConfig {
  std::array<int, 3> shape{24, 24, 24};
  int classes = 4;
  std::vector<double> class_means{0.0, 0.8, 1.6, 2.4};
  double noise_sigma = 0.2;
  double bias_amplitude = 0.1;
  double min_radius_frac = 0.12;  // per-axis half-extent as a fraction of the axis
  double max_radius_frac = 0.22;
  int num_train = 64;
  int num_val = 16;
  int num_test = 16;
  uint64_t master_seed = 12345;
  std::array<float, 3> spacing{1.f, 1.f, 1.f};

  void validate() const {
    if (classes < 2) throw std::invalid_argument("SynthConfig: need classes >= 2");
    if (static_cast<int>(class_means.size()) != classes) {
      throw std::invalid_argument("SynthConfig: need one class mean per class");
    }
    if (shape[0] < 4 || shape[1] < 4 || shape[2] < 4) {
      throw std::invalid_argument("SynthConfig: volume too small");
    }
    if (!(min_radius_frac > 0) || !(max_radius_frac >= min_radius_frac) || max_radius_frac > 0.45) {
      throw std::invalid_argument("SynthConfig: bad radius range");
    }
    if (noise_sigma < 0 || bias_amplitude < 0) {
      throw std::invalid_argument("SynthConfig: sigma/bias must be >= 0");
    }
    if (num_train < 1 || num_val < 0 || num_test < 0) {
      throw std::invalid_argument("SynthConfig: bad split sizes");
    }
  }
};

namespace detail {

struct StructureDraw {
  bool ellipsoid = true;
  std::array<double, 3> center;
  std::array<double, 3> radius;
};

inline bool inside_structure(const StructureDraw& s, int d, int h, int w) {
  double dd = (d - s.center[0]) / s.radius[0];
  double dh = (h - s.center[1]) / s.radius[1];
  double dw = (w - s.center[2]) / s.radius[2];
  if (s.ellipsoid) return dd * dd + dh * dh + dw * dw <= 1.0;
  return std::abs(dd) <= 1.0 && std::abs(dh) <= 1.0 && std::abs(dw) <= 1.0;
}

}  // namespace detail

/// Deterministic per seed. Places classes-1 non-overlapping random
/// ellipsoids/cuboids, then renders per-class mean intensity + Gaussian noise
/// + a linear bias field, normalized to zero mean unit variance.
template <typename T>
std::pair<VolumeT<T>, LabelMask> generate_sample(const SynthConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const int D = cfg.shape[0], H = cfg.shape[1], W = cfg.shape[2];
  const int64_t n = static_cast<int64_t>(D) * H * W;

  LabelMask mask;
  mask.shape = cfg.shape;
  mask.spacing = cfg.spacing;
  mask.labels.assign(static_cast<size_t>(n), 0);
  auto lab = [&](int d, int h, int w) -> uint8_t& {
    return mask.labels[static_cast<size_t>((d * H + h) * W + w)];
  };

  const int retries = 200;
  for (int c = 1; c < cfg.classes; ++c) {
    bool placed = false;
    for (int attempt = 0; attempt < retries && !placed; ++attempt) {
      detail::StructureDraw s;
      s.ellipsoid = rng.uniform01() < 0.5;
      for (int ax = 0; ax < 3; ++ax) {
        double dim = cfg.shape[static_cast<size_t>(ax)];
        double r = (cfg.min_radius_frac + (cfg.max_radius_frac - cfg.min_radius_frac) * rng.uniform01()) * dim;
        r = std::max(r, 1.0);
        double c_lo = r, c_hi = dim - 1 - r;
        if (c_hi < c_lo) {
          c_lo = c_hi = (dim - 1) / 2.0;
        }
        s.radius[static_cast<size_t>(ax)] = r;
        s.center[static_cast<size_t>(ax)] = c_lo + (c_hi - c_lo) * rng.uniform01();
      }
      std::vector<int64_t> voxels;
      bool clash = false;
      int d_lo = std::max(0, static_cast<int>(std::floor(s.center[0] - s.radius[0])));
      int d_hi = std::min(D - 1, static_cast<int>(std::ceil(s.center[0] + s.radius[0])));
      int h_lo = std::max(0, static_cast<int>(std::floor(s.center[1] - s.radius[1])));
      int h_hi = std::min(H - 1, static_cast<int>(std::ceil(s.center[1] + s.radius[1])));
      int w_lo = std::max(0, static_cast<int>(std::floor(s.center[2] - s.radius[2])));
      int w_hi = std::min(W - 1, static_cast<int>(std::ceil(s.center[2] + s.radius[2])));
      for (int d = d_lo; d <= d_hi && !clash; ++d)
        for (int h = h_lo; h <= h_hi && !clash; ++h)
          for (int w = w_lo; w <= w_hi; ++w) {
            if (!detail::inside_structure(s, d, h, w)) continue;
            if (lab(d, h, w) != 0) {
              clash = true;
              break;
            }
            voxels.push_back((static_cast<int64_t>(d) * H + h) * W + w);
          }
      if (clash || voxels.empty()) continue;
      for (int64_t v : voxels) mask.labels[static_cast<size_t>(v)] = static_cast<uint8_t>(c);
      placed = true;
    }
    if (!placed) {
      throw std::runtime_error("generate_sample: could not place structure " + std::to_string(c) +
                               " after " + std::to_string(retries) +
                               " attempts; use smaller radius ranges");
    }
  }

  VolumeT<T> vol;
  vol.spacing = cfg.spacing;
  vol.intensities = Tensor<T>({1, D, H, W});
  std::array<double, 3> bias_coef{0, 0, 0};
  for (auto& b : bias_coef) b = 2.0 * rng.uniform01() - 1.0;
  double sum = 0, sumsq = 0;
  for (int d = 0; d < D; ++d)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) {
        int64_t i = (static_cast<int64_t>(d) * H + h) * W + w;
        double v = cfg.class_means[mask.labels[static_cast<size_t>(i)]];
        if (cfg.noise_sigma > 0) v += cfg.noise_sigma * rng.normal();
        if (cfg.bias_amplitude > 0) {
          v += cfg.bias_amplitude * (bias_coef[0] * (static_cast<double>(d) / D - 0.5) +
                                     bias_coef[1] * (static_cast<double>(h) / H - 0.5) +
                                     bias_coef[2] * (static_cast<double>(w) / W - 0.5));
        }
        vol.intensities[i] = static_cast<T>(v);
        sum += v;
        sumsq += v * v;
      }
  double mean = sum / static_cast<double>(n);
  double var = sumsq / static_cast<double>(n) - mean * mean;
  double sd = var > 0 ? std::sqrt(var) : 1.0;
  for (int64_t i = 0; i < n; ++i) {
    vol.intensities[i] = static_cast<T>((static_cast<double>(vol.intensities[i]) - mean) / sd);
  }
  return {std::move(vol), std::move(mask)};
}

/// A recorded augmentation: axis-aligned 90-degree rotation, axis flips and
/// integer translation (up to 20% per axis), applied identically to image and
/// mask. Out-of-range voxels are zero (image) / background (mask).
struct AugmentDraw {
  int rot_pair = -1;   // -1 none, 0 (d,h), 1 (d,w), 2 (h,w); requires equal dims
  int rot_quarter = 0; // number of 90-degree turns, 0..3
  std::array<bool, 3> flip{false, false, false};
  std::array<int, 3> shift{0, 0, 0};
};

inline AugmentDraw sample_augment(const std::array<int, 3>& shape, Rng& rng) {
  AugmentDraw a;
  std::vector<int> pairs;
  if (shape[0] == shape[1]) pairs.push_back(0);
  if (shape[0] == shape[2]) pairs.push_back(1);
  if (shape[1] == shape[2]) pairs.push_back(2);
  int pick = static_cast<int>(rng.uniform_int(0, static_cast<int64_t>(pairs.size())));
  a.rot_pair = pick == 0 ? -1 : pairs[static_cast<size_t>(pick - 1)];
  a.rot_quarter = static_cast<int>(rng.uniform_int(0, 3));
  if (a.rot_quarter == 0) a.rot_pair = -1;
  for (int ax = 0; ax < 3; ++ax) a.flip[static_cast<size_t>(ax)] = rng.uniform01() < 0.5;
  for (int ax = 0; ax < 3; ++ax) {
    int max_shift = shape[static_cast<size_t>(ax)] / 5;
    a.shift[static_cast<size_t>(ax)] = static_cast<int>(rng.uniform_int(-max_shift, max_shift));
  }
  return a;
}

namespace detail {

/// Source index for output index under the draw, or -1 if out of range.
/// Transform order on the output side: rotation, then flips, then shift.
inline bool augment_source(const AugmentDraw& a, const std::array<int, 3>& shape, int od, int oh,
                           int ow, std::array<int, 3>& src) {
  int d = od - a.shift[0];
  int h = oh - a.shift[1];
  int w = ow - a.shift[2];
  if (d < 0 || d >= shape[0] || h < 0 || h >= shape[1] || w < 0 || w >= shape[2]) return false;
  if (a.flip[0]) d = shape[0] - 1 - d;
  if (a.flip[1]) h = shape[1] - 1 - h;
  if (a.flip[2]) w = shape[2] - 1 - w;
  int* u = nullptr;
  int* v = nullptr;
  int nu = 0;
  if (a.rot_pair == 0) {
    u = &d; v = &h; nu = shape[0];
  } else if (a.rot_pair == 1) {
    u = &d; v = &w; nu = shape[0];
  } else if (a.rot_pair == 2) {
    u = &h; v = &w; nu = shape[1];
  }
  if (u) {
    for (int q = 0; q < a.rot_quarter; ++q) {
      int tu = *u;
      *u = *v;
      *v = nu - 1 - tu;
    }
  }
  src = {d, h, w};
  return true;
}

}  // namespace detail

template <typename T>
std::pair<VolumeT<T>, LabelMask> apply_augment(const VolumeT<T>& image, const LabelMask& mask,
                                               const AugmentDraw& a) {
  const int D = mask.shape[0], H = mask.shape[1], W = mask.shape[2];
  if ((a.rot_pair == 0 && D != H) || (a.rot_pair == 1 && D != W) || (a.rot_pair == 2 && H != W)) {
    throw std::invalid_argument("apply_augment: rotation axis pair needs equal dims");
  }
  VolumeT<T> img_out;
  img_out.spacing = image.spacing;
  img_out.intensities = Tensor<T>({1, D, H, W}, T(0));
  LabelMask mask_out;
  mask_out.shape = mask.shape;
  mask_out.spacing = mask.spacing;
  mask_out.labels.assign(static_cast<size_t>(mask.numel()), 0);
  std::array<int, 3> src{};
  for (int d = 0; d < D; ++d)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) {
        if (!detail::augment_source(a, mask.shape, d, h, w, src)) continue;
        int64_t oi = (static_cast<int64_t>(d) * H + h) * W + w;
        int64_t si = (static_cast<int64_t>(src[0]) * H + src[1]) * W + src[2];
        img_out.intensities[oi] = image.intensities[si];
        mask_out.labels[static_cast<size_t>(oi)] = mask.labels[static_cast<size_t>(si)];
      }
  return {std::move(img_out), std::move(mask_out)};
}

template <typename T>
std::pair<VolumeT<T>, LabelMask> augment(const VolumeT<T>& image, const LabelMask& mask, Rng& rng) {
  return apply_augment(image, mask, sample_augment(mask.shape, rng));
}

}  // namespace diffseg
