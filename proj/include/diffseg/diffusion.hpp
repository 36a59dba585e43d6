#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffseg/graph.hpp"
#include "diffseg/rng.hpp"
#include "diffseg/schedule.hpp"
#include "diffseg/tensor.hpp"

namespace diffseg {

/// Integer class labels on a [D,H,W] grid with voxel spacing in mm.
struct LabelMask {
  std::array<int, 3> shape{0, 0, 0};
  std::array<float, 3> spacing{1.f, 1.f, 1.f};
  std::vector<uint8_t> labels;

  int64_t numel() const { return static_cast<int64_t>(shape[0]) * shape[1] * shape[2]; }

  bool operator==(const LabelMask& o) const {
    return shape == o.shape && spacing == o.spacing && labels == o.labels;
  }
};

/// Scalar image [1,D,H,W] with voxel spacing in mm.
template <typename T>
struct VolumeT {
  Tensor<T> intensities;
  std::array<float, 3> spacing{1.f, 1.f, 1.f};
};

using Volume = VolumeT<float>;

enum class Parameterization { predict_x0, predict_eps };

inline const char* to_string(Parameterization p) {
  return p == Parameterization::predict_x0 ? "predict_x0" : "predict_eps";
}

/// One-hot encode then map {0,1} -> {-1,+1}. Output [C,D,H,W].
template <typename T>
Tensor<T> mask_to_signal(const LabelMask& mask, int C) {
  int64_t n = mask.numel();
  Tensor<T> out({C, mask.shape[0], mask.shape[1], mask.shape[2]}, T(-1));
  for (int64_t i = 0; i < n; ++i) {
    uint8_t lab = mask.labels[static_cast<size_t>(i)];
    if (lab >= C) {
      throw std::invalid_argument("mask_to_signal: label " + std::to_string(int(lab)) +
                                  " >= class count " + std::to_string(C));
    }
    out[static_cast<int64_t>(lab) * n + i] = T(1);
  }
  return out;
}

/// Per-voxel channel argmax; ties go to the lowest class index.
template <typename T>
LabelMask signal_to_mask(const Tensor<T>& signal, std::array<float, 3> spacing = {1.f, 1.f, 1.f}) {
  if (signal.rank() != 4) throw std::invalid_argument("signal_to_mask: need [C,D,H,W]");
  int C = signal.shape[0];
  int64_t n = signal.numel() / C;
  LabelMask m;
  m.shape = {signal.shape[1], signal.shape[2], signal.shape[3]};
  m.spacing = spacing;
  m.labels.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    int best = 0;
    T bv = signal[i];
    for (int c = 1; c < C; ++c) {
      T v = signal[c * n + i];
      if (v > bv) {
        bv = v;
        best = c;
      }
    }
    m.labels[static_cast<size_t>(i)] = static_cast<uint8_t>(best);
  }
  return m;
}

/// x = 2*softmax(logits) - 1, values in (-1, 1).
template <typename T>
Tensor<T> logits_to_signal(const Tensor<T>& logits) {
  Tensor<T> p = detail::softmax_axis0(logits);
  for (auto& v : p.data) v = T(2) * v - T(1);
  return p;
}

/// Graph version of logits_to_signal for recorded forward passes.
template <typename T>
typename Graph<T>::Var logits_to_signal(Graph<T>& g, typename Graph<T>::Var logits) {
  return g.scalar_add(g.scalar_mul(g.softmax_channel(logits), T(2)), T(-1));
}

/// Forward noising x_k = sqrt(abar_k) x0 + sqrt(1-abar_k) eps. Not clipped.
template <typename T>
Tensor<T> q_sample(const Tensor<T>& x0, int k, const Tensor<T>& eps, const SubSchedule& sched) {
  if (k < 1 || k > sched.K) throw std::invalid_argument("q_sample: step out of range");
  if (!x0.same_shape(eps)) {
    throw std::invalid_argument("q_sample: signal shape " + Tensor<T>::shape_string(x0.shape) +
                                " != noise shape " + Tensor<T>::shape_string(eps.shape));
  }
  T a = static_cast<T>(std::sqrt(sched.alpha_bar_at(k)));
  T b = static_cast<T>(std::sqrt(1.0 - sched.alpha_bar_at(k)));
  Tensor<T> out(x0.shape);
  for (int64_t i = 0; i < x0.numel(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

/// Invert the forward process given a noise estimate, then clip to [-1,1]:
/// x0 = (x_k - sqrt(1-abar_k) eps) / sqrt(abar_k).
template <typename T>
Tensor<T> signal_from_noise_pred(const Tensor<T>& x_t, int k, const Tensor<T>& eps_pred,
                                 const SubSchedule& sched) {
  if (k < 1 || k > sched.K) throw std::invalid_argument("signal_from_noise_pred: step out of range");
  double abar = sched.alpha_bar_at(k);
  T a = static_cast<T>(std::sqrt(abar));
  T b = static_cast<T>(std::sqrt(1.0 - abar));
  Tensor<T> out(x_t.shape);
  for (int64_t i = 0; i < x_t.numel(); ++i) {
    T v = (x_t[i] - b * eps_pred[i]) / a;
    out[i] = v < T(-1) ? T(-1) : (v > T(1) ? T(1) : v);
  }
  return out;
}

/// Posterior mean of the reverse step, either parameterization.
///   predict_x0:  mu = sqrt(abar_{k-1}) beta_k/(1-abar_k) * x0
///                   + (1-abar_{k-1})/(1-abar_k) sqrt(alpha_k) * x_t
///   predict_eps: mu = (x_t - beta_k/sqrt(1-abar_k) * eps) / sqrt(alpha_k)
template <typename T>
Tensor<T> posterior_mean(const Tensor<T>& x_t, int k, const Tensor<T>& prediction,
                         Parameterization mode, const SubSchedule& sched) {
  if (k < 1 || k > sched.K) {
    throw std::invalid_argument("posterior_mean: step must be in [1,K], got " + std::to_string(k));
  }
  if (!x_t.same_shape(prediction)) {
    throw std::invalid_argument("posterior_mean: shape mismatch");
  }
  size_t i = static_cast<size_t>(k - 1);
  double abar = sched.alpha_bar[i];
  double abar_prev = sched.alpha_bar_at(k - 1);
  double beta = sched.beta[i];
  double alpha = sched.alpha[i];
  Tensor<T> out(x_t.shape);
  if (mode == Parameterization::predict_x0) {
    T c0 = static_cast<T>(std::sqrt(abar_prev) * beta / (1.0 - abar));
    T ct = static_cast<T>((1.0 - abar_prev) / (1.0 - abar) * std::sqrt(alpha));
    for (int64_t j = 0; j < x_t.numel(); ++j) out[j] = c0 * prediction[j] + ct * x_t[j];
  } else {
    T inv_sa = static_cast<T>(1.0 / std::sqrt(alpha));
    T ce = static_cast<T>(beta / std::sqrt(1.0 - abar));
    for (int64_t j = 0; j < x_t.numel(); ++j) out[j] = inv_sa * (x_t[j] - ce * prediction[j]);
  }
  return out;
}

/// One reverse transition x_k -> x_{k-1}: mu + sqrt(beta_tilde_k) z for k > 1,
/// exactly mu at k = 1 (beta_tilde_1 = 0, rng untouched). Output clipped to [-1,1].
template <typename T>
Tensor<T> reverse_step(const Tensor<T>& x_t, int k, const Tensor<T>& prediction,
                       Parameterization mode, const SubSchedule& sched, Rng& rng) {
  Tensor<T> mu = posterior_mean(x_t, k, prediction, mode, sched);
  if (k > 1) {
    T sd = static_cast<T>(std::sqrt(sched.beta_tilde[static_cast<size_t>(k - 1)]));
    for (int64_t i = 0; i < mu.numel(); ++i) mu[i] += sd * static_cast<T>(rng.normal());
  }
  for (auto& v : mu.data) v = v < T(-1) ? T(-1) : (v > T(1) ? T(1) : v);
  return mu;
}

/// Inference-time denoiser: (image, noisy signal, subsequence step) -> network
/// output (logits for predict_x0, noise estimate for predict_eps).
template <typename T>
using SamplingDenoiser =
    std::function<Tensor<T>(const VolumeT<T>& image, const Tensor<T>& x_t, int k)>;

template <typename T>
struct SampleResult {
  LabelMask mask;
  Tensor<T> signal;  // final x_0 estimate, clipped
};

/// Full K-step reverse loop from pure noise; invokes the denoiser exactly K
/// times. For predict_x0 the network output is read as logits and mapped to a
/// clipped signal estimate before Eq. 1. Deterministic given (denoiser
/// parameters, image, rng seed).
template <typename T>
SampleResult<T> sample_mask(const SamplingDenoiser<T>& denoiser, const VolumeT<T>& image, int C,
                            Parameterization mode, const SubSchedule& sched, Rng& rng) {
  const auto& is = image.intensities.shape;
  if (image.intensities.rank() != 4 || is[0] != 1) {
    throw std::invalid_argument("sample_mask: image must be [1,D,H,W]");
  }
  Tensor<T> x = random_normal<T>({C, is[1], is[2], is[3]}, rng);
  for (int k = sched.K; k >= 1; --k) {
    Tensor<T> pred = denoiser(image, x, k);
    if (!pred.same_shape(x)) {
      throw std::runtime_error("sample_mask: denoiser output shape " +
                               Tensor<T>::shape_string(pred.shape) + " != " +
                               Tensor<T>::shape_string(x.shape));
    }
    if (!pred.all_finite()) throw std::runtime_error("sample_mask: non-finite denoiser output");
    if (mode == Parameterization::predict_x0) {
      Tensor<T> x0_est = logits_to_signal(pred);
      for (auto& v : x0_est.data) v = v < T(-1) ? T(-1) : (v > T(1) ? T(1) : v);
      x = reverse_step(x, k, x0_est, mode, sched, rng);
    } else {
      x = reverse_step(x, k, pred, mode, sched, rng);
    }
  }
  return {signal_to_mask(x, image.spacing), std::move(x)};
}

}  // namespace diffseg
