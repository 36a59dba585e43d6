#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "diffseg/diffusion.hpp"
#include "diffseg/graph.hpp"
#include "diffseg/schedule.hpp"

namespace diffseg {

inline constexpr double kDiceSmooth = 1e-5;

struct LossConfig {
  bool use_dice = true;
  bool use_ce = true;
  double noise_l2_weight = 0.1;
  Parameterization parameterization = Parameterization::predict_x0;

  void validate() const {
    if (!use_dice && !use_ce) {
      throw std::invalid_argument("LossConfig: at least one segmentation term must be enabled");
    }
    if (noise_l2_weight < 0) throw std::invalid_argument("LossConfig: noise_l2_weight must be >= 0");
  }
};

/// Per-term loss values for logging; terms not in the configuration are 0.
struct LossTerms {
  double total = 0.0;
  double ce = 0.0;
  double dice = 0.0;
  double noise_l2 = 0.0;
};

template <typename T>
Tensor<T> one_hot(const LabelMask& mask, int C) {
  int64_t n = mask.numel();
  Tensor<T> y({C, mask.shape[0], mask.shape[1], mask.shape[2]}, T(0));
  for (int64_t i = 0; i < n; ++i) {
    uint8_t lab = mask.labels[static_cast<size_t>(i)];
    if (lab >= C) {
      throw std::invalid_argument("one_hot: label " + std::to_string(int(lab)) + " >= " +
                                  std::to_string(C));
    }
    y[static_cast<int64_t>(lab) * n + i] = T(1);
  }
  return y;
}

/// Mean over voxels of -log p_target. probs must be [C,D,H,W] channel
/// probabilities; log uses the kLogFloor clamp.
template <typename T>
typename Graph<T>::Var cross_entropy(Graph<T>& g, typename Graph<T>::Var probs,
                                     const LabelMask& target) {
  const Tensor<T>& pv = g.val(probs);
  if (pv.rank() != 4) throw std::invalid_argument("cross_entropy: probs must be [C,D,H,W]");
  int C = pv.shape[0];
  if (pv.shape[1] != target.shape[0] || pv.shape[2] != target.shape[1] ||
      pv.shape[3] != target.shape[2]) {
    throw std::invalid_argument("cross_entropy: probs shape " + Tensor<T>::shape_string(pv.shape) +
                                " does not match mask grid");
  }
  auto y = g.constant(one_hot<T>(target, C));
  int64_t voxels = target.numel();
  auto picked = g.sum_all(g.mul(y, g.log(probs)));
  return g.scalar_mul(picked, T(-1) / static_cast<T>(voxels));
}

/// Soft Dice loss over foreground classes 1..C-1:
///   1 - mean_c (2 sum p_c y_c + s) / (sum p_c + sum y_c + s),  s = kDiceSmooth.
/// Classes absent from both prediction and target contribute Dice 1 via s.
template <typename T>
typename Graph<T>::Var dice_loss(Graph<T>& g, typename Graph<T>::Var probs,
                                 const LabelMask& target) {
  const Tensor<T>& pv = g.val(probs);
  if (pv.rank() != 4 || pv.shape[0] < 2) {
    throw std::invalid_argument("dice_loss: probs must be [C,D,H,W] with C >= 2");
  }
  int C = pv.shape[0];
  auto y = g.constant(one_hot<T>(target, C));
  const T s = static_cast<T>(kDiceSmooth);
  auto inter = g.sum_spatial(g.mul(probs, y));
  auto psum = g.sum_spatial(probs);
  auto ysum = g.sum_spatial(y);
  auto num = g.scalar_add(g.scalar_mul(inter, T(2)), s);
  auto den = g.scalar_add(g.add(psum, ysum), s);
  auto dice_per_class = g.div(num, den);
  Tensor<T> w({C}, T(1) / static_cast<T>(C - 1));
  w[0] = T(0);  // background excluded
  auto fg_mean = g.sum_all(g.mul(dice_per_class, g.constant(std::move(w))));
  return g.scalar_add(g.neg(fg_mean), T(1));
}

template <typename T>
struct DiffusionLossVars {
  typename Graph<T>::Var total;
  typename Graph<T>::Var ce = -1;       // -1 when the term is disabled
  typename Graph<T>::Var dice = -1;
  typename Graph<T>::Var noise_l2 = -1;

  LossTerms values(const Graph<T>& g) const {
    LossTerms t;
    t.total = static_cast<double>(g.val(total)[0]);
    if (ce >= 0) t.ce = static_cast<double>(g.val(ce)[0]);
    if (dice >= 0) t.dice = static_cast<double>(g.val(dice)[0]);
    if (noise_l2 >= 0) t.noise_l2 = static_cast<double>(g.val(noise_l2)[0]);
    return t;
  }
};

/// Training loss per Eq. 6/7 plus the experiment section's combination rules.
///   predict_x0:  L = CE + Dice on softmax(model_out) vs target.
///   predict_eps: L = w * mean((eps - model_out)^2) + L_seg on probabilities
///                derived from x0_pred = signal_from_noise_pred(x_t, k, model_out),
///                p = (x0_pred+1)/2 renormalized per voxel.
/// `x_t` is the (constant) noisy input the model saw; `eps_target` the noise
/// that built it. Both are ignored in predict_x0 mode.
template <typename T>
DiffusionLossVars<T> diffusion_loss(Graph<T>& g, typename Graph<T>::Var model_out,
                                    typename Graph<T>::Var x_t, const LabelMask& target,
                                    const Tensor<T>* eps_target, int k, const SubSchedule& sched,
                                    const LossConfig& cfg) {
  cfg.validate();
  DiffusionLossVars<T> out;
  typename Graph<T>::Var probs;
  typename Graph<T>::Var total = -1;
  auto term = [](const char* name, auto&& fn) {
    try {
      return fn();
    } catch (const std::runtime_error& e) {
      throw std::runtime_error(std::string("diffusion_loss: ") + name + " term failed: " + e.what());
    }
  };
  if (cfg.parameterization == Parameterization::predict_x0) {
    probs = g.softmax_channel(model_out);
  } else {
    if (eps_target == nullptr) {
      throw std::invalid_argument("diffusion_loss: predict_eps requires the noise target");
    }
    out.noise_l2 = term("noise_l2", [&] {
      auto diff = g.sub(model_out, g.constant(*eps_target));
      return g.scalar_mul(g.mean_all(g.square(diff)), static_cast<T>(cfg.noise_l2_weight));
    });
    total = out.noise_l2;
    // x0 estimate via Eq. 10, clipped, then mapped back to per-voxel probabilities.
    probs = term("segmentation_probs", [&] {
      double abar = sched.alpha_bar_at(k);
      T inv_a = static_cast<T>(1.0 / std::sqrt(abar));
      T b = static_cast<T>(std::sqrt(1.0 - abar));
      auto x0_pred =
          g.clamp(g.scalar_mul(g.sub(x_t, g.scalar_mul(model_out, b)), inv_a), T(-1), T(1));
      auto p_raw = g.scalar_mul(g.scalar_add(x0_pred, T(1)), T(0.5));
      auto denom = g.clamp(g.channel_sum_keepdim(p_raw), static_cast<T>(kLogFloor),
                           std::numeric_limits<T>::max());
      return g.div(p_raw, denom);
    });
  }
  if (cfg.use_ce) {
    out.ce = term("cross_entropy", [&] { return cross_entropy(g, probs, target); });
    total = total < 0 ? out.ce : g.add(total, out.ce);
  }
  if (cfg.use_dice) {
    out.dice = term("dice", [&] { return dice_loss(g, probs, target); });
    total = total < 0 ? out.dice : g.add(total, out.dice);
  }
  out.total = total;
  return out;
}

}  // namespace diffseg
