#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffseg/diffusion.hpp"
#include "diffseg/graph.hpp"
#include "diffseg/losses.hpp"
#include "diffseg/optim.hpp"
#include "diffseg/rng.hpp"
#include "diffseg/schedule.hpp"
#include "diffseg/unet.hpp"
#include "diffseg/util.hpp"

namespace diffseg {

enum class TrainStrategy { standard, recycle };
enum class ModelKind { diffusion, direct_segmentation };

template <typename T>
struct TrainSample {
  VolumeT<T> image;
  LabelMask mask;
};

/// One training step's sampled randomness: the step pair and two
/// independently sampled noises. k_next = min(k+1, K) keeps the final step
/// trainable when k = K.
template <typename T>
struct TrainStepPlan {
  int k = 1;
  int k_next = 1;
  bool recycle_active = false;
  Tensor<T> eps_k;
  Tensor<T> eps_k_next;
};

/// Uniform over {1, ..., K}.
inline int sample_timestep(int K, Rng& rng) {
  if (K < 1) throw std::invalid_argument("sample_timestep: K must be >= 1");
  return static_cast<int>(rng.uniform_int(1, K));
}

struct TrainSettings {
  TrainStrategy strategy = TrainStrategy::recycle;
  Parameterization parameterization = Parameterization::predict_x0;
  ModelKind model = ModelKind::diffusion;
  LossConfig loss;
  double recycle_prob = 1.0;            // applied on every step by default
  bool recycle_exclude_last = false;    // variant: k ~ U{1..K-1}, no clamping
  int threads = 0;                      // batch-element parallelism; 0 = hardware
};

/// Draw order: k, [recycle bernoulli], eps_k, eps_k_next.
template <typename T>
TrainStepPlan<T> make_plan(const TrainSettings& s, const SubSchedule& sched,
                           const std::vector<int>& signal_shape, Rng& rng) {
  TrainStepPlan<T> plan;
  bool exclude_last = s.strategy == TrainStrategy::recycle && s.recycle_exclude_last && sched.K >= 2;
  plan.k = exclude_last ? sample_timestep(sched.K - 1, rng) : sample_timestep(sched.K, rng);
  plan.k_next = std::min(plan.k + 1, sched.K);
  if (s.strategy == TrainStrategy::recycle) {
    plan.recycle_active = s.recycle_prob >= 1.0 || rng.uniform01() < s.recycle_prob;
  }
  plan.eps_k = random_normal<T>(signal_shape, rng);
  plan.eps_k_next = random_normal<T>(signal_shape, rng);
  return plan;
}

/// Denoiser recorded into a caller-owned graph: (image var, noisy signal
/// tensor, subsequence step) -> output var (logits or noise estimate).
template <typename T>
using GraphDenoiser = std::function<typename Graph<T>::Var(
    Graph<T>& g, typename Graph<T>::Var image, const Tensor<T>& x_t, int k)>;

/// Wrap a UNet as a GraphDenoiser sharing one parameter-var cache, so every
/// pass recorded in the same graph reuses the same leaves.
template <typename T>
GraphDenoiser<T> unet_graph_denoiser(const UNet<T>& unet, const SubSchedule& sched,
                                     std::map<std::string, typename Graph<T>::Var>& vars,
                                     bool trainable) {
  return [&unet, &sched, &vars, trainable](Graph<T>& g, typename Graph<T>::Var image,
                                           const Tensor<T>& x_t, int k) {
    return unet.build(g, image, g.constant(x_t), sched.timestep_at(k), vars, trainable);
  };
}

/// Without recycling the noisy mask comes from the ground truth directly.
template <typename T>
Tensor<T> build_inputs_standard(const Tensor<T>& x0, const TrainStepPlan<T>& plan,
                                const SubSchedule& sched) {
  return q_sample(x0, plan.k, plan.eps_k, sched);
}

template <typename T>
struct RecycleInputs {
  Tensor<T> x_k;                         // model input for the gradient pass
  Tensor<T> x0_pred;                     // recycled prediction (value)
  typename Graph<T>::Var x0_pred_var;    // stop-gradient node in the graph
};

/// Recycling for mask-prediction models:
///   x_{k+1} = sqrt(abar_{k+1}) x0 + sqrt(1-abar_{k+1}) eps_{k+1}
///   x0_pred = StopGradient(logits_to_signal(denoiser(I, k+1, x_{k+1})))
///   x_k     = sqrt(abar_k) x0_pred + sqrt(1-abar_k) eps_k
/// The denoiser call is recorded in `g` but contributes no gradient.
template <typename T>
RecycleInputs<T> build_inputs_recycle_x0(Graph<T>& g, const GraphDenoiser<T>& denoiser,
                                         typename Graph<T>::Var image, const Tensor<T>& x0,
                                         const TrainStepPlan<T>& plan, const SubSchedule& sched) {
  Tensor<T> x_next = q_sample(x0, plan.k_next, plan.eps_k_next, sched);
  auto logits = denoiser(g, image, x_next, plan.k_next);
  auto x0_pred = g.stop_gradient(logits_to_signal(g, logits));
  RecycleInputs<T> out;
  out.x_k = q_sample(g.val(x0_pred), plan.k, plan.eps_k, sched);
  out.x0_pred = g.val(x0_pred);
  out.x0_pred_var = x0_pred;
  return out;
}

/// Recycling for noise-prediction models:
///   eps_pred = StopGradient(denoiser(I, k+1, x_{k+1}))
///   x0_pred  = clip((x_{k+1} - sqrt(1-abar_{k+1}) eps_pred) / sqrt(abar_{k+1}))
///   x_k      = sqrt(abar_k) x0_pred + sqrt(1-abar_k) eps_k
template <typename T>
RecycleInputs<T> build_inputs_recycle_eps(Graph<T>& g, const GraphDenoiser<T>& denoiser,
                                          typename Graph<T>::Var image, const Tensor<T>& x0,
                                          const TrainStepPlan<T>& plan, const SubSchedule& sched) {
  Tensor<T> x_next = q_sample(x0, plan.k_next, plan.eps_k_next, sched);
  auto eps_pred = g.stop_gradient(denoiser(g, image, x_next, plan.k_next));
  RecycleInputs<T> out;
  out.x0_pred = signal_from_noise_pred(x_next, plan.k_next, g.val(eps_pred), sched);
  out.x_k = q_sample(out.x0_pred, plan.k, plan.eps_k, sched);
  out.x0_pred_var = eps_pred;
  return out;
}

template <typename T>
struct ElementResult {
  std::map<std::string, Tensor<T>> grads;
  LossTerms terms;
};

/// Forward+backward for one batch element in its own graph.
template <typename T>
ElementResult<T> train_element(const TrainSample<T>& sample, const TrainSettings& s,
                               const UNet<T>& unet, const SubSchedule& sched, Rng& rng) {
  const int C = unet.config().out_channels;
  Graph<T> g;
  std::map<std::string, typename Graph<T>::Var> vars;
  auto image = g.constant(sample.image.intensities);
  DiffusionLossVars<T> loss;
  if (s.model == ModelKind::direct_segmentation) {
    // Same network trained image -> mask: signal channels zeroed, timestep 0,
    // CE+Dice on the logits.
    Tensor<T> zeros(mask_to_signal<T>(sample.mask, C).shape, T(0));
    auto xt = g.constant(std::move(zeros));
    auto out = unet.build(g, image, xt, 0, vars, /*trainable=*/true);
    LossConfig seg_cfg = s.loss;
    seg_cfg.parameterization = Parameterization::predict_x0;
    loss = diffusion_loss(g, out, xt, sample.mask, static_cast<const Tensor<T>*>(nullptr), 1,
                          sched, seg_cfg);
  } else {
    Tensor<T> x0 = mask_to_signal<T>(sample.mask, C);
    TrainStepPlan<T> plan = make_plan<T>(s, sched, x0.shape, rng);
    auto denoiser = unet_graph_denoiser(unet, sched, vars, /*trainable=*/true);
    Tensor<T> x_k;
    if (plan.recycle_active) {
      auto rec = s.parameterization == Parameterization::predict_x0
                     ? build_inputs_recycle_x0(g, denoiser, image, x0, plan, sched)
                     : build_inputs_recycle_eps(g, denoiser, image, x0, plan, sched);
      x_k = std::move(rec.x_k);
    } else {
      x_k = build_inputs_standard(x0, plan, sched);
    }
    auto xt = g.constant(std::move(x_k));
    auto out = unet.build(g, image, xt, sched.timestep_at(plan.k), vars, /*trainable=*/true);
    loss = diffusion_loss(g, out, xt, sample.mask, &plan.eps_k, plan.k, sched, s.loss);
  }
  ElementResult<T> res;
  res.terms = loss.values(g);
  res.grads = g.backward(loss.total);
  return res;
}

/// One optimization step over a batch: builds inputs per strategy, runs the
/// gradient-carrying pass, averages gradients in batch order, applies AdamW.
/// Deterministic given (parameters, step_seed) for any thread count.
template <typename T>
LossTerms train_step(const std::vector<const TrainSample<T>*>& batch, const TrainSettings& s,
                     UNet<T>& unet, OptimState<T>& opt_state, const OptimConfig& opt_cfg,
                     double lr, const SubSchedule& sched, uint64_t step_seed) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  s.loss.validate();
  const int B = static_cast<int>(batch.size());
  std::vector<ElementResult<T>> results(static_cast<size_t>(B));
  parallel_for(B, s.threads, [&](int e) {
    Rng erng(seed_combine(step_seed, static_cast<uint64_t>(e)));
    results[static_cast<size_t>(e)] = train_element(*batch[static_cast<size_t>(e)], s, unet, sched, erng);
  });

  std::map<std::string, Tensor<T>> grads = std::move(results[0].grads);
  LossTerms terms = results[0].terms;
  const T inv_b = T(1) / static_cast<T>(B);
  for (int e = 1; e < B; ++e) {
    for (auto& [name, acc] : grads) {
      const Tensor<T>& ge = results[static_cast<size_t>(e)].grads.at(name);
      for (int64_t i = 0; i < acc.numel(); ++i) acc[i] += ge[i];
    }
    terms.total += results[static_cast<size_t>(e)].terms.total;
    terms.ce += results[static_cast<size_t>(e)].terms.ce;
    terms.dice += results[static_cast<size_t>(e)].terms.dice;
    terms.noise_l2 += results[static_cast<size_t>(e)].terms.noise_l2;
  }
  for (auto& [name, acc] : grads) {
    for (auto& v : acc.data) v *= inv_b;
  }
  terms.total /= B;
  terms.ce /= B;
  terms.dice /= B;
  terms.noise_l2 /= B;
  adamw_update(unet.params(), grads, opt_state, opt_cfg, lr);
  return terms;
}

}  // namespace diffseg
