#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

#include "diffseg/tensor.hpp"

namespace diffseg {

struct OptimConfig {
  double lr_peak = 3e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int warmup_steps = 0;
  int total_steps = 1;
};

/// Linear 0 -> lr_peak over `warmup` steps, then cosine decay to 0 at `total`.
inline double warmup_cosine_lr(int step, int warmup, int total, double lr_peak) {
  if (step < 0 || step > total || warmup < 0 || warmup >= total) {
    throw std::invalid_argument("warmup_cosine_lr: need 0 <= step <= total and warmup < total");
  }
  if (step < warmup) return lr_peak * step / warmup;
  double progress = static_cast<double>(step - warmup) / (total - warmup);
  return lr_peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

/// AdamW moment accumulators; shapes mirror the parameter set.
template <typename T>
struct OptimState {
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;
  int64_t step = 0;  // updates applied so far (bias-correction exponent)

  static OptimState init(const std::map<std::string, Tensor<T>>& params) {
    OptimState s;
    for (const auto& [name, p] : params) {
      s.m.emplace(name, Tensor<T>(p.shape, T(0)));
      s.v.emplace(name, Tensor<T>(p.shape, T(0)));
    }
    return s;
  }
};

/// Decoupled-weight-decay Adam:
///   theta <- theta - lr * ( mhat / (sqrt(vhat) + eps) + wd * theta ).
template <typename T>
void adamw_update(std::map<std::string, Tensor<T>>& params,
                  const std::map<std::string, Tensor<T>>& grads, OptimState<T>& state,
                  const OptimConfig& cfg, double lr) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T one_m_b1 = static_cast<T>(1.0 - cfg.beta1), one_m_b2 = static_cast<T>(1.0 - cfg.beta2);
  const T inv_bc1 = static_cast<T>(1.0 / bc1), inv_bc2 = static_cast<T>(1.0 / bc2);
  const T eps = static_cast<T>(cfg.eps), wd = static_cast<T>(cfg.weight_decay);
  const T lr_t = static_cast<T>(lr);
  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) throw std::invalid_argument("adamw_update: missing gradient for " + name);
    const Tensor<T>& g = git->second;
    if (!g.same_shape(p)) throw std::invalid_argument("adamw_update: gradient shape mismatch for " + name);
    if (!g.all_finite()) throw std::runtime_error("adamw_update: non-finite gradient for " + name);
    Tensor<T>& m = state.m.at(name);
    Tensor<T>& v = state.v.at(name);
    for (int64_t i = 0; i < p.numel(); ++i) {
      m[i] = b1 * m[i] + one_m_b1 * g[i];
      v[i] = b2 * v[i] + one_m_b2 * g[i] * g[i];
      T mhat = m[i] * inv_bc1;
      T vhat = v[i] * inv_bc2;
      p[i] -= lr_t * (mhat / (std::sqrt(vhat) + eps) + wd * p[i]);
    }
  }
}

}  // namespace diffseg
