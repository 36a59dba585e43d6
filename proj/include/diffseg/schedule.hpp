#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace diffseg {

/// Forward-process variance schedule over T steps. Sequences are 1-indexed
/// by timestep; element [i] corresponds to t = i+1. alpha_bar uses the
/// convention alpha_bar(0) = 1, so beta_tilde(1) = 0.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;        // beta_t in (0,1)
  std::vector<double> alpha;       // 1 - beta_t
  std::vector<double> alpha_bar;   // prod_{s<=t} alpha_s
  std::vector<double> beta_tilde;  // (1-abar_{t-1})/(1-abar_t) * beta_t

  double alpha_bar_at(int t) const {  // t in [0, T]
    if (t < 0 || t > T) throw std::out_of_range("alpha_bar_at: t out of range");
    return t == 0 ? 1.0 : alpha_bar[static_cast<size_t>(t - 1)];
  }
};

/// K-point subsequence of a parent schedule with recomputed variances.
/// timesteps are the parent t_k (strictly increasing, t_1 = 1, t_K = T);
/// alpha_bar[k] equals the parent alpha_bar at t_k exactly.
struct SubSchedule {
  int K = 0;
  std::vector<int> timestep;       // t_k, 1-indexed into the parent schedule
  std::vector<double> beta;        // beta_k = 1 - abar(t_k)/abar(t_{k-1})
  std::vector<double> alpha;       // 1 - beta_k
  std::vector<double> alpha_bar;   // abar(t_k), copied from the parent
  std::vector<double> beta_tilde;  // (1-abar(t_{k-1}))/(1-abar(t_k)) * beta_k

  double alpha_bar_at(int k) const {  // k in [0, K]
    if (k < 0 || k > K) throw std::out_of_range("alpha_bar_at: k out of range");
    return k == 0 ? 1.0 : alpha_bar[static_cast<size_t>(k - 1)];
  }
  int timestep_at(int k) const {
    if (k < 1 || k > K) throw std::out_of_range("timestep_at: k out of range");
    return timestep[static_cast<size_t>(k - 1)];
  }
};

inline NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end) {
  if (T < 2) throw std::invalid_argument("make_linear_schedule: T must be >= 2");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
    throw std::invalid_argument("make_linear_schedule: need 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(static_cast<size_t>(T));
  s.alpha.resize(static_cast<size_t>(T));
  s.alpha_bar.resize(static_cast<size_t>(T));
  s.beta_tilde.resize(static_cast<size_t>(T));
  double abar_prev = 1.0;
  for (int t = 1; t <= T; ++t) {
    size_t i = static_cast<size_t>(t - 1);
    s.beta[i] = beta_start + (beta_end - beta_start) * (t - 1) / (T - 1);
    s.alpha[i] = 1.0 - s.beta[i];
    s.alpha_bar[i] = abar_prev * s.alpha[i];
    s.beta_tilde[i] = (1.0 - abar_prev) / (1.0 - s.alpha_bar[i]) * s.beta[i];
    abar_prev = s.alpha_bar[i];
  }
  return s;
}

/// Evenly spaced K-point subsequence with pinned endpoints t_1 = 1, t_K = T.
/// The spacing rule rounds ties down so T=1000, K=5 yields {1,251,500,750,1000}.
inline SubSchedule resample_subsequence(const NoiseSchedule& s, int K) {
  if (K < 2 || K > s.T) {
    throw std::invalid_argument("resample_subsequence: need 2 <= K <= T, got K=" +
                                std::to_string(K) + " T=" + std::to_string(s.T));
  }
  SubSchedule sub;
  sub.K = K;
  sub.timestep.resize(static_cast<size_t>(K));
  sub.beta.resize(static_cast<size_t>(K));
  sub.alpha.resize(static_cast<size_t>(K));
  sub.alpha_bar.resize(static_cast<size_t>(K));
  sub.beta_tilde.resize(static_cast<size_t>(K));
  for (int k = 1; k <= K; ++k) {
    double x = static_cast<double>(k - 1) * (s.T - 1) / (K - 1);
    int t = static_cast<int>(std::ceil(x - 0.5)) + 1;
    sub.timestep[static_cast<size_t>(k - 1)] = t;
  }
  double abar_prev = 1.0;
  for (int k = 1; k <= K; ++k) {
    size_t i = static_cast<size_t>(k - 1);
    double abar = s.alpha_bar_at(sub.timestep[i]);
    sub.alpha_bar[i] = abar;
    sub.beta[i] = 1.0 - abar / abar_prev;
    sub.alpha[i] = 1.0 - sub.beta[i];
    sub.beta_tilde[i] = (1.0 - abar_prev) / (1.0 - abar) * sub.beta[i];
    abar_prev = abar;
  }
  return sub;
}

/// Identity subsequence covering every parent step (used for full-T training).
inline SubSchedule full_subsequence(const NoiseSchedule& s) { return resample_subsequence(s, s.T); }

}  // namespace diffseg
