#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <vector>

#include "diffseg/diffusion.hpp"

namespace diffseg {

/// Per-case evaluation record. HD95 entries without a value were undefined
/// (prediction or truth had no voxels of that class).
struct CaseResult {
  std::vector<double> dice;                    // per foreground class, index c-1
  std::vector<std::optional<double>> hd95_mm;  // per foreground class
  std::vector<int64_t> roi_voxels;             // truth voxel count per foreground class
  double mean_dice = 0.0;                      // over foreground classes
  std::optional<double> mean_hd95;             // over classes where defined
  int hd95_undefined = 0;
};

struct DiceScores {
  std::vector<double> per_class;  // foreground classes 1..C-1
  double mean = 0.0;
};

/// Binary Dice per foreground class: 2|P∩T| / (|P|+|T|).
/// Both empty -> 1; exactly one empty -> 0.
inline DiceScores dice_score(const LabelMask& pred, const LabelMask& truth, int C) {
  if (pred.shape != truth.shape) throw std::invalid_argument("dice_score: shape mismatch");
  if (C < 2) throw std::invalid_argument("dice_score: need C >= 2");
  std::vector<int64_t> np(static_cast<size_t>(C), 0), nt(static_cast<size_t>(C), 0),
      ni(static_cast<size_t>(C), 0);
  int64_t n = pred.numel();
  for (int64_t i = 0; i < n; ++i) {
    uint8_t p = pred.labels[static_cast<size_t>(i)];
    uint8_t t = truth.labels[static_cast<size_t>(i)];
    if (p < C) ++np[p];
    if (t < C) ++nt[t];
    if (p == t && p < C) ++ni[p];
  }
  DiceScores out;
  out.per_class.reserve(static_cast<size_t>(C - 1));
  double sum = 0;
  for (int c = 1; c < C; ++c) {
    double d;
    int64_t a = np[static_cast<size_t>(c)], b = nt[static_cast<size_t>(c)];
    if (a == 0 && b == 0) {
      d = 1.0;
    } else if (a == 0 || b == 0) {
      d = 0.0;
    } else {
      d = 2.0 * static_cast<double>(ni[static_cast<size_t>(c)]) / static_cast<double>(a + b);
    }
    out.per_class.push_back(d);
    sum += d;
  }
  out.mean = sum / (C - 1);
  return out;
}

namespace detail {

/// Surface voxels of class c: a voxel of the class with at least one
/// neighbour (6- or 26-connectivity) outside the class; the grid border
/// counts as outside.
inline std::vector<std::array<int, 3>> surface_voxels(const LabelMask& m, int c,
                                                      int connectivity = 6) {
  if (connectivity != 6 && connectivity != 26) {
    throw std::invalid_argument("surface_voxels: connectivity must be 6 or 26");
  }
  const int D = m.shape[0], H = m.shape[1], W = m.shape[2];
  auto at = [&](int d, int h, int w) { return m.labels[static_cast<size_t>((d * H + h) * W + w)]; };
  std::vector<std::array<int, 3>> out;
  for (int d = 0; d < D; ++d)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) {
        if (at(d, h, w) != c) continue;
        bool surf = d == 0 || d == D - 1 || h == 0 || h == H - 1 || w == 0 || w == W - 1;
        if (!surf && connectivity == 6) {
          surf = at(d - 1, h, w) != c || at(d + 1, h, w) != c || at(d, h - 1, w) != c ||
                 at(d, h + 1, w) != c || at(d, h, w - 1) != c || at(d, h, w + 1) != c;
        } else if (!surf) {
          for (int dd = -1; dd <= 1 && !surf; ++dd)
            for (int dh = -1; dh <= 1 && !surf; ++dh)
              for (int dw = -1; dw <= 1; ++dw) {
                if (dd == 0 && dh == 0 && dw == 0) continue;
                if (at(d + dd, h + dh, w + dw) != c) {
                  surf = true;
                  break;
                }
              }
        }
        if (surf) out.push_back({d, h, w});
      }
  return out;
}

// Cells with no seed keep this sentinel; any real in-grid distance is far
// smaller, so the parabola envelope stays exact for reachable cells.
inline constexpr double kEdtFar = 1e10;        // linear sentinel
inline constexpr double kEdtFarSq = 1e20;      // squared sentinel

/// 1D lower envelope of parabolas f(q) + w (p-q)^2 (Felzenszwalb-Huttenlocher).
/// All f values must be finite (use kEdtFarSq for "no seed").
inline void squared_dt_1d(std::vector<double>& f, std::vector<int>& v, std::vector<double>& z,
                          std::vector<double>& d, int n, double w) {
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (int q = 1; q < n; ++q) {
    double s = 0;
    while (true) {
      int p = v[static_cast<size_t>(k)];
      s = (f[static_cast<size_t>(q)] + w * q * q - (f[static_cast<size_t>(p)] + w * p * p)) /
          (2.0 * w * (q - p));
      if (k > 0 && s <= z[static_cast<size_t>(k)]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[static_cast<size_t>(k)] = q;
    z[static_cast<size_t>(k)] = s;
    z[static_cast<size_t>(k + 1)] = std::numeric_limits<double>::infinity();
  }
  int k2 = 0;
  for (int q = 0; q < n; ++q) {
    while (z[static_cast<size_t>(k2 + 1)] < q) ++k2;
    int p = v[static_cast<size_t>(k2)];
    d[static_cast<size_t>(q)] = f[static_cast<size_t>(p)] + w * (q - p) * (q - p);
  }
  for (int q = 0; q < n; ++q) f[static_cast<size_t>(q)] = d[static_cast<size_t>(q)];
}

/// Exact anisotropic squared Euclidean distance transform to the `seeds` set.
/// First axis is done with two linear sweeps (exact in 1D and tolerant of
/// seedless rows), remaining axes with the parabola envelope.
inline std::vector<double> squared_edt(const std::array<int, 3>& shape,
                                       const std::array<float, 3>& spacing,
                                       const std::vector<std::array<int, 3>>& seeds) {
  const int D = shape[0], H = shape[1], W = shape[2];
  std::vector<double> g(static_cast<size_t>(D) * H * W, kEdtFar);
  for (const auto& s : seeds) g[static_cast<size_t>((s[0] * H + s[1]) * W + s[2])] = 0.0;
  // W axis: linear two-sweep distance, then square.
  const double sw = spacing[2];
  for (int dd = 0; dd < D; ++dd)
    for (int hh = 0; hh < H; ++hh) {
      double* row = &g[static_cast<size_t>((dd * H + hh) * W)];
      for (int w2 = 1; w2 < W; ++w2) row[w2] = std::min(row[w2], row[w2 - 1] + sw);
      for (int w2 = W - 2; w2 >= 0; --w2) row[w2] = std::min(row[w2], row[w2 + 1] + sw);
      for (int w2 = 0; w2 < W; ++w2) {
        row[w2] = row[w2] >= kEdtFar ? kEdtFarSq : row[w2] * row[w2];
      }
    }
  int nmax = std::max(D, H);
  std::vector<double> f(static_cast<size_t>(nmax)), d(static_cast<size_t>(nmax)),
      z(static_cast<size_t>(nmax) + 1);
  std::vector<int> v(static_cast<size_t>(nmax));
  // H axis
  double wh = static_cast<double>(spacing[1]) * spacing[1];
  for (int dd = 0; dd < D; ++dd)
    for (int w2 = 0; w2 < W; ++w2) {
      for (int hh = 0; hh < H; ++hh) f[static_cast<size_t>(hh)] = g[static_cast<size_t>((dd * H + hh) * W + w2)];
      squared_dt_1d(f, v, z, d, H, wh);
      for (int hh = 0; hh < H; ++hh) g[static_cast<size_t>((dd * H + hh) * W + w2)] = f[static_cast<size_t>(hh)];
    }
  // D axis
  double wd = static_cast<double>(spacing[0]) * spacing[0];
  for (int hh = 0; hh < H; ++hh)
    for (int w2 = 0; w2 < W; ++w2) {
      for (int dd = 0; dd < D; ++dd) f[static_cast<size_t>(dd)] = g[static_cast<size_t>((dd * H + hh) * W + w2)];
      squared_dt_1d(f, v, z, d, D, wd);
      for (int dd = 0; dd < D; ++dd) g[static_cast<size_t>((dd * H + hh) * W + w2)] = f[static_cast<size_t>(dd)];
    }
  return g;
}

/// Nearest-rank percentile of unsorted values (pct in (0,100]).
inline double nearest_rank_percentile(std::vector<double> xs, double pct) {
  std::sort(xs.begin(), xs.end());
  size_t idx = static_cast<size_t>(std::ceil(pct / 100.0 * static_cast<double>(xs.size())));
  if (idx == 0) idx = 1;
  return xs[idx - 1];
}

}  // namespace detail

/// Percentile symmetric surface distance in mm for class c (95th by default).
/// Surfaces are connectivity boundaries (6 by default); the symmetric value is
/// the max of the two directed nearest-rank percentiles. Undefined (nullopt)
/// when either mask has no voxels of the class.
inline std::optional<double> hd95(const LabelMask& pred, const LabelMask& truth, int c,
                                  const std::array<float, 3>& spacing, double percentile = 95.0,
                                  int connectivity = 6) {
  if (pred.shape != truth.shape) throw std::invalid_argument("hd95: shape mismatch");
  if (spacing[0] <= 0 || spacing[1] <= 0 || spacing[2] <= 0) {
    throw std::invalid_argument("hd95: spacing must be positive");
  }
  if (!(percentile > 0.0) || percentile > 100.0) {
    throw std::invalid_argument("hd95: percentile must be in (0, 100]");
  }
  auto surf_p = detail::surface_voxels(pred, c, connectivity);
  auto surf_t = detail::surface_voxels(truth, c, connectivity);
  if (surf_p.empty() || surf_t.empty()) return std::nullopt;

  auto directed = [&](const std::vector<std::array<int, 3>>& from,
                      const std::vector<std::array<int, 3>>& to) {
    std::vector<double> edt = detail::squared_edt(pred.shape, spacing, to);
    std::vector<double> dist;
    dist.reserve(from.size());
    const int H = pred.shape[1], W = pred.shape[2];
    for (const auto& p : from) {
      dist.push_back(std::sqrt(edt[static_cast<size_t>((p[0] * H + p[1]) * W + p[2])]));
    }
    return detail::nearest_rank_percentile(std::move(dist), percentile);
  };
  return std::max(directed(surf_p, surf_t), directed(surf_t, surf_p));
}

namespace detail {

/// Regularized incomplete beta I_x(a,b) via Lentz continued fraction.
inline double betacf(double a, double b, double x) {
  const double tiny = 1e-300;
  const double eps = 3e-14;
  double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 300; ++m) {
    int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < eps) break;
  }
  return h;
}

inline double incbeta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                    b * std::log(1.0 - x);
  double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
  return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

}  // namespace detail

/// Two-sided p-value of Student's t with `dof` degrees of freedom.
inline double student_t_two_sided_p(double t, int dof) {
  if (dof < 1) throw std::invalid_argument("student_t_two_sided_p: dof must be >= 1");
  if (std::isinf(t)) return 0.0;
  double x = dof / (dof + t * t);
  return detail::incbeta(dof / 2.0, 0.5, x);
}

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
};

/// Paired Student's t-test on differences a - b. All-zero differences give
/// (t=0, p=1); zero-variance nonzero-mean gives (t=+-inf, p=0).
inline TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("paired_t_test: length mismatch");
  size_t n = a.size();
  if (n < 2) throw std::invalid_argument("paired_t_test: need at least 2 pairs");
  double mean = 0;
  for (size_t i = 0; i < n; ++i) mean += a[i] - b[i];
  mean /= static_cast<double>(n);
  double ss = 0;
  bool all_zero = true;
  for (size_t i = 0; i < n; ++i) {
    double d = a[i] - b[i];
    if (d != 0.0) all_zero = false;
    ss += (d - mean) * (d - mean);
  }
  if (all_zero) return {0.0, 1.0};
  double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (sd == 0.0) {
    double t = mean > 0 ? std::numeric_limits<double>::infinity()
                        : -std::numeric_limits<double>::infinity();
    return {t, 0.0};
  }
  double t = mean / (sd / std::sqrt(static_cast<double>(n)));
  return {t, student_t_two_sided_p(t, static_cast<int>(n) - 1)};
}

namespace detail {

inline std::vector<double> average_ranks(const std::vector<double>& x) {
  size_t n = x.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t i, size_t j) { return x[i] < x[j]; });
  std::vector<double> ranks(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;  // 1-based
    for (size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

}  // namespace detail

/// Spearman rank correlation with average ranks for ties. Undefined (nullopt)
/// when either input is constant.
inline std::optional<double> spearman_r(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("spearman_r: length mismatch");
  if (x.size() < 3) throw std::invalid_argument("spearman_r: need at least 3 pairs");
  auto rx = detail::average_ranks(x);
  auto ry = detail::average_ranks(y);
  size_t n = x.size();
  double mx = 0, my = 0;
  for (size_t i = 0; i < n; ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (size_t i = 0; i < n; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

/// Full per-case record for one prediction/truth pair.
inline CaseResult evaluate_case(const LabelMask& pred, const LabelMask& truth, int C) {
  CaseResult r;
  DiceScores ds = dice_score(pred, truth, C);
  r.dice = ds.per_class;
  r.mean_dice = ds.mean;
  std::vector<int64_t> nt(static_cast<size_t>(C), 0);
  for (uint8_t lab : truth.labels) {
    if (lab < C) ++nt[lab];
  }
  double hd_sum = 0;
  int hd_n = 0;
  for (int c = 1; c < C; ++c) {
    r.roi_voxels.push_back(nt[static_cast<size_t>(c)]);
    auto h = hd95(pred, truth, c, truth.spacing);
    r.hd95_mm.push_back(h);
    if (h) {
      hd_sum += *h;
      ++hd_n;
    } else {
      ++r.hd95_undefined;
    }
  }
  if (hd_n > 0) r.mean_hd95 = hd_sum / hd_n;
  return r;
}

}  // namespace diffseg
