#include <gtest/gtest.h>

#include <cmath>

#include "diffseg/diffusion.hpp"
#include "diffseg/schedule.hpp"

using namespace diffseg;

namespace {

SubSchedule default_sub(int K = 5) {
  NoiseSchedule s = make_linear_schedule(1000, 1e-4, 0.02);
  return resample_subsequence(s, K);
}

LabelMask tiny_mask(std::array<int, 3> shape, int C, uint64_t seed) {
  Rng rng(seed);
  LabelMask m;
  m.shape = shape;
  m.labels.resize(static_cast<size_t>(m.numel()));
  for (auto& l : m.labels) l = static_cast<uint8_t>(rng.uniform_int(0, C - 1));
  return m;
}

}  // namespace

TEST(MaskSignal, SingleVoxelEncoding) {
  LabelMask m;
  m.shape = {1, 1, 1};
  m.labels = {0};
  Tensor<double> x = mask_to_signal<double>(m, 2);
  EXPECT_EQ(x[0], 1.0);
  EXPECT_EQ(x[1], -1.0);
}

TEST(MaskSignal, RoundTrip) {
  for (int C : {2, 4}) {
    LabelMask m = tiny_mask({4, 3, 2}, C, 99);
    Tensor<double> x = mask_to_signal<double>(m, C);
    LabelMask back = signal_to_mask(x, m.spacing);
    EXPECT_EQ(back, m) << "C=" << C;
  }
}

TEST(MaskSignal, ChannelSumIsTwoMinusC) {
  for (int C : {2, 3, 5}) {
    LabelMask m = tiny_mask({3, 3, 3}, C, 7);
    Tensor<double> x = mask_to_signal<double>(m, C);
    int64_t n = m.numel();
    for (int64_t i = 0; i < n; ++i) {
      double sum = 0;
      for (int c = 0; c < C; ++c) sum += x[c * n + i];
      EXPECT_EQ(sum, 2.0 - C);
    }
  }
}

TEST(MaskSignal, LabelOutOfRangeError) {
  LabelMask m;
  m.shape = {1, 1, 1};
  m.labels = {3};
  EXPECT_THROW(mask_to_signal<double>(m, 2), std::invalid_argument);
}

TEST(LogitsToSignal, UniformLogitsGiveZero) {
  Tensor<double> logits({2, 1, 1, 1}, 0.7);
  Tensor<double> x = logits_to_signal(logits);
  EXPECT_NEAR(x[0], 0.0, 1e-15);
  EXPECT_NEAR(x[1], 0.0, 1e-15);
}

TEST(LogitsToSignal, SaturatedLogitsReachExactlyPlusMinusOne) {
  Tensor<double> logits({2, 1, 1, 1}, {1e4, -1e4});
  Tensor<double> x = logits_to_signal(logits);
  EXPECT_EQ(x[0], 1.0);
  EXPECT_EQ(x[1], -1.0);
}

TEST(LogitsToSignal, ArgmaxIsPreserved) {
  Rng rng(12);
  Tensor<double> logits = random_uniform<double>({4, 3, 3, 3}, rng, -5, 5);
  Tensor<double> x = logits_to_signal(logits);
  LabelMask from_logits = signal_to_mask(logits);
  LabelMask from_signal = signal_to_mask(x);
  EXPECT_EQ(from_logits, from_signal);
}

TEST(QSample, ZeroNoiseScalesSignal) {
  SubSchedule sub = default_sub();
  Rng rng(4);
  Tensor<double> x0 = random_uniform<double>({2, 2, 2, 2}, rng, -1, 1);
  Tensor<double> eps({2, 2, 2, 2}, 0.0);
  for (int k = 1; k <= sub.K; ++k) {
    Tensor<double> xt = q_sample(x0, k, eps, sub);
    double a = std::sqrt(sub.alpha_bar[static_cast<size_t>(k - 1)]);
    for (int64_t i = 0; i < x0.numel(); ++i) EXPECT_NEAR(xt[i], a * x0[i], 1e-15);
  }
}

TEST(QSample, FinalStepIsAlmostPureNoise) {
  SubSchedule sub = default_sub();
  Rng rng(5);
  Tensor<double> x0 = random_uniform<double>({2, 4, 4, 4}, rng, -1, 1);
  Tensor<double> eps = random_normal<double>({2, 4, 4, 4}, rng);
  Tensor<double> xt = q_sample(x0, sub.K, eps, sub);
  double abar = sub.alpha_bar[static_cast<size_t>(sub.K - 1)];
  double a = std::sqrt(abar);
  double noise_defect = 1.0 - std::sqrt(1.0 - abar);  // ~2e-5 for the default schedule
  for (int64_t i = 0; i < x0.numel(); ++i) {
    EXPECT_LE(std::abs(xt[i] - eps[i]),
              a * std::abs(x0[i]) + noise_defect * std::abs(eps[i]) + 1e-12);
  }
}

TEST(QSample, InverseRecoversSignal) {
  SubSchedule sub = default_sub();
  Rng rng(6);
  Tensor<double> x0 = random_uniform<double>({3, 2, 2, 2}, rng, -1, 1);
  for (int k = 1; k <= sub.K; ++k) {
    Tensor<double> eps = random_normal<double>({3, 2, 2, 2}, rng);
    Tensor<double> xt = q_sample(x0, k, eps, sub);
    Tensor<double> rec = signal_from_noise_pred(xt, k, eps, sub);
    for (int64_t i = 0; i < x0.numel(); ++i) EXPECT_NEAR(rec[i], x0[i], 1e-12);
  }
}

TEST(QSample, ShapeMismatchError) {
  SubSchedule sub = default_sub();
  Tensor<double> x0({2, 2, 2, 2}, 0.0);
  Tensor<double> eps({2, 2, 2, 4}, 0.0);
  EXPECT_THROW(q_sample(x0, 1, eps, sub), std::invalid_argument);
}

TEST(SignalFromNoisePred, ZeroPredictionDividesBySqrtAlphaBar) {
  SubSchedule sub = default_sub();
  Tensor<double> xt({1, 1, 1, 1}, {0.5});
  Tensor<double> zero({1, 1, 1, 1}, 0.0);
  for (int k = 1; k <= sub.K; ++k) {
    double a = std::sqrt(sub.alpha_bar[static_cast<size_t>(k - 1)]);
    double expect = std::min(1.0, 0.5 / a);  // clipped
    EXPECT_NEAR(signal_from_noise_pred(xt, k, zero, sub)[0], expect, 1e-15) << k;
  }
}

TEST(SignalFromNoisePred, MatchesScalarOracle) {
  SubSchedule sub = default_sub();
  Rng rng(77);
  for (int k = 1; k <= sub.K; ++k) {
    Tensor<double> xt = random_uniform<double>({2, 2, 1, 1}, rng, -2, 2);
    Tensor<double> ep = random_normal<double>({2, 2, 1, 1}, rng);
    Tensor<double> got = signal_from_noise_pred(xt, k, ep, sub);
    double abar = sub.alpha_bar[static_cast<size_t>(k - 1)];
    for (int64_t i = 0; i < xt.numel(); ++i) {
      double oracle = (xt[i] - std::sqrt(1.0 - abar) * ep[i]) / std::sqrt(abar);
      oracle = std::min(1.0, std::max(-1.0, oracle));
      EXPECT_NEAR(got[i], oracle, 1e-12);
    }
  }
}

// Substituting the Eq. 10 inversion into the predict-x0 posterior mean must
// reproduce the predict-eps posterior mean.
TEST(PosteriorMean, TwoParameterizationsAgree) {
  SubSchedule sub = default_sub();
  Rng rng(8);
  for (int rep = 0; rep < 20; ++rep) {
    int k = static_cast<int>(rng.uniform_int(1, sub.K));
    Tensor<double> xt = random_uniform<double>({2, 2, 2, 2}, rng, -1.5, 1.5);
    Tensor<double> eps = random_normal<double>({2, 2, 2, 2}, rng);
    double abar = sub.alpha_bar[static_cast<size_t>(k - 1)];
    Tensor<double> x0_sub(xt.shape);
    for (int64_t i = 0; i < xt.numel(); ++i) {
      x0_sub[i] = (xt[i] - std::sqrt(1.0 - abar) * eps[i]) / std::sqrt(abar);  // no clipping
    }
    Tensor<double> mu1 = posterior_mean(xt, k, x0_sub, Parameterization::predict_x0, sub);
    Tensor<double> mu2 = posterior_mean(xt, k, eps, Parameterization::predict_eps, sub);
    for (int64_t i = 0; i < xt.numel(); ++i) EXPECT_NEAR(mu1[i], mu2[i], 1e-10);
  }
}

TEST(PosteriorMean, FirstStepScalarOracle) {
  SubSchedule sub = default_sub();
  // k=1: abar_0 = 1, so Eq. 1 reduces to mu = beta_1/(1-abar_1) * x0 (+ 0 * x_t);
  // beta_1 = 1 - abar_1 makes the coefficient exactly 1.
  Tensor<double> xt({1, 1, 1, 1}, {0.3});
  Tensor<double> x0({1, 1, 1, 1}, {-0.6});
  Tensor<double> mu = posterior_mean(xt, 1, x0, Parameterization::predict_x0, sub);
  double abar1 = sub.alpha_bar[0];
  double beta1 = sub.beta[0];
  double oracle = std::sqrt(1.0) * beta1 / (1.0 - abar1) * (-0.6) +
                  (1.0 - 1.0) / (1.0 - abar1) * std::sqrt(sub.alpha[0]) * 0.3;
  EXPECT_NEAR(mu[0], oracle, 1e-14);
  EXPECT_NEAR(mu[0], -0.6, 1e-9);  // coefficient collapses to x0
}

TEST(PosteriorMean, ZeroNoisePredictionScalesXt) {
  SubSchedule sub = default_sub();
  Tensor<double> xt({1, 1, 1, 1}, {0.4});
  Tensor<double> zero({1, 1, 1, 1}, 0.0);
  for (int k = 1; k <= sub.K; ++k) {
    Tensor<double> mu = posterior_mean(xt, k, zero, Parameterization::predict_eps, sub);
    EXPECT_NEAR(mu[0], 0.4 / std::sqrt(sub.alpha[static_cast<size_t>(k - 1)]), 1e-14);
  }
}

TEST(PosteriorMean, StepZeroIsError) {
  SubSchedule sub = default_sub();
  Tensor<double> xt({1, 1, 1, 1}, 0.0);
  EXPECT_THROW(posterior_mean(xt, 0, xt, Parameterization::predict_x0, sub),
               std::invalid_argument);
}

TEST(ReverseStep, FinalStepIsDeterministic) {
  SubSchedule sub = default_sub();
  Rng rng1(100), rng2(2222);
  Tensor<double> xt({2, 2, 2, 2}, 0.3);
  Tensor<double> pred({2, 2, 2, 2}, -0.2);
  Tensor<double> a = reverse_step(xt, 1, pred, Parameterization::predict_x0, sub, rng1);
  Tensor<double> b = reverse_step(xt, 1, pred, Parameterization::predict_x0, sub, rng2);
  for (int64_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);  // bitwise
}

TEST(ReverseStep, MonteCarloVarianceMatchesBetaTilde) {
  SubSchedule sub = default_sub();
  // k=2 of the default subsequence: beta_tilde ~ 1e-4, so the [-1,1] clip
  // around mu=0 truncates a negligible fraction of the Gaussian mass.
  const int k = 2;
  double bt = sub.beta_tilde[k - 1];
  ASSERT_GT(bt, 0.0);
  ASSERT_LT(bt, 0.01);
  Rng rng(55);
  Tensor<double> xt({1, 1, 1, 1}, 0.0);
  Tensor<double> pred({1, 1, 1, 1}, 0.0);
  const int n = 100000;
  double sum = 0, sumsq = 0;
  for (int i = 0; i < n; ++i) {
    double v = reverse_step(xt, k, pred, Parameterization::predict_x0, sub, rng)[0];
    sum += v;
    sumsq += v * v;
  }
  double mean = sum / n;
  double var = sumsq / n - mean * mean;
  EXPECT_NEAR(var, bt, 0.03 * bt);
}

TEST(ReverseStep, OutputAlwaysInsideSignalRange) {
  SubSchedule sub = default_sub();
  Rng rng(66);
  Tensor<double> xt = random_uniform<double>({2, 3, 3, 3}, rng, -1, 1);
  for (int k = sub.K; k >= 1; --k) {
    Tensor<double> pred = random_uniform<double>({2, 3, 3, 3}, rng, -1, 1);
    xt = reverse_step(xt, k, pred, Parameterization::predict_x0, sub, rng);
    for (int64_t i = 0; i < xt.numel(); ++i) {
      EXPECT_GE(xt[i], -1.0);
      EXPECT_LE(xt[i], 1.0);
    }
  }
}

TEST(SampleMask, InvokesDenoiserExactlyKTimes) {
  SubSchedule sub = default_sub(5);
  VolumeT<double> img;
  img.intensities = Tensor<double>({1, 4, 4, 4}, 0.0);
  int calls = 0;
  SamplingDenoiser<double> den = [&](const VolumeT<double>&, const Tensor<double>& x,
                                     int) -> Tensor<double> {
    ++calls;
    return Tensor<double>(x.shape, 0.0);
  };
  Rng rng(9);
  sample_mask<double>(den, img, 3, Parameterization::predict_x0, sub, rng);
  EXPECT_EQ(calls, 5);
}

// With an oracle denoiser that always outputs the true mask signal (as
// saturated logits), sampling returns the true mask for any seed.
TEST(SampleMask, OracleDenoiserRecoversTrueMask) {
  SubSchedule sub = default_sub();
  LabelMask truth = tiny_mask({4, 4, 4}, 3, 321);
  Tensor<double> x0 = mask_to_signal<double>(truth, 3);
  VolumeT<double> img;
  img.intensities = Tensor<double>({1, 4, 4, 4}, 0.0);
  SamplingDenoiser<double> oracle = [&](const VolumeT<double>&, const Tensor<double>&,
                                        int) -> Tensor<double> {
    Tensor<double> logits = x0;
    for (auto& v : logits.data) v *= 1e4;  // saturate so logits_to_signal returns +-1 exactly
    return logits;
  };
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    auto res = sample_mask<double>(oracle, img, 3, Parameterization::predict_x0, sub, rng);
    EXPECT_EQ(res.mask, truth) << "seed " << seed;
  }
}

TEST(SampleMask, DeterministicGivenSeed) {
  SubSchedule sub = default_sub();
  VolumeT<double> img;
  img.intensities = Tensor<double>({1, 4, 4, 4}, 0.25);
  SamplingDenoiser<double> den = [&](const VolumeT<double>& im, const Tensor<double>& x,
                                     int k) -> Tensor<double> {
    Tensor<double> out(x.shape);
    for (int64_t i = 0; i < x.numel(); ++i) {
      out[i] = 0.3 * x[i] + 0.1 * k + im.intensities[i % im.intensities.numel()];
    }
    return out;
  };
  Rng r1(1234), r2(1234);
  auto a = sample_mask<double>(den, img, 2, Parameterization::predict_x0, sub, r1);
  auto b = sample_mask<double>(den, img, 2, Parameterization::predict_x0, sub, r2);
  EXPECT_EQ(a.mask, b.mask);
  for (int64_t i = 0; i < a.signal.numel(); ++i) EXPECT_EQ(a.signal[i], b.signal[i]);  // bitwise
}
