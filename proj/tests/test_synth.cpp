#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "diffseg/synth.hpp"

using namespace diffseg;

namespace {

SynthConfig small_cfg() {
  SynthConfig cfg;
  cfg.shape = {16, 16, 16};
  cfg.classes = 4;
  cfg.class_means = {0.0, 0.8, 1.6, 2.4};
  return cfg;
}

}  // namespace

TEST(Generate, NoiselessImageIsPiecewiseConstant) {
  SynthConfig cfg = small_cfg();
  cfg.noise_sigma = 0.0;
  cfg.bias_amplitude = 0.0;
  auto [vol, mask] = generate_sample<double>(cfg, 7);
  // within-class variance must be zero: every voxel of a class carries the
  // exact same value (identical inputs through identical operations)
  std::vector<double> lo(4, 1e300), hi(4, -1e300);
  std::vector<int64_t> n(4, 0);
  for (int64_t i = 0; i < mask.numel(); ++i) {
    int c = mask.labels[static_cast<size_t>(i)];
    lo[static_cast<size_t>(c)] = std::min(lo[static_cast<size_t>(c)], vol.intensities[i]);
    hi[static_cast<size_t>(c)] = std::max(hi[static_cast<size_t>(c)], vol.intensities[i]);
    ++n[static_cast<size_t>(c)];
  }
  for (int c = 0; c < 4; ++c) {
    ASSERT_GT(n[static_cast<size_t>(c)], 0);
    EXPECT_EQ(lo[static_cast<size_t>(c)], hi[static_cast<size_t>(c)]) << "class " << c;
  }
  // normalized to zero mean, unit variance
  double total = 0, totalsq = 0;
  for (int64_t i = 0; i < vol.intensities.numel(); ++i) {
    total += vol.intensities[i];
    totalsq += vol.intensities[i] * vol.intensities[i];
  }
  double m = total / static_cast<double>(vol.intensities.numel());
  EXPECT_NEAR(m, 0.0, 1e-12);
  EXPECT_NEAR(totalsq / static_cast<double>(vol.intensities.numel()) - m * m, 1.0, 1e-9);
}

TEST(Generate, DeterministicPerSeed) {
  SynthConfig cfg = small_cfg();
  auto [v1, m1] = generate_sample<float>(cfg, 1234);
  auto [v2, m2] = generate_sample<float>(cfg, 1234);
  EXPECT_EQ(m1, m2);
  ASSERT_EQ(v1.intensities.numel(), v2.intensities.numel());
  for (int64_t i = 0; i < v1.intensities.numel(); ++i) {
    ASSERT_EQ(v1.intensities[i], v2.intensities[i]);  // bitwise
  }
  auto [v3, m3] = generate_sample<float>(cfg, 1235);
  EXPECT_NE(m1, m3);
}

TEST(Generate, EveryForegroundClassPresentAndDisjointOver100Seeds) {
  SynthConfig cfg = small_cfg();
  for (uint64_t seed = 0; seed < 100; ++seed) {
    auto [vol, mask] = generate_sample<float>(cfg, seed);
    std::vector<int64_t> count(4, 0);
    for (uint8_t l : mask.labels) {
      ASSERT_LT(l, 4) << "seed " << seed;
      ++count[l];
    }
    for (int c = 1; c < 4; ++c) EXPECT_GE(count[static_cast<size_t>(c)], 1) << "seed " << seed;
    // disjointness is structural (one label per voxel); also expect background
    EXPECT_GT(count[0], 0) << "seed " << seed;
  }
}

TEST(Generate, ImpossiblePlacementSuggestsSmallerRanges) {
  SynthConfig cfg = small_cfg();
  cfg.shape = {6, 6, 6};
  cfg.classes = 6;
  cfg.min_radius_frac = 0.4;
  cfg.max_radius_frac = 0.45;
  cfg.class_means = {0, 1, 2, 3, 4, 5};
  try {
    generate_sample<float>(cfg, 3);
    FAIL() << "expected placement failure";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("smaller"), std::string::npos);
  }
}

TEST(Augment, IdentityDrawLeavesPairUnchanged) {
  SynthConfig cfg = small_cfg();
  auto [vol, mask] = generate_sample<float>(cfg, 5);
  AugmentDraw identity;  // defaults: no rotation, no flips, zero shift
  auto [v2, m2] = apply_augment(vol, mask, identity);
  EXPECT_EQ(m2, mask);
  for (int64_t i = 0; i < vol.intensities.numel(); ++i) {
    EXPECT_EQ(v2.intensities[i], vol.intensities[i]);
  }
}

TEST(Augment, LabelsStayInRange) {
  SynthConfig cfg = small_cfg();
  auto [vol, mask] = generate_sample<float>(cfg, 6);
  Rng rng(9);
  for (int rep = 0; rep < 20; ++rep) {
    auto [v2, m2] = augment(vol, mask, rng);
    for (uint8_t l : m2.labels) EXPECT_LT(l, 4);
  }
}

TEST(Augment, RotationsAndFlipsPreserveClassCounts) {
  SynthConfig cfg = small_cfg();
  auto [vol, mask] = generate_sample<float>(cfg, 8);
  std::vector<int64_t> before(4, 0);
  for (uint8_t l : mask.labels) ++before[l];
  Rng rng(10);
  for (int rep = 0; rep < 20; ++rep) {
    AugmentDraw a = sample_augment(mask.shape, rng);
    a.shift = {0, 0, 0};  // zero translation: counts must be exactly preserved
    auto [v2, m2] = apply_augment(vol, mask, a);
    std::vector<int64_t> after(4, 0);
    for (uint8_t l : m2.labels) ++after[l];
    EXPECT_EQ(after, before) << "rep " << rep;
  }
}

TEST(Augment, ShiftsNeverGainForegroundVoxels) {
  SynthConfig cfg = small_cfg();
  auto [vol, mask] = generate_sample<float>(cfg, 11);
  std::vector<int64_t> before(4, 0);
  for (uint8_t l : mask.labels) ++before[l];
  Rng rng(12);
  for (int rep = 0; rep < 20; ++rep) {
    auto [v2, m2] = augment(vol, mask, rng);
    std::vector<int64_t> after(4, 0);
    for (uint8_t l : m2.labels) ++after[l];
    for (int c = 1; c < 4; ++c) {
      EXPECT_LE(after[static_cast<size_t>(c)], before[static_cast<size_t>(c)]) << "rep " << rep;
    }
  }
}

TEST(Augment, ShiftBoundedByTwentyPercent) {
  Rng rng(13);
  std::array<int, 3> shape{20, 20, 20};
  for (int rep = 0; rep < 200; ++rep) {
    AugmentDraw a = sample_augment(shape, rng);
    for (int ax = 0; ax < 3; ++ax) {
      EXPECT_LE(std::abs(a.shift[static_cast<size_t>(ax)]), 4);
    }
  }
}

// Applying the recorded transform to the mask alone reproduces the augmented
// mask (image/mask geometric consistency).
TEST(Augment, RecordedTransformIsConsistentAcrossInputs) {
  SynthConfig cfg = small_cfg();
  auto [vol, mask] = generate_sample<float>(cfg, 14);
  Rng rng(15);
  for (int rep = 0; rep < 10; ++rep) {
    AugmentDraw a = sample_augment(mask.shape, rng);
    auto [v2, m2] = apply_augment(vol, mask, a);
    auto [v3, m3] = apply_augment(vol, mask, a);  // mask-only path, same draw
    EXPECT_EQ(m2, m3);
    // and the image transform sends mask labels along: voxels where the
    // augmented image came from source voxel s must carry s's label.
    auto [vimg, mimg] = apply_augment(vol, mask, a);
    EXPECT_EQ(mimg, m2);
  }
}

TEST(Augment, RotationRequiresEqualDims) {
  VolumeT<float> vol;
  vol.intensities = Tensor<float>({1, 4, 6, 6}, 0.f);
  LabelMask mask;
  mask.shape = {4, 6, 6};
  mask.labels.assign(static_cast<size_t>(mask.numel()), 0);
  AugmentDraw a;
  a.rot_pair = 0;  // (d,h) with 4 != 6
  a.rot_quarter = 1;
  EXPECT_THROW(apply_augment(vol, mask, a), std::invalid_argument);
  a.rot_pair = 2;  // (h,w) with 6 == 6
  EXPECT_NO_THROW(apply_augment(vol, mask, a));
  // sampled draws on a non-cubic shape only ever pick valid pairs
  Rng rng(16);
  for (int rep = 0; rep < 100; ++rep) {
    AugmentDraw s = sample_augment(mask.shape, rng);
    EXPECT_NE(s.rot_pair, 0);
    EXPECT_NE(s.rot_pair, 1);
  }
}
