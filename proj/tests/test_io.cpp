#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "diffseg/checkpoint.hpp"
#include "diffseg/config.hpp"
#include "diffseg/synth.hpp"
#include "diffseg/volio.hpp"

using namespace diffseg;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    dir_ = fs::temp_directory_path() / ("diffseg_test_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(counter_++));
    fs::create_directories(dir_);
  }
  ~TempDir() { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

 private:
  static inline int counter_ = 0;
  fs::path dir_;
};

std::vector<char> slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return std::vector<char>((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST(Volb, VolumeRoundTripIsBitwise) {
  TempDir tmp;
  SynthConfig cfg;
  cfg.shape = {10, 12, 14};
  for (uint64_t seed = 0; seed < 5; ++seed) {
    auto [vol, mask] = generate_sample<float>(cfg, seed);
    vol.spacing = {0.75f, 0.75f, 2.5f};
    std::string p = tmp.path("vol.volb");
    volio::write_volume(p, vol);
    Volume back = volio::read_volume(p);
    ASSERT_EQ(back.intensities.shape, vol.intensities.shape);
    EXPECT_EQ(back.spacing, vol.spacing);
    for (int64_t i = 0; i < vol.intensities.numel(); ++i) {
      ASSERT_EQ(back.intensities[i], vol.intensities[i]);
    }
    // write(read(x)) produces identical bytes
    std::string p2 = tmp.path("vol2.volb");
    volio::write_volume(p2, back);
    EXPECT_EQ(slurp(p), slurp(p2));
  }
}

TEST(Volb, MaskRoundTripIsBitwise) {
  TempDir tmp;
  SynthConfig cfg;
  cfg.shape = {9, 8, 7};
  auto [vol, mask] = generate_sample<float>(cfg, 3);
  std::string p = tmp.path("mask.volb");
  volio::write_mask(p, mask);
  LabelMask back = volio::read_mask(p);
  EXPECT_EQ(back, mask);
  std::string p2 = tmp.path("mask2.volb");
  volio::write_mask(p2, back);
  EXPECT_EQ(slurp(p), slurp(p2));
}

TEST(Volb, HeaderLayoutIsExact) {
  TempDir tmp;
  LabelMask m;
  m.shape = {2, 3, 4};
  m.spacing = {1.f, 2.f, 3.f};
  m.labels.assign(24, 1);
  std::string p = tmp.path("layout.volb");
  volio::write_mask(p, m);
  std::vector<char> bytes = slurp(p);
  // magic(6) + dtype(1) + ndim(1) + 3*u32(12) + 3*f32(12) + payload(24)
  ASSERT_EQ(bytes.size(), 6u + 1 + 1 + 12 + 12 + 24);
  EXPECT_EQ(std::string(bytes.data(), 5), "VOLB1");
  EXPECT_EQ(bytes[5], '\0');
  EXPECT_EQ(bytes[6], 1);  // dtype u8 labels
  EXPECT_EQ(bytes[7], 3);  // ndim
  uint32_t d0;
  std::memcpy(&d0, bytes.data() + 8, 4);
  EXPECT_EQ(d0, 2u);
}

TEST(Volb, RejectsCorruptMagicAndTruncation) {
  TempDir tmp;
  std::string p = tmp.path("bad.volb");
  {
    std::ofstream f(p, std::ios::binary);
    f << "NOTVOLB_GARBAGE";
  }
  EXPECT_THROW(volio::read_mask(p), std::runtime_error);
  LabelMask m;
  m.shape = {2, 2, 2};
  m.labels.assign(8, 0);
  std::string p2 = tmp.path("trunc.volb");
  volio::write_mask(p2, m);
  std::vector<char> bytes = slurp(p2);
  {
    std::ofstream f(p2, std::ios::binary);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 3));
  }
  EXPECT_THROW(volio::read_mask(p2), std::runtime_error);
}

TEST(Volb, ReadAuditHookSeesEveryRead) {
  TempDir tmp;
  SynthConfig cfg;
  cfg.shape = {6, 6, 6};
  auto [vol, mask] = generate_sample<float>(cfg, 9);
  volio::write_volume(tmp.path("a.volb"), vol);
  volio::write_mask(tmp.path("b.volb"), mask);
  std::vector<std::string> seen;
  volio::read_audit_hook() = [&](const std::string& path) { seen.push_back(path); };
  volio::read_volume(tmp.path("a.volb"));
  volio::read_mask(tmp.path("b.volb"));
  volio::read_audit_hook() = nullptr;
  ASSERT_EQ(seen.size(), 2u);
  EXPECT_NE(seen[0].find("a.volb"), std::string::npos);
  EXPECT_NE(seen[1].find("b.volb"), std::string::npos);
}

TEST(Checkpoint, RoundTripIsExact) {
  TempDir tmp;
  Rng rng(5);
  Checkpoint c;
  c.config_hash = 0xDEADBEEFCAFE1234ULL;
  c.schedule_T = 1000;
  c.beta_start = 1e-4;
  c.beta_end = 0.02;
  c.schedule_K = 5;
  c.params.emplace("alpha", random_normal<float>({3, 2}, rng));
  c.params.emplace("beta", random_normal<float>({4}, rng));
  c.optim.step = 17;
  c.optim.m.emplace("alpha", random_normal<float>({3, 2}, rng));
  c.optim.m.emplace("beta", random_normal<float>({4}, rng));
  c.optim.v.emplace("alpha", random_normal<float>({3, 2}, rng));
  c.optim.v.emplace("beta", random_normal<float>({4}, rng));
  c.rng_state = rng.save_state();
  c.step = 123;
  std::string p = tmp.path("model.ckpt");
  save_checkpoint(p, c);
  Checkpoint back = load_checkpoint(p, c.config_hash, false);
  EXPECT_EQ(back.config_hash, c.config_hash);
  EXPECT_EQ(back.schedule_T, 1000);
  EXPECT_EQ(back.beta_start, 1e-4);
  EXPECT_EQ(back.beta_end, 0.02);
  EXPECT_EQ(back.schedule_K, 5);
  EXPECT_EQ(back.step, 123u);
  EXPECT_EQ(back.optim.step, 17);
  EXPECT_EQ(back.rng_state, c.rng_state);
  for (const auto& [name, t] : c.params) {
    const Tensor<float>& bt = back.params.at(name);
    ASSERT_EQ(bt.shape, t.shape);
    for (int64_t i = 0; i < t.numel(); ++i) ASSERT_EQ(bt[i], t[i]);
  }
  // save(load(x)) reproduces identical bytes
  std::string p2 = tmp.path("model2.ckpt");
  save_checkpoint(p2, back);
  EXPECT_EQ(slurp(p), slurp(p2));
}

TEST(Checkpoint, HashMismatchRejectedUnlessForced) {
  TempDir tmp;
  Checkpoint c;
  c.config_hash = 42;
  c.schedule_T = 10;
  c.beta_start = 1e-4;
  c.beta_end = 0.02;
  c.schedule_K = 2;
  c.rng_state = "state";
  std::string p = tmp.path("m.ckpt");
  save_checkpoint(p, c);
  EXPECT_THROW(load_checkpoint(p, 43, false), std::runtime_error);
  EXPECT_NO_THROW(load_checkpoint(p, 43, true));
  EXPECT_NO_THROW(load_checkpoint(p, 42, false));
}

TEST(Config, DefaultsRoundTripThroughSerialization) {
  ExperimentConfig cfg;
  std::string text = serialize_config(cfg);
  ExperimentConfig back = parse_config(text);
  EXPECT_EQ(serialize_config(back), text);
  EXPECT_EQ(config_hash(back), config_hash(cfg));
}

TEST(Config, NonDefaultValuesRoundTrip) {
  ExperimentConfig cfg;
  cfg.model = ModelKind::direct_segmentation;
  cfg.parameterization = Parameterization::predict_eps;
  cfg.recycling = false;
  cfg.recycle_prob = 0.5;
  cfg.train_full_schedule = true;
  cfg.seed = 987654321;
  cfg.train_steps = 321;
  cfg.batch_size = 3;
  cfg.T = 500;
  cfg.beta_start = 2e-4;
  cfg.beta_end = 0.015;
  cfg.K = 7;
  cfg.use_dice = false;
  cfg.noise_l2_weight = 0.25;
  cfg.unet_levels = 3;
  cfg.unet_channels = {4, 8, 16};
  cfg.time_dim = 16;
  cfg.synth.shape = {16, 16, 16};
  cfg.synth.classes = 3;
  cfg.synth.class_means = {0.0, 1.0, 2.0};
  cfg.synth.noise_sigma = 0.05;
  cfg.lr_peak = 1e-3;
  cfg.augment = false;
  ExperimentConfig back = parse_config(serialize_config(cfg));
  EXPECT_EQ(serialize_config(back), serialize_config(cfg));
  EXPECT_EQ(config_hash(back), config_hash(cfg));
  EXPECT_NE(config_hash(back), config_hash(ExperimentConfig{}));
}

TEST(Config, UnknownKeyIsError) {
  try {
    parse_config("experiment.sneeed = 5\n");
    FAIL() << "expected unknown-key error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("unknown key"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("experiment.sneeed"), std::string::npos);
  }
}

TEST(Config, MalformedLinesAndValuesAreErrors) {
  EXPECT_THROW(parse_config("experiment.seed 5\n"), std::invalid_argument);
  EXPECT_THROW(parse_config("experiment.train_steps = many\n"), std::invalid_argument);
  EXPECT_THROW(parse_config("experiment.recycling = maybe\n"), std::invalid_argument);
  EXPECT_THROW(parse_config("schedule.K = 5000\n"), std::invalid_argument);  // K > T
}

TEST(Config, CommentsAndBlankLinesIgnored) {
  ExperimentConfig cfg = parse_config("# a comment\n\nexperiment.seed = 9\n");
  EXPECT_EQ(cfg.seed, 9u);
}
