#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffseg/losses.hpp"
#include "diffseg/optim.hpp"
#include "diffseg/recycling.hpp"
#include "diffseg/schedule.hpp"
#include "diffseg/synth.hpp"
#include "diffseg/unet.hpp"

namespace diffseg {

/// Full description of one training/evaluation run. Round-trips through the
/// flat `key = value` config format; the FNV-1a hash of the canonical
/// serialization is embedded in every output file.
struct ExperimentConfig {
  // experiment
  ModelKind model = ModelKind::diffusion;
  Parameterization parameterization = Parameterization::predict_x0;
  bool recycling = true;
  double recycle_prob = 1.0;
  bool recycle_exclude_last = false;
  bool train_full_schedule = false;  // sample training steps from the full T schedule
  uint64_t seed = 42;
  uint64_t eval_seed = 777;
  int train_steps = 2000;
  int batch_size = 2;
  // schedule
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int K = 5;
  // loss
  bool use_ce = true;
  bool use_dice = true;
  double noise_l2_weight = 0.1;
  // unet
  int unet_levels = 2;
  std::vector<int> unet_channels{8, 16};
  int time_dim = 32;
  // synth
  SynthConfig synth;
  // optim
  double lr_peak = 3e-4;
  double weight_decay = 1e-4;
  double warmup_frac = 0.05;
  // train
  bool augment = true;
  int checkpoint_every = 500;
  int threads = 0;

  void validate() const {
    if (train_steps < 1) throw std::invalid_argument("config: experiment.train_steps must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("config: experiment.batch_size must be >= 1");
    if (K < 2 || K > T) throw std::invalid_argument("config: need 2 <= schedule.K <= schedule.T");
    if (recycle_prob < 0 || recycle_prob > 1) {
      throw std::invalid_argument("config: experiment.recycle_prob must be in [0,1]");
    }
    if (static_cast<int>(unet_channels.size()) != unet_levels) {
      throw std::invalid_argument("config: unet.channels must list one value per level");
    }
    if (checkpoint_every < 1) throw std::invalid_argument("config: train.checkpoint_every must be >= 1");
    if (warmup_frac < 0 || warmup_frac >= 1) {
      throw std::invalid_argument("config: optim.warmup_frac must be in [0,1)");
    }
    synth.validate();
    to_unet_config().validate();
    to_loss_config().validate();
  }

  UNetConfig to_unet_config() const {
    UNetConfig u;
    u.levels = unet_levels;
    u.channels = unet_channels;
    u.in_channels = 1 + synth.classes;
    u.out_channels = synth.classes;
    u.time_dim = time_dim;
    return u;
  }

  LossConfig to_loss_config() const {
    LossConfig l;
    l.use_ce = use_ce;
    l.use_dice = use_dice;
    l.noise_l2_weight = noise_l2_weight;
    l.parameterization = parameterization;
    return l;
  }

  OptimConfig to_optim_config() const {
    OptimConfig o;
    o.lr_peak = lr_peak;
    o.weight_decay = weight_decay;
    o.warmup_steps = static_cast<int>(warmup_frac * train_steps);
    o.total_steps = train_steps;
    return o;
  }

  TrainSettings to_train_settings() const {
    TrainSettings s;
    s.strategy = recycling ? TrainStrategy::recycle : TrainStrategy::standard;
    s.parameterization = parameterization;
    s.model = model;
    s.loss = to_loss_config();
    s.recycle_prob = recycle_prob;
    s.recycle_exclude_last = recycle_exclude_last;
    s.threads = threads;
    return s;
  }
};

namespace detail_cfg {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw std::invalid_argument("config: bad boolean for " + key + ": '" + v + "'");
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return d;
  } catch (...) {
    throw std::invalid_argument("config: bad number for " + key + ": '" + v + "'");
  }
}

inline int64_t parse_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    int64_t i = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return i;
  } catch (...) {
    throw std::invalid_argument("config: bad integer for " + key + ": '" + v + "'");
  }
}

inline uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    uint64_t i = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return i;
  } catch (...) {
    throw std::invalid_argument("config: bad integer for " + key + ": '" + v + "'");
  }
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

}  // namespace detail_cfg

inline void apply_config_key(ExperimentConfig& c, const std::string& key, const std::string& value) {
  using namespace detail_cfg;
  if (key == "experiment.model") {
    if (value == "diffusion") c.model = ModelKind::diffusion;
    else if (value == "nondiffusion") c.model = ModelKind::direct_segmentation;
    else throw std::invalid_argument("config: experiment.model must be diffusion|nondiffusion");
  } else if (key == "experiment.parameterization") {
    if (value == "predict_x0") c.parameterization = Parameterization::predict_x0;
    else if (value == "predict_eps") c.parameterization = Parameterization::predict_eps;
    else throw std::invalid_argument("config: experiment.parameterization must be predict_x0|predict_eps");
  } else if (key == "experiment.recycling") {
    c.recycling = parse_bool(key, value);
  } else if (key == "experiment.recycle_prob") {
    c.recycle_prob = parse_double(key, value);
  } else if (key == "experiment.recycle_exclude_last") {
    c.recycle_exclude_last = parse_bool(key, value);
  } else if (key == "experiment.train_step_mode") {
    if (value == "subsequence") c.train_full_schedule = false;
    else if (value == "full") c.train_full_schedule = true;
    else throw std::invalid_argument("config: experiment.train_step_mode must be subsequence|full");
  } else if (key == "experiment.seed") {
    c.seed = parse_u64(key, value);
  } else if (key == "experiment.eval_seed") {
    c.eval_seed = parse_u64(key, value);
  } else if (key == "experiment.train_steps") {
    c.train_steps = static_cast<int>(parse_int(key, value));
  } else if (key == "experiment.batch_size") {
    c.batch_size = static_cast<int>(parse_int(key, value));
  } else if (key == "schedule.T") {
    c.T = static_cast<int>(parse_int(key, value));
  } else if (key == "schedule.beta_start") {
    c.beta_start = parse_double(key, value);
  } else if (key == "schedule.beta_end") {
    c.beta_end = parse_double(key, value);
  } else if (key == "schedule.K") {
    c.K = static_cast<int>(parse_int(key, value));
  } else if (key == "loss.use_ce") {
    c.use_ce = parse_bool(key, value);
  } else if (key == "loss.use_dice") {
    c.use_dice = parse_bool(key, value);
  } else if (key == "loss.noise_l2_weight") {
    c.noise_l2_weight = parse_double(key, value);
  } else if (key == "unet.levels") {
    c.unet_levels = static_cast<int>(parse_int(key, value));
  } else if (key == "unet.channels") {
    c.unet_channels.clear();
    for (const auto& s : split_list(value)) c.unet_channels.push_back(static_cast<int>(parse_int(key, s)));
  } else if (key == "unet.time_dim") {
    c.time_dim = static_cast<int>(parse_int(key, value));
  } else if (key == "synth.shape") {
    auto parts = split_list(value);
    if (parts.size() != 3) throw std::invalid_argument("config: synth.shape needs three dims");
    for (int i = 0; i < 3; ++i) c.synth.shape[static_cast<size_t>(i)] = static_cast<int>(parse_int(key, parts[static_cast<size_t>(i)]));
  } else if (key == "synth.classes") {
    c.synth.classes = static_cast<int>(parse_int(key, value));
  } else if (key == "synth.class_means") {
    c.synth.class_means.clear();
    for (const auto& s : split_list(value)) c.synth.class_means.push_back(parse_double(key, s));
  } else if (key == "synth.noise_sigma") {
    c.synth.noise_sigma = parse_double(key, value);
  } else if (key == "synth.bias_amplitude") {
    c.synth.bias_amplitude = parse_double(key, value);
  } else if (key == "synth.min_radius_frac") {
    c.synth.min_radius_frac = parse_double(key, value);
  } else if (key == "synth.max_radius_frac") {
    c.synth.max_radius_frac = parse_double(key, value);
  } else if (key == "synth.num_train") {
    c.synth.num_train = static_cast<int>(parse_int(key, value));
  } else if (key == "synth.num_val") {
    c.synth.num_val = static_cast<int>(parse_int(key, value));
  } else if (key == "synth.num_test") {
    c.synth.num_test = static_cast<int>(parse_int(key, value));
  } else if (key == "synth.master_seed") {
    c.synth.master_seed = parse_u64(key, value);
  } else if (key == "optim.lr_peak") {
    c.lr_peak = parse_double(key, value);
  } else if (key == "optim.weight_decay") {
    c.weight_decay = parse_double(key, value);
  } else if (key == "optim.warmup_frac") {
    c.warmup_frac = parse_double(key, value);
  } else if (key == "train.augment") {
    c.augment = parse_bool(key, value);
  } else if (key == "train.checkpoint_every") {
    c.checkpoint_every = static_cast<int>(parse_int(key, value));
  } else if (key == "train.threads") {
    c.threads = static_cast<int>(parse_int(key, value));
  } else {
    throw std::invalid_argument("config: unknown key '" + key + "'");
  }
}

/// Parse the flat `key = value` format. Blank lines and lines starting with
/// '#' are ignored; unknown keys are errors.
inline ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig c;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = detail_cfg::trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config: line " + std::to_string(lineno) + " has no '='");
    }
    std::string key = detail_cfg::trim(t.substr(0, eq));
    std::string value = detail_cfg::trim(t.substr(eq + 1));
    apply_config_key(c, key, value);
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

/// Canonical serialization: fixed key order, 17-significant-digit floats.
/// parse_config(serialize_config(c)) reproduces c exactly.
inline std::string serialize_config(const ExperimentConfig& c) {
  using detail_cfg::fmt_double;
  std::ostringstream os;
  auto b = [](bool v) { return v ? "on" : "off"; };
  os << "experiment.model = " << (c.model == ModelKind::diffusion ? "diffusion" : "nondiffusion") << "\n";
  os << "experiment.parameterization = " << to_string(c.parameterization) << "\n";
  os << "experiment.recycling = " << b(c.recycling) << "\n";
  os << "experiment.recycle_prob = " << fmt_double(c.recycle_prob) << "\n";
  os << "experiment.recycle_exclude_last = " << b(c.recycle_exclude_last) << "\n";
  os << "experiment.train_step_mode = " << (c.train_full_schedule ? "full" : "subsequence") << "\n";
  os << "experiment.seed = " << c.seed << "\n";
  os << "experiment.eval_seed = " << c.eval_seed << "\n";
  os << "experiment.train_steps = " << c.train_steps << "\n";
  os << "experiment.batch_size = " << c.batch_size << "\n";
  os << "schedule.T = " << c.T << "\n";
  os << "schedule.beta_start = " << fmt_double(c.beta_start) << "\n";
  os << "schedule.beta_end = " << fmt_double(c.beta_end) << "\n";
  os << "schedule.K = " << c.K << "\n";
  os << "loss.use_ce = " << b(c.use_ce) << "\n";
  os << "loss.use_dice = " << b(c.use_dice) << "\n";
  os << "loss.noise_l2_weight = " << fmt_double(c.noise_l2_weight) << "\n";
  os << "unet.levels = " << c.unet_levels << "\n";
  os << "unet.channels = ";
  for (size_t i = 0; i < c.unet_channels.size(); ++i) os << (i ? "," : "") << c.unet_channels[i];
  os << "\n";
  os << "unet.time_dim = " << c.time_dim << "\n";
  os << "synth.shape = " << c.synth.shape[0] << "," << c.synth.shape[1] << "," << c.synth.shape[2] << "\n";
  os << "synth.classes = " << c.synth.classes << "\n";
  os << "synth.class_means = ";
  for (size_t i = 0; i < c.synth.class_means.size(); ++i) {
    os << (i ? "," : "") << fmt_double(c.synth.class_means[i]);
  }
  os << "\n";
  os << "synth.noise_sigma = " << fmt_double(c.synth.noise_sigma) << "\n";
  os << "synth.bias_amplitude = " << fmt_double(c.synth.bias_amplitude) << "\n";
  os << "synth.min_radius_frac = " << fmt_double(c.synth.min_radius_frac) << "\n";
  os << "synth.max_radius_frac = " << fmt_double(c.synth.max_radius_frac) << "\n";
  os << "synth.num_train = " << c.synth.num_train << "\n";
  os << "synth.num_val = " << c.synth.num_val << "\n";
  os << "synth.num_test = " << c.synth.num_test << "\n";
  os << "synth.master_seed = " << c.synth.master_seed << "\n";
  os << "optim.lr_peak = " << fmt_double(c.lr_peak) << "\n";
  os << "optim.weight_decay = " << fmt_double(c.weight_decay) << "\n";
  os << "optim.warmup_frac = " << fmt_double(c.warmup_frac) << "\n";
  os << "train.augment = " << b(c.augment) << "\n";
  os << "train.checkpoint_every = " << c.checkpoint_every << "\n";
  os << "train.threads = " << c.threads << "\n";
  return os.str();
}

/// FNV-1a 64-bit over the canonical serialization.
inline uint64_t config_hash(const ExperimentConfig& c) {
  std::string s = serialize_config(c);
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hash_hex(uint64_t h) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace diffseg
