#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffseg/checkpoint.hpp"
#include "diffseg/config.hpp"
#include "diffseg/metrics.hpp"
#include "diffseg/recycling.hpp"
#include "diffseg/volio.hpp"

namespace diffseg {
namespace harness {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// dataset generation and loading
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string split;
  int index = 0;
  std::string image_file;
  std::string mask_file;
  uint64_t seed = 0;

  std::string case_id() const {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%04d", split.c_str(), index);
    return buf;
  }
};

inline std::string format_double(double v, int digits = 10) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", digits, v);
  return buf;
}

/// Writes train/val/test VOLB pairs plus manifest.csv. Regeneration with the
/// same config is bitwise identical.
inline std::vector<ManifestEntry> gen_data(const ExperimentConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir);
  std::vector<ManifestEntry> entries;
  struct SplitSpec {
    const char* name;
    int count;
  };
  const SplitSpec splits[] = {{"train", cfg.synth.num_train},
                              {"val", cfg.synth.num_val},
                              {"test", cfg.synth.num_test}};
  int global_index = 0;
  for (const auto& sp : splits) {
    for (int i = 0; i < sp.count; ++i, ++global_index) {
      uint64_t seed = seed_combine(cfg.synth.master_seed, static_cast<uint64_t>(global_index));
      auto [vol, mask] = generate_sample<float>(cfg.synth, seed);
      ManifestEntry e;
      e.split = sp.name;
      e.index = i;
      char img[64], msk[64];
      std::snprintf(img, sizeof(img), "img_%s_%04d.volb", sp.name, i);
      std::snprintf(msk, sizeof(msk), "msk_%s_%04d.volb", sp.name, i);
      e.image_file = img;
      e.mask_file = msk;
      e.seed = seed;
      volio::write_volume((fs::path(out_dir) / e.image_file).string(), vol);
      volio::write_mask((fs::path(out_dir) / e.mask_file).string(), mask);
      entries.push_back(std::move(e));
    }
  }
  std::ofstream mf(fs::path(out_dir) / "manifest.csv");
  if (!mf) throw std::runtime_error("gen_data: cannot write manifest in " + out_dir);
  mf << "# config_hash=" << hash_hex(config_hash(cfg)) << "\n";
  mf << "split,index,image,mask,seed\n";
  for (const auto& e : entries) {
    mf << e.split << "," << e.index << "," << e.image_file << "," << e.mask_file << "," << e.seed
       << "\n";
  }
  return entries;
}

inline std::vector<ManifestEntry> read_manifest(const std::string& data_dir,
                                                const std::string& split = "") {
  std::ifstream mf(fs::path(data_dir) / "manifest.csv");
  if (!mf) throw std::runtime_error("manifest.csv not found in " + data_dir);
  std::vector<ManifestEntry> out;
  std::string line;
  bool header_seen = false;
  while (std::getline(mf, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      header_seen = true;  // column header
      continue;
    }
    std::stringstream ss(line);
    ManifestEntry e;
    std::string idx, seed;
    std::getline(ss, e.split, ',');
    std::getline(ss, idx, ',');
    std::getline(ss, e.image_file, ',');
    std::getline(ss, e.mask_file, ',');
    std::getline(ss, seed, ',');
    e.index = std::stoi(idx);
    e.seed = std::stoull(seed);
    if (split.empty() || e.split == split) out.push_back(std::move(e));
  }
  return out;
}

inline std::vector<TrainSample<float>> load_split(const std::string& data_dir,
                                                  const std::string& split) {
  std::vector<TrainSample<float>> out;
  for (const auto& e : read_manifest(data_dir, split)) {
    TrainSample<float> s;
    s.image = volio::read_volume((fs::path(data_dir) / e.image_file).string());
    s.mask = volio::read_mask((fs::path(data_dir) / e.mask_file).string());
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

inline Checkpoint make_checkpoint(const ExperimentConfig& cfg, const UNet<float>& unet,
                                  const OptimState<float>& opt, const Rng& rng, uint64_t step) {
  Checkpoint c;
  c.config_hash = config_hash(cfg);
  c.schedule_T = cfg.T;
  c.beta_start = cfg.beta_start;
  c.beta_end = cfg.beta_end;
  c.schedule_K = cfg.K;
  c.params = unet.params();
  c.optim = opt;
  c.rng_state = rng.save_state();
  c.step = step;
  return c;
}

/// Run (or resume) training. Logs one CSV row per step, checkpoints every
/// cfg.checkpoint_every steps and at the end. Returns the final checkpoint
/// path. `stop_after_step` (> 0) ends the process early after that many total
/// steps, leaving a resumable checkpoint_last.ckpt behind.
inline std::string train_run(const ExperimentConfig& cfg, const std::string& data_dir,
                             const std::string& out_dir, int stop_after_step = -1) {
  cfg.validate();
  fs::create_directories(out_dir);
  const uint64_t hash = config_hash(cfg);

  NoiseSchedule parent = make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
  SubSchedule sched =
      cfg.train_full_schedule ? full_subsequence(parent) : resample_subsequence(parent, cfg.K);

  std::vector<TrainSample<float>> train_set = load_split(data_dir, "train");
  if (train_set.empty()) throw std::runtime_error("train_run: no training cases in " + data_dir);

  UNet<float> unet(cfg.to_unet_config(), seed_combine(cfg.seed, 1));
  OptimState<float> opt = OptimState<float>::init(unet.params());
  OptimConfig ocfg = cfg.to_optim_config();
  Rng rng(seed_combine(cfg.seed, 2));
  TrainSettings settings = cfg.to_train_settings();

  int start_step = 0;
  const std::string last_path = (fs::path(out_dir) / "checkpoint_last.ckpt").string();
  const std::string log_path = (fs::path(out_dir) / "train_log.csv").string();
  if (fs::exists(last_path)) {
    Checkpoint c = load_checkpoint(last_path, hash, /*force=*/false);
    unet.params() = std::move(c.params);
    opt = std::move(c.optim);
    rng.load_state(c.rng_state);
    start_step = static_cast<int>(c.step);
  }
  std::cout << "unet parameters: " << unet.param_count() << "\n";

  std::ofstream log;
  if (start_step == 0) {
    log.open(log_path, std::ios::trunc);
    log << "# config_hash=" << hash_hex(hash) << "\n";
    log << "step,lr,loss,ce,dice,noise_l2\n";
  } else {
    log.open(log_path, std::ios::app);
  }
  if (!log) throw std::runtime_error("train_run: cannot open " + log_path);

  const int n_train = static_cast<int>(train_set.size());
  LossTerms last_terms;
  for (int step = start_step; step < cfg.train_steps; ++step) {
    double lr = warmup_cosine_lr(step, ocfg.warmup_steps, ocfg.total_steps, ocfg.lr_peak);
    std::vector<int> indices(static_cast<size_t>(cfg.batch_size));
    for (auto& idx : indices) idx = static_cast<int>(rng.uniform_int(0, n_train - 1));
    uint64_t step_seed = rng.next_u64();

    std::vector<TrainSample<float>> batch_storage;
    batch_storage.reserve(indices.size());
    std::vector<const TrainSample<float>*> batch;
    for (size_t e = 0; e < indices.size(); ++e) {
      const TrainSample<float>& src = train_set[static_cast<size_t>(indices[e])];
      if (cfg.augment) {
        Rng arng(seed_combine(step_seed, 1000 + static_cast<uint64_t>(e)));
        auto [img, msk] = augment(src.image, src.mask, arng);
        batch_storage.push_back({std::move(img), std::move(msk)});
      } else {
        batch_storage.push_back(src);
      }
    }
    for (const auto& s : batch_storage) batch.push_back(&s);

    LossTerms terms;
    try {
      terms = train_step(batch, settings, unet, opt, ocfg, lr, sched, step_seed);
    } catch (const std::exception& ex) {
      std::ostringstream os;
      os << "training aborted at step " << step << ": " << ex.what()
         << " (last completed step terms: loss=" << format_double(last_terms.total)
         << " ce=" << format_double(last_terms.ce) << " dice=" << format_double(last_terms.dice)
         << " noise_l2=" << format_double(last_terms.noise_l2) << ")";
      throw std::runtime_error(os.str());
    }
    last_terms = terms;
    log << step << "," << format_double(lr) << "," << format_double(terms.total) << ","
        << format_double(terms.ce) << "," << format_double(terms.dice) << ","
        << format_double(terms.noise_l2) << "\n";
    log.flush();

    int done = step + 1;
    if (done % cfg.checkpoint_every == 0 || done == cfg.train_steps ||
        (stop_after_step > 0 && done == stop_after_step)) {
      Checkpoint c = make_checkpoint(cfg, unet, opt, rng, static_cast<uint64_t>(done));
      char name[64];
      std::snprintf(name, sizeof(name), "checkpoint_step_%06d.ckpt", done);
      save_checkpoint((fs::path(out_dir) / name).string(), c);
      save_checkpoint(last_path, c);
    }
    if (stop_after_step > 0 && done == stop_after_step) break;
  }
  return last_path;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

struct EvalSummary {
  int n_cases = 0;
  double dice_mean = 0.0;
  double dice_sd = 0.0;
  double hd95_mean = 0.0;  // over cases with a defined mean HD95
  double hd95_sd = 0.0;
  int hd95_cases_undefined = 0;
  std::optional<double> spearman_roi_dice;
  std::vector<double> case_dice;   // per-case foreground-mean Dice
  std::vector<CaseResult> cases;
};

/// Build the sampling-time denoiser for a trained model.
inline SamplingDenoiser<float> make_sampling_denoiser(const UNet<float>& unet,
                                                      const SubSchedule& sched) {
  return [&unet, &sched](const Volume& image, const Tensor<float>& x_t, int k) {
    return unet.infer(image.intensities, x_t, sched.timestep_at(k));
  };
}

/// Phase 1: predict a mask per image. Reads nothing but what the caller
/// already loaded; ground-truth masks are not consulted.
inline std::vector<LabelMask> predict_masks(const ExperimentConfig& cfg, const UNet<float>& unet,
                                            const std::vector<Volume>& images,
                                            const SubSchedule& sched, uint64_t eval_seed) {
  const int C = cfg.synth.classes;
  std::vector<LabelMask> preds(images.size());
  SamplingDenoiser<float> den = make_sampling_denoiser(unet, sched);
  parallel_for(static_cast<int>(images.size()), cfg.threads, [&](int i) {
    Rng rng(seed_combine(eval_seed, static_cast<uint64_t>(i)));
    if (cfg.model == ModelKind::direct_segmentation) {
      const auto& is = images[static_cast<size_t>(i)].intensities.shape;
      Tensor<float> zeros({C, is[1], is[2], is[3]}, 0.f);
      Tensor<float> logits = unet.infer(images[static_cast<size_t>(i)].intensities, zeros, 0);
      preds[static_cast<size_t>(i)] =
          signal_to_mask(logits, images[static_cast<size_t>(i)].spacing);
    } else {
      auto res = sample_mask(den, images[static_cast<size_t>(i)], C, cfg.parameterization, sched, rng);
      preds[static_cast<size_t>(i)] = std::move(res.mask);
    }
  });
  return preds;
}

/// Phase 2: score predictions against truths and write the metrics CSV
/// (per-case per-class rows, then a mean +- sd summary row).
inline EvalSummary score_predictions(const std::vector<LabelMask>& preds,
                                     const std::vector<LabelMask>& truths,
                                     const std::vector<std::string>& case_ids, int C,
                                     const std::string& csv_path, uint64_t hash) {
  if (preds.size() != truths.size() || preds.size() != case_ids.size()) {
    throw std::invalid_argument("score_predictions: size mismatch");
  }
  EvalSummary sum;
  sum.n_cases = static_cast<int>(preds.size());
  sum.cases.resize(preds.size());
  parallel_for(static_cast<int>(preds.size()), 0, [&](int i) {
    sum.cases[static_cast<size_t>(i)] =
        evaluate_case(preds[static_cast<size_t>(i)], truths[static_cast<size_t>(i)], C);
  });

  std::ofstream csv(csv_path);
  if (!csv) throw std::runtime_error("score_predictions: cannot write " + csv_path);
  csv << "# config_hash=" << hash_hex(hash) << "\n";
  csv << "case,class,dice,hd95_mm,roi_voxels\n";
  std::vector<double> roi_all, dice_all;
  std::vector<double> hd_case;
  for (size_t i = 0; i < preds.size(); ++i) {
    const CaseResult& r = sum.cases[i];
    for (size_t c = 0; c < r.dice.size(); ++c) {
      csv << case_ids[i] << "," << (c + 1) << "," << format_double(r.dice[c]) << ",";
      if (r.hd95_mm[c]) {
        csv << format_double(*r.hd95_mm[c]);
      } else {
        csv << "undefined";
      }
      csv << "," << r.roi_voxels[c] << "\n";
      roi_all.push_back(static_cast<double>(r.roi_voxels[c]));
      dice_all.push_back(r.dice[c]);
    }
    sum.case_dice.push_back(r.mean_dice);
    if (r.mean_hd95) {
      hd_case.push_back(*r.mean_hd95);
    } else {
      ++sum.hd95_cases_undefined;
    }
  }
  auto mean_sd = [](const std::vector<double>& v, double& m, double& sd) {
    m = 0;
    sd = 0;
    if (v.empty()) return;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    if (v.size() < 2) return;
    double ss = 0;
    for (double x : v) ss += (x - m) * (x - m);
    sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
  };
  mean_sd(sum.case_dice, sum.dice_mean, sum.dice_sd);
  mean_sd(hd_case, sum.hd95_mean, sum.hd95_sd);
  if (roi_all.size() >= 3) sum.spearman_roi_dice = spearman_r(roi_all, dice_all);

  char dice_s[64], hd_s[64];
  std::snprintf(dice_s, sizeof(dice_s), "%.4f\xC2\xB1%.4f", sum.dice_mean, sum.dice_sd);
  std::snprintf(hd_s, sizeof(hd_s), "%.4f\xC2\xB1%.4f", sum.hd95_mean, sum.hd95_sd);
  csv << "summary,foreground," << dice_s << "," << hd_s << "," << sum.hd95_cases_undefined << "\n";
  csv << "# spearman_roi_dice=";
  if (sum.spearman_roi_dice) {
    csv << format_double(*sum.spearman_roi_dice);
  } else {
    csv << "undefined";
  }
  csv << "\n";
  return sum;
}

/// Full evaluation of a checkpoint on one dataset split. Sampling reads only
/// image files; truth masks are read afterwards for scoring.
inline EvalSummary evaluate_run(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                                const std::string& data_dir, const std::string& split,
                                const std::string& out_dir, bool force_hash = false,
                                std::optional<uint64_t> seed_override = std::nullopt) {
  cfg.validate();
  fs::create_directories(out_dir);
  const uint64_t hash = config_hash(cfg);
  Checkpoint ckpt = load_checkpoint(checkpoint_path, hash, force_hash);
  UNet<float> unet(cfg.to_unet_config(), std::move(ckpt.params));
  std::cout << "unet parameters: " << unet.param_count() << "\n";

  NoiseSchedule parent = make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
  SubSchedule sched = resample_subsequence(parent, cfg.K);

  auto entries = read_manifest(data_dir, split);
  if (entries.empty()) throw std::runtime_error("evaluate_run: no cases in split " + split);
  std::vector<Volume> images;
  std::vector<std::string> ids;
  for (const auto& e : entries) {
    images.push_back(volio::read_volume((fs::path(data_dir) / e.image_file).string()));
    ids.push_back(e.case_id());
  }
  uint64_t eval_seed = seed_override.value_or(cfg.eval_seed);
  std::vector<LabelMask> preds = predict_masks(cfg, unet, images, sched, eval_seed);

  std::vector<LabelMask> truths;
  for (const auto& e : entries) {
    truths.push_back(volio::read_mask((fs::path(data_dir) / e.mask_file).string()));
  }
  std::string csv_path = (fs::path(out_dir) / ("metrics_" + split + ".csv")).string();
  return score_predictions(preds, truths, ids, cfg.synth.classes, csv_path, hash);
}

}  // namespace harness
}  // namespace diffseg
