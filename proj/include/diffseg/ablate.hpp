#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffseg/harness.hpp"
#include "diffseg/metrics.hpp"

namespace diffseg {
namespace harness {

inline constexpr double kAblateAlpha = 0.01;

/// The compared arms, reference first. Each is a single-field change against
/// the reference configuration except the non-diffusion baseline.
inline const std::vector<std::string>& ablation_arm_names() {
  static const std::vector<std::string> names = {"reference",    "no_recycle", "predict_eps",
                                                 "no_dice",      "train_full_t", "nondiffusion"};
  return names;
}

inline ExperimentConfig make_arm_config(const ExperimentConfig& base, const std::string& arm) {
  ExperimentConfig c = base;
  // normalize to the reference setting, then apply the arm's single change
  c.model = ModelKind::diffusion;
  c.parameterization = Parameterization::predict_x0;
  c.recycling = true;
  c.use_dice = true;
  c.use_ce = true;
  c.train_full_schedule = false;
  if (arm == "reference") {
  } else if (arm == "no_recycle") {
    c.recycling = false;
  } else if (arm == "predict_eps") {
    c.parameterization = Parameterization::predict_eps;
  } else if (arm == "no_dice") {
    c.use_dice = false;
  } else if (arm == "train_full_t") {
    c.train_full_schedule = true;
  } else if (arm == "nondiffusion") {
    c.model = ModelKind::direct_segmentation;
  } else {
    throw std::invalid_argument("make_arm_config: unknown arm " + arm);
  }
  return c;
}

struct ArmReport {
  std::string name;
  bool ok = false;
  double dice_mean = 0, dice_sd = 0, hd95_mean = 0, hd95_sd = 0;
  std::vector<double> case_dice;
  std::string error;
};

namespace detail_report {

struct LogPoint {
  int step;
  double loss;
};

inline std::vector<LogPoint> parse_train_log(const std::string& path) {
  std::ifstream f(path);
  std::vector<LogPoint> out;
  if (!f) return out;
  std::string line;
  bool header_seen = false;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      header_seen = true;
      continue;
    }
    std::stringstream ss(line);
    std::string step, lr, loss;
    std::getline(ss, step, ',');
    std::getline(ss, lr, ',');
    std::getline(ss, loss, ',');
    out.push_back({std::stoi(step), std::stod(loss)});
  }
  return out;
}

/// Per-case foreground-mean dice and HD95 recomputed from the per-class rows.
inline void parse_metrics_csv(const std::string& path, std::vector<double>& case_dice,
                              double& dice_mean, double& dice_sd, double& hd_mean, double& hd_sd) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("report: cannot open " + path);
  std::string line;
  bool header_seen = false;
  std::vector<std::string> case_order;
  std::map<std::string, std::vector<double>> dice_by_case;
  std::map<std::string, std::vector<double>> hd_by_case;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      header_seen = true;
      continue;
    }
    std::stringstream ss(line);
    std::string case_id, cls, dice, hd, roi;
    std::getline(ss, case_id, ',');
    std::getline(ss, cls, ',');
    std::getline(ss, dice, ',');
    std::getline(ss, hd, ',');
    std::getline(ss, roi, ',');
    if (case_id == "summary") continue;
    if (dice_by_case.find(case_id) == dice_by_case.end()) case_order.push_back(case_id);
    dice_by_case[case_id].push_back(std::stod(dice));
    if (hd != "undefined") hd_by_case[case_id].push_back(std::stod(hd));
  }
  case_dice.clear();
  std::vector<double> case_hd;
  for (const auto& id : case_order) {
    const auto& ds = dice_by_case[id];
    double m = 0;
    for (double d : ds) m += d;
    case_dice.push_back(m / static_cast<double>(ds.size()));
    auto it = hd_by_case.find(id);
    if (it != hd_by_case.end() && !it->second.empty()) {
      double hm = 0;
      for (double d : it->second) hm += d;
      case_hd.push_back(hm / static_cast<double>(it->second.size()));
    }
  }
  auto mean_sd = [](const std::vector<double>& v, double& m, double& sd) {
    m = sd = 0;
    if (v.empty()) return;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    if (v.size() < 2) return;
    double ss2 = 0;
    for (double x : v) ss2 += (x - m) * (x - m);
    sd = std::sqrt(ss2 / static_cast<double>(v.size() - 1));
  };
  mean_sd(case_dice, dice_mean, dice_sd);
  mean_sd(case_hd, hd_mean, hd_sd);
}

inline const char* arm_color(size_t i) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  return palette[i % 6];
}

}  // namespace detail_report

/// Self-contained SVG line chart of per-arm training loss curves.
inline void write_loss_svg(const std::string& path,
                           const std::vector<std::pair<std::string, std::vector<detail_report::LogPoint>>>& series,
                           uint64_t hash) {
  const int W = 860, H = 520, ML = 70, MR = 180, MT = 30, MB = 50;
  double max_step = 1, max_loss = 1e-9, min_loss = 0.0;
  for (const auto& [name, pts] : series) {
    for (const auto& p : pts) {
      max_step = std::max(max_step, static_cast<double>(p.step));
      max_loss = std::max(max_loss, p.loss);
    }
  }
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_loss_svg: cannot write " + path);
  f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
  f << "<!-- config_hash=" << hash_hex(hash) << " -->\n";
  f << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
  auto sx = [&](double step) { return ML + (W - ML - MR) * (step / max_step); };
  auto sy = [&](double loss) {
    return H - MB - (H - MT - MB) * ((loss - min_loss) / (max_loss - min_loss));
  };
  f << "<line x1=\"" << ML << "\" y1=\"" << (H - MB) << "\" x2=\"" << (W - MR) << "\" y2=\""
    << (H - MB) << "\" stroke=\"black\"/>\n";
  f << "<line x1=\"" << ML << "\" y1=\"" << MT << "\" x2=\"" << ML << "\" y2=\"" << (H - MB)
    << "\" stroke=\"black\"/>\n";
  char buf[160];
  for (int i = 0; i <= 4; ++i) {
    double ls = min_loss + (max_loss - min_loss) * i / 4.0;
    double y = sy(ls);
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%d\" y=\"%.1f\" font-size=\"12\" text-anchor=\"end\">%.3g</text>",
                  ML - 6, y + 4, ls);
    f << buf << "\n";
    std::snprintf(buf, sizeof(buf),
                  "<line x1=\"%d\" y1=\"%.1f\" x2=\"%d\" y2=\"%.1f\" stroke=\"#cccccc\"/>", ML, y,
                  W - MR, y);
    f << buf << "\n";
  }
  for (int i = 0; i <= 4; ++i) {
    double st = max_step * i / 4.0;
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%.1f\" y=\"%d\" font-size=\"12\" text-anchor=\"middle\">%d</text>",
                  sx(st), H - MB + 18, static_cast<int>(st));
    f << buf << "\n";
  }
  f << "<text x=\"" << (ML + (W - ML - MR) / 2) << "\" y=\"" << (H - 10)
    << "\" font-size=\"13\" text-anchor=\"middle\">training step</text>\n";
  f << "<text x=\"18\" y=\"" << (MT + (H - MT - MB) / 2)
    << "\" font-size=\"13\" transform=\"rotate(-90 18 " << (MT + (H - MT - MB) / 2)
    << ")\" text-anchor=\"middle\">loss</text>\n";
  size_t arm_i = 0;
  for (const auto& [name, pts] : series) {
    if (!pts.empty()) {
      size_t stride = pts.size() > 1600 ? pts.size() / 1600 + 1 : 1;
      f << "<polyline fill=\"none\" stroke=\"" << detail_report::arm_color(arm_i)
        << "\" stroke-width=\"1.5\" points=\"";
      for (size_t i = 0; i < pts.size(); i += stride) {
        std::snprintf(buf, sizeof(buf), "%.1f,%.1f ", sx(pts[i].step), sy(pts[i].loss));
        f << buf;
      }
      f << "\"/>\n";
    }
    int ly = MT + 20 + static_cast<int>(arm_i) * 20;
    f << "<line x1=\"" << (W - MR + 10) << "\" y1=\"" << ly << "\" x2=\"" << (W - MR + 40)
      << "\" y2=\"" << ly << "\" stroke=\"" << detail_report::arm_color(arm_i)
      << "\" stroke-width=\"2\"/>\n";
    f << "<text x=\"" << (W - MR + 46) << "\" y=\"" << (ly + 4) << "\" font-size=\"12\">" << name
      << "</text>\n";
    ++arm_i;
  }
  f << "</svg>\n";
}

/// Rebuild report.csv and training_curves.svg from per-arm artifacts under
/// out_dir/arms/<name>/. Returns false if any arm is missing or failed.
inline bool build_report(const ExperimentConfig& base, const std::string& out_dir) {
  namespace fs = std::filesystem;
  const uint64_t hash = config_hash(base);
  std::vector<ArmReport> arms;
  std::vector<std::pair<std::string, std::vector<detail_report::LogPoint>>> series;
  for (const auto& name : ablation_arm_names()) {
    ArmReport r;
    r.name = name;
    fs::path arm_dir = fs::path(out_dir) / "arms" / name;
    fs::path metrics = arm_dir / "metrics_test.csv";
    if (fs::exists(metrics)) {
      try {
        detail_report::parse_metrics_csv(metrics.string(), r.case_dice, r.dice_mean, r.dice_sd,
                                         r.hd95_mean, r.hd95_sd);
        r.ok = true;
      } catch (const std::exception& ex) {
        r.error = ex.what();
      }
    } else {
      r.error = "missing metrics_test.csv";
    }
    series.emplace_back(name, detail_report::parse_train_log((arm_dir / "train_log.csv").string()));
    arms.push_back(std::move(r));
  }

  const ArmReport& ref = arms[0];
  std::ofstream rep(fs::path(out_dir) / "report.csv");
  if (!rep) throw std::runtime_error("build_report: cannot write report.csv");
  rep << "# config_hash=" << hash_hex(hash) << "\n";
  rep << "# non-diffusion arm matches the diffusion arms in architecture and optimization steps\n";
  rep << "arm,status,dice_mean,dice_sd,hd95_mean,hd95_sd,dice_delta_vs_reference,p_vs_reference,"
         "significant_at_0.01\n";
  bool all_ok = true;
  for (const auto& a : arms) {
    rep << a.name << "," << (a.ok ? "ok" : "failed") << ",";
    if (a.ok) {
      rep << format_double(a.dice_mean) << "," << format_double(a.dice_sd) << ","
          << format_double(a.hd95_mean) << "," << format_double(a.hd95_sd) << ",";
    } else {
      rep << ",,,,";
      all_ok = false;
    }
    if (a.ok && ref.ok && a.name != "reference") {
      double delta = a.dice_mean - ref.dice_mean;
      rep << format_double(delta) << ",";
      if (a.case_dice.size() == ref.case_dice.size() && a.case_dice.size() >= 2) {
        TTestResult t = paired_t_test(a.case_dice, ref.case_dice);
        rep << format_double(t.p) << "," << (t.p < kAblateAlpha ? "yes" : "no");
      } else {
        rep << ",";
      }
    } else {
      rep << ",,";
    }
    rep << "\n";
  }
  write_loss_svg((fs::path(out_dir) / "training_curves.svg").string(), series, hash);
  return all_ok;
}

/// Train and evaluate every ablation arm, then emit the comparison report and
/// loss-curve SVG. Returns false (and the report marks the arm failed) if any
/// arm throws.
inline bool ablate_run(const ExperimentConfig& base, const std::string& data_dir,
                       const std::string& out_dir) {
  namespace fs = std::filesystem;
  base.validate();
  fs::create_directories(fs::path(out_dir) / "arms");
  bool all_ok = true;
  for (const auto& name : ablation_arm_names()) {
    ExperimentConfig arm_cfg = make_arm_config(base, name);
    fs::path arm_dir = fs::path(out_dir) / "arms" / name;
    fs::create_directories(arm_dir);
    std::ofstream(arm_dir / "config.cfg") << serialize_config(arm_cfg);
    try {
      std::string ckpt = train_run(arm_cfg, data_dir, arm_dir.string());
      evaluate_run(arm_cfg, ckpt, data_dir, "test", arm_dir.string());
    } catch (const std::exception& ex) {
      std::cerr << "arm " << name << " failed: " << ex.what() << "\n";
      all_ok = false;
    }
  }
  bool report_ok = build_report(base, out_dir);
  return all_ok && report_ok;
}

}  // namespace harness
}  // namespace diffseg
