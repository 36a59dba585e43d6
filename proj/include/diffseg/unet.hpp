#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffseg/graph.hpp"
#include "diffseg/rng.hpp"
#include "diffseg/tensor.hpp"

namespace diffseg {

struct UNetConfig {
  int levels = 2;
  std::vector<int> channels = {8, 16};  // per level; a full-scale run would use {32,64,128,256}
  int in_channels = 5;                  // image + C signal channels
  int out_channels = 4;                 // C
  int time_dim = 32;

  void validate() const {
    if (levels < 1) throw std::invalid_argument("UNetConfig: levels must be >= 1");
    if (static_cast<int>(channels.size()) != levels) {
      throw std::invalid_argument("UNetConfig: need one channel count per level");
    }
    for (int c : channels) {
      if (c <= 0) throw std::invalid_argument("UNetConfig: channels must be positive");
    }
    if (in_channels <= 0 || out_channels <= 0) {
      throw std::invalid_argument("UNetConfig: channel counts must be positive");
    }
    if (time_dim <= 0 || time_dim % 2 != 0) {
      throw std::invalid_argument("UNetConfig: time_dim must be positive and even");
    }
  }

  void validate_spatial(int D, int H, int W) const {
    int div = 1 << (levels - 1);
    if (D % div || H % div || W % div) {
      throw std::invalid_argument("UNetConfig: spatial dims (" + std::to_string(D) + "," +
                                  std::to_string(H) + "," + std::to_string(W) +
                                  ") must be divisible by 2^(levels-1) = " + std::to_string(div));
    }
  }
};

/// e[2i] = sin(k / 10000^(2i/dim)), e[2i+1] = cos(k / 10000^(2i/dim)).
template <typename T>
Tensor<T> sinusoidal_time_embedding(int k, int dim) {
  if (dim <= 0 || dim % 2 != 0) {
    throw std::invalid_argument("sinusoidal_time_embedding: dim must be positive and even");
  }
  Tensor<T> e({dim});
  for (int i = 0; i < dim / 2; ++i) {
    double freq = std::pow(10000.0, -2.0 * i / dim);
    e[2 * i] = static_cast<T>(std::sin(k * freq));
    e[2 * i + 1] = static_cast<T>(std::cos(k * freq));
  }
  return e;
}

/// Plain double-conv encoder/decoder U-net on [C,D,H,W] volumes.
/// Input is concat(image, x_t); the sinusoidal time embedding is projected per
/// level and added channel-wise after the first convolution of each level.
/// Downsampling is a stride-2 conv, upsampling nearest-neighbour followed by a
/// conv. SiLU activations, no normalization, no stochastic layers.
template <typename T>
class UNet {
 public:
  using Var = typename Graph<T>::Var;

  UNet(UNetConfig cfg, uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(init_seed);
    auto conv_init = [&](const std::string& name, int co, int ci, int k) {
      T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(ci) * k * k * k));
      params_[name + "_w"] = random_uniform<T>({co, ci, k, k, k}, rng, -bound, bound);
      params_[name + "_b"] = Tensor<T>({co}, T(0));
    };
    auto linear_init = [&](const std::string& name, int out, int in) {
      T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(in)));
      params_[name + "_w"] = random_uniform<T>({out, in}, rng, -bound, bound);
      params_[name + "_b"] = Tensor<T>({out}, T(0));
    };
    for (int l = 0; l < cfg_.levels; ++l) {
      int ch = cfg_.channels[static_cast<size_t>(l)];
      int in_ch = l == 0 ? cfg_.in_channels : cfg_.channels[static_cast<size_t>(l)];
      conv_init(level_name("enc", l, "conv1"), ch, in_ch, 3);
      linear_init(level_name("enc", l, "time"), ch, cfg_.time_dim);
      conv_init(level_name("enc", l, "conv2"), ch, ch, 3);
      if (l < cfg_.levels - 1) {
        conv_init(level_name("down", l, "conv"), cfg_.channels[static_cast<size_t>(l + 1)], ch, 3);
      }
    }
    for (int l = cfg_.levels - 2; l >= 0; --l) {
      int ch = cfg_.channels[static_cast<size_t>(l)];
      conv_init(level_name("dec", l, "up"), ch, cfg_.channels[static_cast<size_t>(l + 1)], 3);
      conv_init(level_name("dec", l, "conv1"), ch, 2 * ch, 3);
      linear_init(level_name("dec", l, "time"), ch, cfg_.time_dim);
      conv_init(level_name("dec", l, "conv2"), ch, ch, 3);
    }
    conv_init("head", cfg_.out_channels, cfg_.channels[0], 1);
  }

  UNet(UNetConfig cfg, std::map<std::string, Tensor<T>> params)
      : cfg_(std::move(cfg)), params_(std::move(params)) {
    cfg_.validate();
  }

  const UNetConfig& config() const { return cfg_; }
  const std::map<std::string, Tensor<T>>& params() const { return params_; }
  std::map<std::string, Tensor<T>>& params() { return params_; }

  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : params_) n += t.numel();
    return n;
  }

  /// Record the forward pass in `g`. Parameters are registered on first use
  /// and cached in `vars`, so two passes in one graph share the same leaves.
  /// `time_value` is the integer timestep fed to the sinusoidal embedding.
  Var build(Graph<T>& g, Var image, Var x_t, int time_value, std::map<std::string, Var>& vars,
            bool trainable) const {
    const Tensor<T>& iv = g.val(image);
    const Tensor<T>& xv = g.val(x_t);
    if (iv.rank() != 4 || xv.rank() != 4) throw std::invalid_argument("unet: inputs must be [C,D,H,W]");
    if (iv.shape[0] + xv.shape[0] != cfg_.in_channels) {
      throw std::invalid_argument("unet: image+signal channels " +
                                  std::to_string(iv.shape[0] + xv.shape[0]) + " != configured " +
                                  std::to_string(cfg_.in_channels));
    }
    cfg_.validate_spatial(xv.shape[1], xv.shape[2], xv.shape[3]);

    auto P = [&](const std::string& name) -> Var {
      auto it = vars.find(name);
      if (it != vars.end()) return it->second;
      auto pit = params_.find(name);
      if (pit == params_.end()) throw std::logic_error("unet: missing parameter " + name);
      Var v = trainable ? g.param(name, pit->second) : g.constant(pit->second);
      vars.emplace(name, v);
      return v;
    };
    auto conv = [&](Var h, const std::string& name, int stride) {
      return g.conv3(h, P(name + "_w"), P(name + "_b"), stride,
                     (g.val(P(name + "_w")).shape[2] - 1) / 2);
    };
    auto time_add = [&](Var h, const std::string& name, Var emb) {
      Var proj = g.linear(emb, P(name + "_w"), P(name + "_b"));
      int ch = g.val(proj).shape[0];
      return g.add(h, g.reshape(proj, {ch, 1, 1, 1}));
    };

    Var emb = g.constant(sinusoidal_time_embedding<T>(time_value, cfg_.time_dim));
    Var h = g.concat({image, x_t}, 0);
    std::vector<Var> skips;
    for (int l = 0; l < cfg_.levels; ++l) {
      h = g.silu(time_add(conv(h, level_name("enc", l, "conv1"), 1), level_name("enc", l, "time"), emb));
      h = g.silu(conv(h, level_name("enc", l, "conv2"), 1));
      skips.push_back(h);
      if (l < cfg_.levels - 1) h = conv(h, level_name("down", l, "conv"), 2);
    }
    for (int l = cfg_.levels - 2; l >= 0; --l) {
      h = g.silu(conv(g.upsample_nearest2(h), level_name("dec", l, "up"), 1));
      h = g.concat({h, skips[static_cast<size_t>(l)]}, 0);
      h = g.silu(time_add(conv(h, level_name("dec", l, "conv1"), 1), level_name("dec", l, "time"), emb));
      h = g.silu(conv(h, level_name("dec", l, "conv2"), 1));
    }
    return conv(h, "head", 1);
  }

  /// Gradient-free forward pass.
  Tensor<T> infer(const Tensor<T>& image, const Tensor<T>& x_t, int time_value) const {
    Graph<T> g;
    std::map<std::string, Var> vars;
    Var out = build(g, g.constant(image), g.constant(x_t), time_value, vars, /*trainable=*/false);
    return g.val(out);
  }

 private:
  static std::string level_name(const char* stage, int level, const char* part) {
    return std::string(stage) + std::to_string(level) + "_" + part;
  }

  UNetConfig cfg_;
  std::map<std::string, Tensor<T>> params_;
};

}  // namespace diffseg
