#pragma once

#include <optional>
#include <string>
#include <vector>

#include "lesionaware/nn.hpp"

namespace lesionaware {

// Hierarchical residual feature extractor. A stride-2 stem conv is followed by
// n stages of basic residual blocks; stage 1 keeps the stem resolution and
// every later stage halves it, so the emitted maps f_1..f_n have spatial sizes
// input/2, input/4, ..., input/2^n.
struct FexConfig {
  int n_stages = 4;
  int in_channels = 1;
  int stem_channels = 16;
  std::vector<int> channels = {16, 32, 64, 128};
  std::vector<int> blocks = {1, 1, 1, 1};
  int input_size = 256;

  void validate() const {
    if (n_stages < 2) throw ConfigError("fex: n_stages must be >= 2");
    if (static_cast<int>(channels.size()) != n_stages || static_cast<int>(blocks.size()) != n_stages) {
      throw ConfigError("fex: channels and blocks must list one entry per stage");
    }
    for (int c : channels)
      if (c < 1) throw ConfigError("fex: channel counts must be positive");
    for (int b : blocks)
      if (b < 1) throw ConfigError("fex: block counts must be positive");
    if (in_channels < 1) throw ConfigError("fex: in_channels must be positive");
    if (stem_channels < 1) throw ConfigError("fex: stem_channels must be positive");
    int div = 1;
    for (int i = 0; i < n_stages; ++i) div *= 2;
    if (input_size < div || input_size % div != 0) {
      throw ConfigError("fex: input_size " + std::to_string(input_size) + " must be divisible by " +
                        std::to_string(div));
    }
  }

  // Spatial size of emitted map i (0-based).
  int stage_size(int i) const {
    int s = input_size / 2;
    for (int j = 0; j < i; ++j) s /= 2;
    return s;
  }

  int top_channels() const { return channels.back(); }
  int top_size() const { return stage_size(n_stages - 1); }
};

template <typename S>
struct FeaturePyramid {
  std::vector<Tensor<S>> maps;  // f_1..f_n, each [N, C_i, S_i, S_i]

  const Tensor<S>& top() const { return maps.back(); }
  int levels() const { return static_cast<int>(maps.size()); }
};

template <typename S>
struct ResidualBlock {
  Conv2dLayer<S> conv1, conv2;
  BatchNormLayer<S> bn1, bn2;
  std::optional<Conv2dLayer<S>> proj;
  std::optional<BatchNormLayer<S>> proj_bn;

  static ResidualBlock make(Rng& rng, int c_in, int c_out, int stride) {
    ResidualBlock b;
    b.conv1 = Conv2dLayer<S>::make(rng, c_out, c_in, 3, stride, 1, /*with_bias=*/false);
    b.bn1 = BatchNormLayer<S>::make(c_out);
    b.conv2 = Conv2dLayer<S>::make(rng, c_out, c_out, 3, 1, 1, /*with_bias=*/false);
    b.bn2 = BatchNormLayer<S>::make(c_out);
    if (stride != 1 || c_in != c_out) {
      b.proj = Conv2dLayer<S>::make(rng, c_out, c_in, 1, stride, 0, /*with_bias=*/false);
      b.proj_bn = BatchNormLayer<S>::make(c_out);
    }
    return b;
  }

  Tensor<S> forward(const Tensor<S>& x, NormMode mode) {
    Tensor<S> y = relu(bn1(conv1(x), mode));
    y = bn2(conv2(y), mode);
    Tensor<S> shortcut = proj ? (*proj_bn)((*proj)(x), mode) : x;
    return relu(add(y, shortcut));
  }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    conv1.collect(prefix + ".conv1", out);
    bn1.collect(prefix + ".bn1", out);
    conv2.collect(prefix + ".conv2", out);
    bn2.collect(prefix + ".bn2", out);
    if (proj) proj->collect(prefix + ".proj", out);
    if (proj_bn) proj_bn->collect(prefix + ".proj_bn", out);
  }

  void collect_buffers(const std::string& prefix, BufferList<S>& out) {
    bn1.collect_buffers(prefix + ".bn1", out);
    bn2.collect_buffers(prefix + ".bn2", out);
    if (proj_bn) proj_bn->collect_buffers(prefix + ".proj_bn", out);
  }
};

template <typename S>
struct Fex {
  FexConfig cfg;
  Conv2dLayer<S> stem;
  BatchNormLayer<S> stem_bn;
  std::vector<std::vector<ResidualBlock<S>>> stages;

  static Fex build(const FexConfig& cfg, Rng& rng) {
    cfg.validate();
    Fex f;
    f.cfg = cfg;
    f.stem = Conv2dLayer<S>::make(rng, cfg.stem_channels, cfg.in_channels, 3, 2, 1, /*with_bias=*/false);
    f.stem_bn = BatchNormLayer<S>::make(cfg.stem_channels);
    int c_in = cfg.stem_channels;
    for (int s = 0; s < cfg.n_stages; ++s) {
      std::vector<ResidualBlock<S>> blocks;
      const int c_out = cfg.channels[s];
      for (int b = 0; b < cfg.blocks[s]; ++b) {
        const int stride = (b == 0 && s > 0) ? 2 : 1;
        blocks.push_back(ResidualBlock<S>::make(rng, b == 0 ? c_in : c_out, c_out, stride));
      }
      f.stages.push_back(std::move(blocks));
      c_in = c_out;
    }
    return f;
  }

  FeaturePyramid<S> extract(const Tensor<S>& images, NormMode mode) {
    if (images.rank() != 4 || images.dim(1) != cfg.in_channels || images.dim(2) != cfg.input_size ||
        images.dim(3) != cfg.input_size) {
      throw DimensionError("fex: expected images [N," + std::to_string(cfg.in_channels) + "," +
                           std::to_string(cfg.input_size) + "," + std::to_string(cfg.input_size) +
                           "], got " + shape_str(images.shape()));
    }
    FeaturePyramid<S> pyr;
    Tensor<S> x = relu(stem_bn(stem(images), mode));
    for (auto& stage : stages) {
      for (auto& block : stage) x = block.forward(x, mode);
      pyr.maps.push_back(x);
    }
    return pyr;
  }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    stem.collect(prefix + ".stem", out);
    stem_bn.collect(prefix + ".stem_bn", out);
    for (std::size_t s = 0; s < stages.size(); ++s)
      for (std::size_t b = 0; b < stages[s].size(); ++b)
        stages[s][b].collect(prefix + ".stage" + std::to_string(s + 1) + ".block" + std::to_string(b),
                             out);
  }

  void collect_buffers(const std::string& prefix, BufferList<S>& out) {
    stem_bn.collect_buffers(prefix + ".stem_bn", out);
    for (std::size_t s = 0; s < stages.size(); ++s)
      for (std::size_t b = 0; b < stages[s].size(); ++b)
        stages[s][b].collect_buffers(
            prefix + ".stage" + std::to_string(s + 1) + ".block" + std::to_string(b), out);
  }
};

}  // namespace lesionaware
