#pragma once

#include <optional>
#include <string>
#include <vector>

#include "lesionaware/fex.hpp"

namespace lesionaware {

// Channel attention: a two-layer perceptron shared between the global-max and
// global-avg descriptors gates each channel. One instance per pyramid level by
// default; the shared variant routes every level through one core perceptron
// behind per-level channel projections.
template <typename S>
struct CamBlock {
  LinearLayer<S> fc1;  // C -> hidden
  LinearLayer<S> fc2;  // hidden -> C

  static CamBlock make(Rng& rng, int channels, int reduction) {
    const int hidden = std::max(1, channels / reduction);
    CamBlock b;
    b.fc1 = LinearLayer<S>::make(rng, hidden, channels);
    b.fc2 = LinearLayer<S>::make(rng, channels, hidden);
    return b;
  }

  Tensor<S> mlp(const Tensor<S>& pooled) const { return fc2(relu(fc1(pooled))); }

  // f [N,C,H,W] -> f gated by sigmoid(MLP(gmax) + MLP(gavg)).
  Tensor<S> refine(const Tensor<S>& f) const {
    if (f.rank() != 4 || f.dim(1) != fc1.weight.dim(1)) {
      throw DimensionError("cam: expected " + std::to_string(fc1.weight.dim(1)) +
                           " channels, got " + shape_str(f.shape()));
    }
    const int n = f.dim(0), c = f.dim(1);
    Tensor<S> gmax = reshape(global_pool2d(f, PoolKind::kMax), {n, c});
    Tensor<S> gavg = reshape(global_pool2d(f, PoolKind::kAvg), {n, c});
    Tensor<S> a = sigmoid(add(mlp(gmax), mlp(gavg)));
    return mul(f, reshape(a, {n, c, 1, 1}));
  }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
  }
};

// Shared-core channel attention: per-level projections into a common width,
// one perceptron for all levels.
template <typename S>
struct SharedCamCore {
  LinearLayer<S> fc1, fc2;  // C_ref -> hidden -> C_ref

  static SharedCamCore make(Rng& rng, int c_ref, int reduction) {
    const int hidden = std::max(1, c_ref / reduction);
    SharedCamCore s;
    s.fc1 = LinearLayer<S>::make(rng, hidden, c_ref);
    s.fc2 = LinearLayer<S>::make(rng, c_ref, hidden);
    return s;
  }
};

template <typename S>
struct SharedCamLevel {
  LinearLayer<S> in_proj;   // C_i -> C_ref, no bias
  LinearLayer<S> out_proj;  // C_ref -> C_i, no bias

  static SharedCamLevel make(Rng& rng, int channels, int c_ref) {
    SharedCamLevel l;
    l.in_proj = LinearLayer<S>::make(rng, c_ref, channels, /*with_bias=*/false);
    l.out_proj = LinearLayer<S>::make(rng, channels, c_ref, /*with_bias=*/false);
    return l;
  }
};

// Spatial attention: a single 7x7 convolution over the 2-channel
// [channel-max, channel-avg] map; its input is always 2 channels, so one
// kernel serves every pyramid level.
template <typename S>
struct SamBlock {
  Conv2dLayer<S> conv;

  static SamBlock make(Rng& rng, int kernel = 7) {
    SamBlock b;
    b.conv = Conv2dLayer<S>::make(rng, 1, 2, kernel, 1, kernel / 2, /*with_bias=*/true);
    return b;
  }

  Tensor<S> refine(const Tensor<S>& f) const {
    Tensor<S> cmax = channel_pool(f, PoolKind::kMax);
    Tensor<S> cavg = channel_pool(f, PoolKind::kAvg);
    Tensor<S> s = sigmoid(conv(concat<S>({cmax, cavg}, 1)));
    return mul(f, s);
  }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    conv.collect(prefix + ".conv", out);
  }
};

// Auxiliary lesion-aware branch: CBAM refinement per pyramid level, per-level
// 1x1 channel squeeze, bilinear resize to the top-level size, concatenation,
// and a conv+BN+sigmoid fusion head emitting the lesion-probability mask.
template <typename S>
struct LaNet {
  std::vector<CamBlock<S>> cams;                   // per level (default mode)
  std::optional<SharedCamCore<S>> shared_core;     // shared mode
  std::vector<SharedCamLevel<S>> shared_levels;    // shared mode
  SamBlock<S> sam;
  std::vector<Conv2dLayer<S>> squeeze;             // per level, 1x1 C_i -> 1
  Conv2dLayer<S> head_conv;                        // 3x3, n -> 1
  BatchNormLayer<S> head_bn;
  bool use_cam = true;
  bool use_sam = true;
  bool cam_shared = false;
  int top_size = 0;

  static LaNet build(const FexConfig& fex, Rng& rng, int reduction, bool cam_shared, bool use_cam,
                     bool use_sam) {
    LaNet d;
    d.use_cam = use_cam;
    d.use_sam = use_sam;
    d.cam_shared = cam_shared;
    d.top_size = fex.top_size();
    if (cam_shared) {
      const int c_ref = fex.channels.back();
      d.shared_core = SharedCamCore<S>::make(rng, c_ref, reduction);
      for (int i = 0; i < fex.n_stages; ++i)
        d.shared_levels.push_back(SharedCamLevel<S>::make(rng, fex.channels[i], c_ref));
    } else {
      for (int i = 0; i < fex.n_stages; ++i)
        d.cams.push_back(CamBlock<S>::make(rng, fex.channels[i], reduction));
    }
    d.sam = SamBlock<S>::make(rng);
    for (int i = 0; i < fex.n_stages; ++i)
      d.squeeze.push_back(Conv2dLayer<S>::make(rng, 1, fex.channels[i], 1, 1, 0, /*with_bias=*/true));
    d.head_conv = Conv2dLayer<S>::make(rng, 1, fex.n_stages, 3, 1, 1, /*with_bias=*/false);
    d.head_bn = BatchNormLayer<S>::make(1);
    return d;
  }

  Tensor<S> cam_refine(const Tensor<S>& f, int level) const {
    if (!cam_shared) return cams[static_cast<std::size_t>(level)].refine(f);
    const auto& lvl = shared_levels[static_cast<std::size_t>(level)];
    const int n = f.dim(0), c = f.dim(1);
    Tensor<S> gmax = reshape(global_pool2d(f, PoolKind::kMax), {n, c});
    Tensor<S> gavg = reshape(global_pool2d(f, PoolKind::kAvg), {n, c});
    const auto path = [&](const Tensor<S>& v) {
      return lvl.out_proj(shared_core->fc2(relu(shared_core->fc1(lvl.in_proj(v)))));
    };
    Tensor<S> a = sigmoid(add(path(gmax), path(gavg)));
    return mul(f, reshape(a, {n, c, 1, 1}));
  }

  Tensor<S> sam_refine(const Tensor<S>& f) const { return sam.refine(f); }

  // CAM then SAM; either stage bypasses to the identity when ablated.
  Tensor<S> cbam(const Tensor<S>& f, int level) const {
    Tensor<S> y = use_cam ? cam_refine(f, level) : f;
    return use_sam ? sam_refine(y) : y;
  }

  // Full branch: pyramid -> lesion-probability mask [N,1,S_n,S_n].
  Tensor<S> predict(const FeaturePyramid<S>& pyr, NormMode mode) {
    if (pyr.levels() != static_cast<int>(squeeze.size())) {
      throw ConfigError("lanet: pyramid has " + std::to_string(pyr.levels()) + " levels, expected " +
                        std::to_string(squeeze.size()));
    }
    std::vector<Tensor<S>> resized;
    for (int i = 0; i < pyr.levels(); ++i) {
      Tensor<S> y = cbam(pyr.maps[static_cast<std::size_t>(i)], i);
      y = squeeze[static_cast<std::size_t>(i)](y);
      resized.push_back(resize_bilinear(y, top_size, top_size));
    }
    Tensor<S> merged = concat<S>(resized, 1);
    return sigmoid(head_bn(head_conv(merged), mode));
  }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    if (cam_shared) {
      shared_core->fc1.collect(prefix + ".cam_shared.fc1", out);
      shared_core->fc2.collect(prefix + ".cam_shared.fc2", out);
      for (std::size_t i = 0; i < shared_levels.size(); ++i) {
        shared_levels[i].in_proj.collect(prefix + ".cam_proj" + std::to_string(i + 1) + ".in", out);
        shared_levels[i].out_proj.collect(prefix + ".cam_proj" + std::to_string(i + 1) + ".out", out);
      }
    } else {
      for (std::size_t i = 0; i < cams.size(); ++i)
        cams[i].collect(prefix + ".cam" + std::to_string(i + 1), out);
    }
    sam.collect(prefix + ".sam", out);
    for (std::size_t i = 0; i < squeeze.size(); ++i)
      squeeze[i].collect(prefix + ".squeeze" + std::to_string(i + 1), out);
    head_conv.collect(prefix + ".head_conv", out);
    head_bn.collect(prefix + ".head_bn", out);
  }

  void collect_buffers(const std::string& prefix, BufferList<S>& out) {
    head_bn.collect_buffers(prefix + ".head_bn", out);
  }
};

}  // namespace lesionaware
