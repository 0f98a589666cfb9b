#pragma once

#include <optional>
#include <string>

#include "lesionaware/classifier.hpp"
#include "lesionaware/lanet.hpp"

namespace lesionaware {

struct ModelConfig {
  FexConfig fex;
  int num_classes = 2;
  bool use_lanet = true;
  bool use_cam = true;
  bool use_sam = true;
  bool use_mam = true;
  bool cam_shared = false;
  int cam_reduction = 16;

  void validate() const {
    fex.validate();
    if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
    if (cam_reduction < 1) throw ConfigError("model: cam_reduction must be >= 1");
  }
};

template <typename S>
struct ModelOutput {
  FeaturePyramid<S> pyramid;
  Tensor<S> mask;    // [N,1,S_n,S_n]; undefined when the LA-Net branch is off
  Tensor<S> logits;  // [N,K]
  Tensor<S> probs;   // [N,K]
};

// The full framework: shared feature extractor, auxiliary lesion-aware branch,
// and the mask-attention classifier.
template <typename S>
struct LesionModel {
  ModelConfig cfg;
  Fex<S> fex;
  std::optional<LaNet<S>> lanet;
  Classifier<S> classifier;

  static LesionModel build(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    LesionModel m;
    m.cfg = cfg;
    m.fex = Fex<S>::build(cfg.fex, rng);
    if (cfg.use_lanet) {
      m.lanet = LaNet<S>::build(cfg.fex, rng, cfg.cam_reduction, cfg.cam_shared, cfg.use_cam,
                                cfg.use_sam);
    }
    m.classifier = Classifier<S>::build(rng, cfg.num_classes, cfg.fex.top_channels());
    return m;
  }

  ModelOutput<S> forward(const Tensor<S>& images, NormMode mode) {
    ModelOutput<S> out;
    out.pyramid = fex.extract(images, mode);
    Tensor<S> f_top = out.pyramid.top();
    if (lanet) {
      out.mask = lanet->predict(out.pyramid, mode);
      if (cfg.use_mam) f_top = mam_enhance(f_top, out.mask);
    }
    out.logits = classifier.logits(f_top);
    out.probs = softmax(out.logits, 1);
    return out;
  }

  ParamList<S> parameters() const {
    ParamList<S> out;
    fex.collect("fex", out);
    if (lanet) lanet->collect("lanet", out);
    classifier.collect("classifier", out);
    return out;
  }

  // Parameters of the localization path only (stage-1 training).
  ParamList<S> localization_parameters() const {
    ParamList<S> out;
    fex.collect("fex", out);
    if (lanet) lanet->collect("lanet", out);
    return out;
  }

  BufferList<S> buffers() {
    BufferList<S> out;
    fex.collect_buffers("fex", out);
    if (lanet) lanet->collect_buffers("lanet", out);
    return out;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.tensor.zero_grad();
  }
};

}  // namespace lesionaware
