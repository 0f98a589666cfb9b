#pragma once

#include <string>

#include "lesionaware/nn.hpp"

namespace lesionaware {

// Mask attention: f_att = f_n * (1 + mask), the single-channel lesion mask
// broadcast over channels. Exactly the identity for a zero mask.
template <typename S>
Tensor<S> mam_enhance(const Tensor<S>& f_top, const Tensor<S>& mask) {
  if (f_top.rank() != 4 || mask.rank() != 4 || mask.dim(1) != 1 || mask.dim(0) != f_top.dim(0) ||
      mask.dim(2) != f_top.dim(2) || mask.dim(3) != f_top.dim(3)) {
    throw DimensionError("mam: mask " + shape_str(mask.shape()) + " does not match features " +
                         shape_str(f_top.shape()));
  }
  return mul(f_top, add_scalar(mask, S(1)));
}

// Classification head: global average pooling, one fully-connected layer of K
// outputs, softmax.
template <typename S>
struct Classifier {
  LinearLayer<S> fc;
  int num_classes = 2;

  static Classifier build(Rng& rng, int num_classes, int in_channels) {
    if (num_classes < 2) throw ConfigError("classifier: K must be >= 2");
    Classifier c;
    c.num_classes = num_classes;
    c.fc = LinearLayer<S>::make(rng, num_classes, in_channels);
    return c;
  }

  Tensor<S> logits(const Tensor<S>& f_att) const {
    if (f_att.rank() != 4 || f_att.dim(1) != fc.weight.dim(1)) {
      throw DimensionError("classifier: expected " + std::to_string(fc.weight.dim(1)) +
                           " channels, got " + shape_str(f_att.shape()));
    }
    const int n = f_att.dim(0);
    Tensor<S> pooled = reshape(global_pool2d(f_att, PoolKind::kAvg), {n, fc.weight.dim(1)});
    return fc(pooled);
  }

  Tensor<S> probabilities(const Tensor<S>& f_att) const { return softmax(logits(f_att), 1); }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    fc.collect(prefix + ".fc", out);
  }
};

}  // namespace lesionaware
