#pragma once

#include "lesionaware/tensor.hpp"

namespace lesionaware {

inline constexpr double kProbClamp = 1e-7;

// Full binary cross-entropy between a predicted probability map and a binary
// target, averaged over every pixel and batch element. Probabilities are
// clamped to [eps, 1-eps] so the loss stays finite at saturated predictions.
template <typename S>
Tensor<S> localization_loss(const Tensor<S>& pred, const Tensor<S>& target) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("localization_loss: prediction " + shape_str(pred.shape()) +
                         " vs target " + shape_str(target.shape()));
  }
  for (const S v : target.values()) {
    if (v != S(0) && v != S(1)) {
      throw UsageError("localization_loss: target mask must be binary");
    }
  }
  const S eps = static_cast<S>(kProbClamp);
  Tensor<S> t = target.requires_grad() ? target.detach() : target;
  Tensor<S> p = clamp(pred, eps, S(1) - eps);
  Tensor<S> pos = mul(t, log_op(p));
  Tensor<S> neg = mul(rsub_scalar(S(1), t), log_op(clamp(rsub_scalar(S(1), pred), eps, S(1) - eps)));
  return mul_scalar(mean(add(pos, neg)), S(-1));
}

// Cross-entropy between row-stochastic class probabilities and one-hot labels,
// averaged over the batch.
template <typename S>
Tensor<S> classification_loss(const Tensor<S>& probs, const Tensor<S>& onehot) {
  if (probs.rank() != 2 || probs.shape() != onehot.shape()) {
    throw DimensionError("classification_loss: probs " + shape_str(probs.shape()) + " vs labels " +
                         shape_str(onehot.shape()));
  }
  const int n = probs.dim(0), k = probs.dim(1);
  for (int i = 0; i < n; ++i) {
    int ones = 0;
    for (int j = 0; j < k; ++j) {
      const S v = onehot.values()[static_cast<std::size_t>(i) * k + j];
      if (v == S(1)) {
        ++ones;
      } else if (v != S(0)) {
        throw UsageError("classification_loss: labels must be one-hot");
      }
    }
    if (ones != 1) throw UsageError("classification_loss: labels must be one-hot");
  }
  const S eps = static_cast<S>(kProbClamp);
  Tensor<S> t = onehot.requires_grad() ? onehot.detach() : onehot;
  Tensor<S> picked = sum(mul(t, log_op(clamp(probs, eps, S(1) - eps))));
  return mul_scalar(picked, S(-1) / static_cast<S>(n));
}

// Pseudo-label binarization: pixel -> 1 iff p >= tau. The result carries no
// gradient history; pseudo-labels are constants.
template <typename S>
Tensor<S> binarize(const Tensor<S>& pred, double tau) {
  if (tau <= 0.0 || tau >= 1.0) throw ConfigError("binarize: tau must be in (0,1)");
  std::vector<S> out(pred.values().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<double>(pred.values()[i]) >= tau ? S(1) : S(0);
  }
  return Tensor<S>::from_vector(pred.shape(), std::move(out));
}

// Semi-supervised localization loss: supervised BCE on the located part plus
// alpha-weighted BCE of the unlabeled part against its own binarized
// prediction. Undefined tensors mark an empty part.
template <typename S>
Tensor<S> semi_localization_loss(const Tensor<S>& pred_labeled, const Tensor<S>& gt_labeled,
                                 const Tensor<S>& pred_unlabeled, double alpha, double tau) {
  if (alpha < 0.0) throw ConfigError("semi_localization_loss: alpha must be >= 0");
  const bool has_labeled = pred_labeled.defined();
  const bool has_unlabeled = pred_unlabeled.defined();
  if (!has_labeled && !has_unlabeled) {
    throw UsageError("semi_localization_loss: both batch parts are empty");
  }
  Tensor<S> total;
  if (has_labeled) total = localization_loss(pred_labeled, gt_labeled);
  if (has_unlabeled) {
    Tensor<S> pseudo = binarize(pred_unlabeled, tau);
    Tensor<S> unlabeled = mul_scalar(localization_loss(pred_unlabeled, pseudo), static_cast<S>(alpha));
    total = has_labeled ? add(total, unlabeled) : unlabeled;
  }
  return total;
}

// L_hyb = lambda * L_cls + (1 - lambda) * L'_loc.
template <typename S>
Tensor<S> hybrid_loss(const Tensor<S>& cls_term, const Tensor<S>& semi_loc_term, double lambda) {
  if (lambda < 0.0 || lambda > 1.0) throw ConfigError("hybrid_loss: lambda must be in [0,1]");
  return add(mul_scalar(cls_term, static_cast<S>(lambda)),
             mul_scalar(semi_loc_term, static_cast<S>(1.0 - lambda)));
}

}  // namespace lesionaware
