#pragma once

#include <string>
#include <vector>

#include "lesionaware/model.hpp"
#include "lesionaware/trainer.hpp"

namespace lesionaware {

struct Heatmap {
  int width = 0, height = 0;
  std::vector<double> values;  // min-max normalized to [0,1]
  int class_index = 0;
  std::string source_layer;
  bool degenerate = false;  // map was uniformly zero before normalization
};

// Grad-CAM over the last convolutional activation of FEX (the top pyramid
// map): w_k = spatial mean of d(logit_c)/dA_k, map = relu(sum_k w_k A_k),
// bilinearly upsampled to the input size and min-max normalized. The score is
// the pre-softmax logit of the target class.
template <typename S>
Heatmap grad_cam(LesionModel<S>& model, const Sample& sample, int class_index) {
  if (class_index < 0 || class_index >= model.cfg.num_classes) {
    throw UsageError("grad_cam: class index " + std::to_string(class_index) + " out of range");
  }
  const int input_size = model.cfg.fex.input_size;
  std::vector<Sample> batch{sample};
  auto out = model.forward(images_to_tensor<S>(batch, input_size), NormMode::kEval);

  // d logit_c / d f_n via a one-hot pick of the class logit.
  Tensor<S> score = narrow(out.logits, 1, class_index, 1);
  backward(score);

  const Tensor<S>& activation = out.pyramid.top();
  const int c = activation.dim(1), sn = activation.dim(2);
  const auto& a = activation.values();
  const auto g = activation.grad();
  for (auto& p : model.parameters()) p.tensor.zero_grad();

  // Channel weights: spatial mean of the gradient.
  std::vector<double> w(static_cast<std::size_t>(c), 0.0);
  const int plane = sn * sn;
  for (int ci = 0; ci < c; ++ci) {
    double acc = 0.0;
    for (int p = 0; p < plane; ++p) acc += static_cast<double>(g[static_cast<std::size_t>(ci) * plane + p]);
    w[static_cast<std::size_t>(ci)] = acc / plane;
  }

  std::vector<double> cam(static_cast<std::size_t>(plane), 0.0);
  for (int p = 0; p < plane; ++p) {
    double acc = 0.0;
    for (int ci = 0; ci < c; ++ci) {
      acc += w[static_cast<std::size_t>(ci)] * static_cast<double>(a[static_cast<std::size_t>(ci) * plane + p]);
    }
    cam[static_cast<std::size_t>(p)] = acc > 0.0 ? acc : 0.0;
  }

  Heatmap heat;
  heat.width = input_size;
  heat.height = input_size;
  heat.class_index = class_index;
  heat.source_layer = "fex.stage" + std::to_string(model.cfg.fex.n_stages);
  heat.values.resize(static_cast<std::size_t>(input_size) * input_size);
  for (int y = 0; y < input_size; ++y) {
    for (int x = 0; x < input_size; ++x) {
      heat.values[static_cast<std::size_t>(y) * input_size + x] =
          interp::sample_plane(cam.data(), sn, sn, y, x, input_size, input_size);
    }
  }

  double mn = heat.values[0], mx = heat.values[0];
  for (double v : heat.values) {
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  if (mx == mn) {
    std::fill(heat.values.begin(), heat.values.end(), 0.0);
    heat.degenerate = true;
    return heat;
  }
  for (double& v : heat.values) v = (v - mn) / (mx - mn);
  return heat;
}

// Share of total heatmap mass inside the ground-truth region, plus whether the
// peak cell lies inside it.
struct HeatmapOverlap {
  double mass_inside = 0.0;
  bool peak_inside = false;
};

inline HeatmapOverlap heatmap_overlap(const Heatmap& heat, const std::vector<std::uint8_t>& gt_mask) {
  if (gt_mask.size() != heat.values.size()) throw DimensionError("heatmap_overlap: size mismatch");
  HeatmapOverlap o;
  double total = 0.0, inside = 0.0;
  std::size_t peak = 0;
  for (std::size_t i = 0; i < heat.values.size(); ++i) {
    total += heat.values[i];
    if (gt_mask[i]) inside += heat.values[i];
    if (heat.values[i] > heat.values[peak]) peak = i;
  }
  o.mass_inside = total > 0.0 ? inside / total : 0.0;
  o.peak_inside = gt_mask[peak] != 0;
  return o;
}

}  // namespace lesionaware
