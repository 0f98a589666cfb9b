#pragma once

#include <algorithm>

#include "lesionaware/metrics.hpp"
#include "lesionaware/model.hpp"
#include "lesionaware/trainer.hpp"

namespace lesionaware {

// Full-pipeline scoring of one trained model on a dataset: argmax class
// prediction, 0.5-binarized upsampled lesion mask, JSI against the location
// label (box-vs-box when the label is a box and `as_bbox` is set). Malignant
// (class 1) is the positive class.
template <typename S>
RunMetrics evaluate_run(LesionModel<S>& model, const Dataset& dataset, bool as_bbox) {
  NoGradGuard ng;
  RunMetrics run;
  const int input_size = model.cfg.fex.input_size;
  const int k = model.cfg.num_classes;
  const int sn = model.cfg.fex.top_size();
  int correct = 0;
  double jsi_sum = 0.0;

  const int chunk = 16;
  for (int start = 0; start < dataset.size(); start += chunk) {
    const int stop = std::min(dataset.size(), start + chunk);
    std::vector<Sample> batch(dataset.samples.begin() + start, dataset.samples.begin() + stop);
    auto out = model.forward(images_to_tensor<S>(batch, input_size), NormMode::kEval);

    for (int i = 0; i < static_cast<int>(batch.size()); ++i) {
      const Sample& s = batch[static_cast<std::size_t>(i)];
      int pred = 0;
      for (int j = 1; j < k; ++j) {
        if (out.probs.values()[static_cast<std::size_t>(i) * k + j] >
            out.probs.values()[static_cast<std::size_t>(i) * k + pred]) {
          pred = j;
        }
      }
      if (pred == s.class_label) ++correct;
      const bool actual_pos = s.class_label == 1;
      const bool pred_pos = pred == 1;
      if (actual_pos && pred_pos) ++run.counts.tp;
      if (actual_pos && !pred_pos) ++run.counts.fn;
      if (!actual_pos && pred_pos) ++run.counts.fp;
      if (!actual_pos && !pred_pos) ++run.counts.tn;

      if (out.mask.defined() && s.location.present()) {
        std::vector<double> probs(static_cast<std::size_t>(sn) * sn);
        for (int p = 0; p < sn * sn; ++p) {
          probs[static_cast<std::size_t>(p)] =
              static_cast<double>(out.mask.values()[static_cast<std::size_t>(i) * sn * sn + p]);
        }
        const auto pred_mask = binarize_mask(probs, sn, 0.5, input_size, input_size);
        double jsi = 0.0;
        if (s.location.kind == Location::Kind::kBBox && as_bbox) {
          const auto pred_box = mask_to_bbox(pred_mask, input_size, input_size);
          jsi = pred_box ? jsi_boxes(*pred_box, s.location.box).value : 0.0;
        } else {
          jsi = jsi_masks(pred_mask, location_to_mask(s.location, input_size, input_size)).value;
        }
        jsi_sum += jsi;
        ++run.jsi_count;
      }
    }
  }

  run.accuracy = dataset.size() > 0 ? static_cast<double>(correct) / dataset.size() : 0.0;
  run.classification = classification_metrics(run.counts);
  if (run.jsi_count > 0) {
    run.jsi_mean = jsi_sum / run.jsi_count;
    run.has_jsi = true;
  }
  return run;
}

}  // namespace lesionaware
