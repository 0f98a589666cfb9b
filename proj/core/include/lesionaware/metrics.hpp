#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lesionaware/data.hpp"

namespace lesionaware {

// Confusion counts with malignant as the positive class.
struct ConfusionCounts {
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::int64_t total() const { return tp + fp + tn + fn; }
};

// Precision, specificity, sensitivity, F1; zero denominators yield 0 with the
// matching degeneracy flag set instead of an error.
struct ClassificationMetrics {
  double precision = 0.0;
  double specificity = 0.0;
  double sensitivity = 0.0;
  double f1 = 0.0;
  bool precision_degenerate = false;
  bool specificity_degenerate = false;
  bool sensitivity_degenerate = false;
  bool f1_degenerate = false;
};

ClassificationMetrics classification_metrics(const ConfusionCounts& counts);

// Bilinear upsample of a probability map to the input-image resolution, then
// threshold: probability >= threshold -> lesion.
std::vector<std::uint8_t> binarize_mask(const std::vector<double>& probs, int in_size,
                                        double threshold, int out_h, int out_w);

// Tight axis-aligned bounds over all positive pixels; empty mask -> nullopt.
// The connected-component variant keeps only the largest 4-connected region.
std::optional<BBox> mask_to_bbox(const std::vector<std::uint8_t>& mask, int width, int height,
                                 bool largest_component_only = false);

struct JsiResult {
  double value = 0.0;
  bool both_empty = false;  // degenerate agreement: defined as 1
};

JsiResult jsi_masks(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b);
JsiResult jsi_boxes(const BBox& a, const BBox& b);

// Dice = 2*JSI / (1 + JSI).
double dice_from_jsi(double jsi);

// Mean with a 95% t-interval over repeats (n-1 degrees of freedom); a single
// run yields a width-0 interval.
struct Interval {
  double mean = 0.0;
  double half_width = 0.0;
};

Interval aggregate_interval(const std::vector<double>& values);

// Per-run evaluation output of the full pipeline.
struct RunMetrics {
  ConfusionCounts counts;
  ClassificationMetrics classification;
  double accuracy = 0.0;
  double jsi_mean = 0.0;
  int jsi_count = 0;   // located samples contributing to jsi_mean
  bool has_jsi = false;
};

// Aggregation of repeated runs into mean +/- 95% interval rows.
struct EvalReport {
  std::vector<RunMetrics> runs;
  Interval accuracy, precision, specificity, sensitivity, f1;
  Interval jsi;
  bool has_jsi = false;

  std::string to_csv() const;
  std::string to_table() const;
};

EvalReport aggregate_runs(const std::vector<RunMetrics>& runs);

}  // namespace lesionaware
