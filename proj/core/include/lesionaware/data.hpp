#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lesionaware/errors.hpp"
#include "lesionaware/rng.hpp"

namespace lesionaware {

// Axis-aligned box in pixel coordinates, half-open: pixels with
// x0 <= x < x1 and y0 <= y < y1 are inside.
struct BBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  std::int64_t area() const { return static_cast<std::int64_t>(width()) * height(); }
};

// Optional location supervision: absent, a full binary mask, or a box.
struct Location {
  enum class Kind { kNone, kMask, kBBox };
  Kind kind = Kind::kNone;
  std::vector<std::uint8_t> mask;  // row-major H*W, values 0/1 (kMask)
  BBox box;                        // (kBBox)

  bool present() const { return kind != Kind::kNone; }
};

// One supervised example. The class label is always present; location is the
// only optional field.
struct Sample {
  int width = 0, height = 0;
  std::vector<float> image;  // row-major, values in [0,1]
  int class_label = 0;
  Location location;
  std::string name;  // stable identifier used for file naming
};

struct Dataset {
  std::vector<Sample> samples;

  int size() const { return static_cast<int>(samples.size()); }
  int num_classes() const;
  int located_count() const;
};

// Synthetic ultrasound-like phantom generator: multiplicative speckle
// background with one darker lesion per image. Benign lesions are smooth
// ellipses; malignant lesions add an angular boundary perturbation.
struct SynthConfig {
  int per_class = 100;
  int image_size = 64;
  double lesion_contrast = 0.45;     // relative darkening inside the lesion
  double radius_lo = 0.16;           // semi-major axis, fraction of image size
  double radius_hi = 0.27;
  double axis_ratio_lo = 0.55;       // benign eccentricity range (minor/major)
  double axis_ratio_hi = 0.95;
  double spike_amplitude = 0.25;     // malignant boundary perturbation, > 0
  double speckle = 0.10;             // multiplicative noise level
  std::uint64_t seed = 0;

  void validate() const;
};

Dataset generate_synthetic(const SynthConfig& config);

// Keeps a seed-determined subset of exactly round(ratio * located) location
// labels and discards the rest; class labels are untouched. For a fixed seed
// the kept set at a smaller ratio is a subset of the kept set at a larger one.
Dataset drop_location_labels(const Dataset& dataset, double keep_ratio, std::uint64_t seed);

// Stratified train/validation split; total validation size is
// round(val_fraction * N), allocated per class by largest remainder.
std::pair<Dataset, Dataset> split(const Dataset& dataset, double val_fraction, std::uint64_t seed);

// Augmentation draw: rotation in [-15, +15] degrees, each flip with
// probability 1/2, intensity jitter i' = clamp(c*i + b) with c in [0.9, 1.1]
// and b in [-0.1, 0.1]. The same geometric transform applies to the location.
struct AugmentParams {
  double rotation_deg = 0.0;
  bool flip_h = false;
  bool flip_v = false;
  double contrast = 1.0;
  double brightness = 0.0;
};

AugmentParams draw_augment_params(Rng& rng);
Sample augment_with(const Sample& sample, const AugmentParams& params);
Sample augment(const Sample& sample, Rng& rng);

// Directory format: manifest.csv with header `file,class,loc_type,loc_data`;
// images and masks are 8-bit grayscale PNG files referenced by relative path;
// boxes are `x0;y0;x1;y1`.
void save_dataset(const Dataset& dataset, const std::filesystem::path& root);
Dataset load_dataset(const std::filesystem::path& root);

// Rasterizes a location to a binary grid at the sample's own resolution.
std::vector<std::uint8_t> location_to_mask(const Location& loc, int width, int height);

// Downsamples a full-resolution binary mask to the network target size by
// area averaging followed by thresholding at 0.5 (ties count as lesion).
std::vector<std::uint8_t> downsample_mask(const std::vector<std::uint8_t>& mask, int size,
                                          int target);

}  // namespace lesionaware
