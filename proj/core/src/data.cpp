#include "lesionaware/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "lesionaware/image_io.hpp"

namespace lesionaware {

namespace fs = std::filesystem;

int Dataset::num_classes() const {
  int mx = -1;
  for (const auto& s : samples) mx = std::max(mx, s.class_label);
  return mx + 1;
}

int Dataset::located_count() const {
  int n = 0;
  for (const auto& s : samples)
    if (s.location.present()) ++n;
  return n;
}

void SynthConfig::validate() const {
  if (per_class < 1) throw ConfigError("synth: per_class must be >= 1");
  if (image_size < 16) throw ConfigError("synth: image_size must be >= 16");
  if (lesion_contrast <= 0.0 || lesion_contrast >= 1.0) {
    throw ConfigError("synth: lesion_contrast must be in (0,1)");
  }
  if (!(radius_lo > 0.0 && radius_lo <= radius_hi && radius_hi < 0.35)) {
    throw ConfigError("synth: radius range must satisfy 0 < lo <= hi < 0.35");
  }
  if (!(axis_ratio_lo > 0.0 && axis_ratio_lo <= axis_ratio_hi && axis_ratio_hi <= 1.0)) {
    throw ConfigError("synth: axis ratio range must satisfy 0 < lo <= hi <= 1");
  }
  if (spike_amplitude <= 0.0 || spike_amplitude >= 0.6) {
    throw ConfigError("synth: spike_amplitude must be in (0, 0.6)");
  }
  if (speckle < 0.0 || speckle > 0.5) throw ConfigError("synth: speckle must be in [0, 0.5]");
}

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kBackground = 0.62;

struct LesionGeometry {
  double cx, cy;          // center, pixels
  double a, b;            // semi-axes, pixels
  double phi;             // orientation
  double amplitude = 0.0; // radial perturbation (0 for benign)
  double hk[3] = {0, 0, 0};
  double hphase[3] = {0, 0, 0};
  double hweight[3] = {0, 0, 0};

  double boundary(double theta) const {
    double p = 0.0;
    for (int j = 0; j < 3; ++j) p += hweight[j] * std::sin(hk[j] * theta + hphase[j]);
    return 1.0 + amplitude * p;
  }

  bool inside(double px, double py) const {
    const double dx = px - cx, dy = py - cy;
    const double c = std::cos(phi), s = std::sin(phi);
    const double u = (dx * c + dy * s) / a;
    const double v = (-dx * s + dy * c) / b;
    const double rho = std::hypot(u, v);
    if (rho == 0.0) return true;
    return rho <= boundary(std::atan2(v, u));
  }
};

LesionGeometry draw_geometry(Rng& rng, const SynthConfig& cfg, bool malignant) {
  const double m = static_cast<double>(cfg.image_size);
  LesionGeometry g;
  g.cx = m * rng.uniform(0.38, 0.62);
  g.cy = m * rng.uniform(0.38, 0.62);
  g.a = m * rng.uniform(cfg.radius_lo, cfg.radius_hi);
  g.b = g.a * rng.uniform(cfg.axis_ratio_lo, cfg.axis_ratio_hi);
  g.phi = rng.uniform(0.0, kPi);
  if (malignant) {
    g.amplitude = cfg.spike_amplitude;
    double total = 0.0;
    for (int j = 0; j < 3; ++j) {
      g.hk[j] = static_cast<double>(rng.uniform_int(4, 9));
      g.hphase[j] = rng.uniform(0.0, 2.0 * kPi);
      g.hweight[j] = rng.uniform(0.5, 1.0);
      total += g.hweight[j];
    }
    for (int j = 0; j < 3; ++j) g.hweight[j] /= total;
  }
  return g;
}

std::string sample_name(int index) {
  std::ostringstream os;
  os << "sample_";
  os.width(4);
  os.fill('0');
  os << index;
  return os.str();
}

float quantize8(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<float>(std::lround(c * 255.0)) / 255.0f;
}

// Continuous-coordinate affine transform of the augmentation: flips, then a
// rotation about the image center. Maps source positions to destination
// positions; the sampler applies its inverse.
struct GeomTransform {
  int w, h;
  bool flip_h, flip_v;
  double cos_t, sin_t;

  // forward: source point -> destination point
  void forward(double sx, double sy, double& dx, double& dy) const {
    double x = flip_h ? static_cast<double>(w) - sx : sx;
    double y = flip_v ? static_cast<double>(h) - sy : sy;
    const double cx = 0.5 * (w - 1), cy = 0.5 * (h - 1);
    dx = cx + cos_t * (x - cx) - sin_t * (y - cy);
    dy = cy + sin_t * (x - cx) + cos_t * (y - cy);
  }

  // inverse: destination pixel center -> source position
  void inverse(double dx, double dy, double& sx, double& sy) const {
    const double cx = 0.5 * (w - 1), cy = 0.5 * (h - 1);
    double x = cx + cos_t * (dx - cx) + sin_t * (dy - cy);
    double y = cy - sin_t * (dx - cx) + cos_t * (dy - cy);
    sx = flip_h ? static_cast<double>(w) - x : x;
    sy = flip_v ? static_cast<double>(h) - y : y;
  }
};

double sample_border0(const std::vector<float>& img, int w, int h, double x, double y) {
  if (x <= -1.0 || y <= -1.0 || x >= static_cast<double>(w) || y >= static_cast<double>(h)) return 0.0;
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0, fy = y - y0;
  const auto pix = [&](int xx, int yy) -> double {
    if (xx < 0 || yy < 0 || xx >= w || yy >= h) return 0.0;
    return static_cast<double>(img[static_cast<std::size_t>(yy) * w + xx]);
  };
  const double top = pix(x0, y0) + (pix(x0 + 1, y0) - pix(x0, y0)) * fx;
  const double bot = pix(x0, y0 + 1) + (pix(x0 + 1, y0 + 1) - pix(x0, y0 + 1)) * fx;
  return top + (bot - top) * fy;
}

}  // namespace

Dataset generate_synthetic(const SynthConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const int m = config.image_size;

  Dataset ds;
  int index = 0;
  for (int cls = 0; cls < 2; ++cls) {
    for (int i = 0; i < config.per_class; ++i) {
      const LesionGeometry geo = draw_geometry(rng, config, cls == 1);
      Sample s;
      s.width = m;
      s.height = m;
      s.class_label = cls;
      s.name = sample_name(index++);
      s.image.resize(static_cast<std::size_t>(m) * m);
      s.location.kind = Location::Kind::kMask;
      s.location.mask.resize(s.image.size());
      for (int y = 0; y < m; ++y) {
        for (int x = 0; x < m; ++x) {
          const bool in = geo.inside(x + 0.5, y + 0.5);
          const double base = kBackground * (in ? 1.0 - config.lesion_contrast : 1.0);
          const double noisy = base * (1.0 + config.speckle * rng.uniform(-1.0, 1.0));
          const std::size_t idx = static_cast<std::size_t>(y) * m + x;
          s.image[idx] = quantize8(noisy);
          s.location.mask[idx] = in ? 1 : 0;
        }
      }
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

Dataset drop_location_labels(const Dataset& dataset, double keep_ratio, std::uint64_t seed) {
  if (keep_ratio < 0.0 || keep_ratio > 1.0) {
    throw ConfigError("drop_location_labels: ratio must be in [0,1]");
  }
  std::vector<int> located;
  for (int i = 0; i < dataset.size(); ++i) {
    if (dataset.samples[static_cast<std::size_t>(i)].location.present()) located.push_back(i);
  }
  Rng rng(seed);
  rng.shuffle(located);
  const int keep = static_cast<int>(std::lround(keep_ratio * static_cast<double>(located.size())));

  std::vector<bool> keeps(static_cast<std::size_t>(dataset.size()), false);
  for (int i = 0; i < keep; ++i) keeps[static_cast<std::size_t>(located[static_cast<std::size_t>(i)])] = true;

  Dataset out = dataset;
  for (int i = 0; i < out.size(); ++i) {
    auto& s = out.samples[static_cast<std::size_t>(i)];
    if (s.location.present() && !keeps[static_cast<std::size_t>(i)]) {
      s.location = Location{};
    }
  }
  return out;
}

std::pair<Dataset, Dataset> split(const Dataset& dataset, double val_fraction, std::uint64_t seed) {
  if (val_fraction <= 0.0 || val_fraction >= 1.0) {
    throw ConfigError("split: val_fraction must be in (0,1)");
  }
  const int k = dataset.num_classes();
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(std::max(k, 1)));
  for (int i = 0; i < dataset.size(); ++i) {
    by_class[static_cast<std::size_t>(dataset.samples[static_cast<std::size_t>(i)].class_label)]
        .push_back(i);
  }
  for (int c = 0; c < k; ++c) {
    if (by_class[static_cast<std::size_t>(c)].size() < 2) {
      throw UsageError("split: class " + std::to_string(c) + " has fewer than 2 samples");
    }
  }

  // Total validation size round(N*fraction), allocated per class by largest
  // remainder so stratification preserves the overall split sizes.
  const int total_val = static_cast<int>(std::lround(val_fraction * dataset.size()));
  std::vector<int> val_count(static_cast<std::size_t>(k), 0);
  std::vector<std::pair<double, int>> remainders;
  int allocated = 0;
  for (int c = 0; c < k; ++c) {
    const double exact = val_fraction * static_cast<double>(by_class[static_cast<std::size_t>(c)].size());
    val_count[static_cast<std::size_t>(c)] = static_cast<int>(std::floor(exact));
    allocated += val_count[static_cast<std::size_t>(c)];
    remainders.push_back({exact - std::floor(exact), c});
  }
  std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (int r = 0; allocated < total_val && r < k; ++r) {
    ++val_count[static_cast<std::size_t>(remainders[static_cast<std::size_t>(r)].second)];
    ++allocated;
  }
  for (int c = 0; c < k; ++c) {
    auto& vc = val_count[static_cast<std::size_t>(c)];
    const int n_c = static_cast<int>(by_class[static_cast<std::size_t>(c)].size());
    vc = std::min(vc, n_c - 1);  // keep at least one training sample per class
  }

  Rng rng(seed);
  std::vector<int> val_idx, train_idx;
  for (int c = 0; c < k; ++c) {
    auto idx = by_class[static_cast<std::size_t>(c)];
    rng.shuffle(idx);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (static_cast<int>(i) < val_count[static_cast<std::size_t>(c)]) {
        val_idx.push_back(idx[i]);
      } else {
        train_idx.push_back(idx[i]);
      }
    }
  }
  std::sort(val_idx.begin(), val_idx.end());
  std::sort(train_idx.begin(), train_idx.end());

  Dataset train, val;
  for (int i : train_idx) train.samples.push_back(dataset.samples[static_cast<std::size_t>(i)]);
  for (int i : val_idx) val.samples.push_back(dataset.samples[static_cast<std::size_t>(i)]);
  return {std::move(train), std::move(val)};
}

AugmentParams draw_augment_params(Rng& rng) {
  AugmentParams p;
  p.rotation_deg = rng.uniform(-15.0, 15.0);
  p.flip_h = rng.coin();
  p.flip_v = rng.coin();
  p.contrast = rng.uniform(0.9, 1.1);
  p.brightness = rng.uniform(-0.1, 0.1);
  return p;
}

Sample augment_with(const Sample& sample, const AugmentParams& params) {
  const bool identity_geom = params.rotation_deg == 0.0 && !params.flip_h && !params.flip_v;
  const bool identity_intensity = params.contrast == 1.0 && params.brightness == 0.0;
  if (identity_geom && identity_intensity) return sample;

  const int w = sample.width, h = sample.height;
  const double theta = params.rotation_deg * kPi / 180.0;
  const GeomTransform t{w, h, params.flip_h, params.flip_v, std::cos(theta), std::sin(theta)};

  Sample out = sample;
  if (!identity_geom) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double sx, sy;
        t.inverse(static_cast<double>(x), static_cast<double>(y), sx, sy);
        out.image[static_cast<std::size_t>(y) * w + x] =
            static_cast<float>(sample_border0(sample.image, w, h, sx, sy));
      }
    }
    if (sample.location.kind == Location::Kind::kMask) {
      std::vector<float> mask_f(sample.location.mask.begin(), sample.location.mask.end());
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          double sx, sy;
          t.inverse(static_cast<double>(x), static_cast<double>(y), sx, sy);
          out.location.mask[static_cast<std::size_t>(y) * w + x] =
              sample_border0(mask_f, w, h, sx, sy) >= 0.5 ? 1 : 0;
        }
      }
    } else if (sample.location.kind == Location::Kind::kBBox) {
      const BBox& b = sample.location.box;
      const double corners[4][2] = {{double(b.x0), double(b.y0)},
                                    {double(b.x1), double(b.y0)},
                                    {double(b.x0), double(b.y1)},
                                    {double(b.x1), double(b.y1)}};
      double mnx = 1e30, mny = 1e30, mxx = -1e30, mxy = -1e30;
      for (const auto& c : corners) {
        double dx, dy;
        t.forward(c[0], c[1], dx, dy);
        mnx = std::min(mnx, dx);
        mny = std::min(mny, dy);
        mxx = std::max(mxx, dx);
        mxy = std::max(mxy, dy);
      }
      BBox nb;
      nb.x0 = std::clamp(static_cast<int>(std::floor(mnx)), 0, w - 1);
      nb.y0 = std::clamp(static_cast<int>(std::floor(mny)), 0, h - 1);
      nb.x1 = std::clamp(static_cast<int>(std::ceil(mxx)), nb.x0 + 1, w);
      nb.y1 = std::clamp(static_cast<int>(std::ceil(mxy)), nb.y0 + 1, h);
      out.location.box = nb;
    }
  }
  if (!identity_intensity) {
    for (auto& v : out.image) {
      v = static_cast<float>(
          std::clamp(params.contrast * static_cast<double>(v) + params.brightness, 0.0, 1.0));
    }
  }
  return out;
}

Sample augment(const Sample& sample, Rng& rng) {
  return augment_with(sample, draw_augment_params(rng));
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  fields.push_back(cur);
  return fields;
}

}  // namespace

void save_dataset(const Dataset& dataset, const fs::path& root) {
  fs::create_directories(root / "images");
  bool any_mask = false;
  for (const auto& s : dataset.samples) any_mask |= s.location.kind == Location::Kind::kMask;
  if (any_mask) fs::create_directories(root / "masks");

  std::ofstream manifest(root / "manifest.csv", std::ios::binary);
  if (!manifest) throw IoError("cannot create manifest in " + root.string());
  manifest << "file,class,loc_type,loc_data\n";

  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const Sample& s = dataset.samples[i];
    const std::string name = s.name.empty() ? sample_name(static_cast<int>(i)) : s.name;
    const std::string image_rel = "images/" + name + ".png";

    GrayImage img;
    img.width = s.width;
    img.height = s.height;
    img.pixels.resize(s.image.size());
    for (std::size_t p = 0; p < s.image.size(); ++p) {
      img.pixels[p] = static_cast<std::uint8_t>(
          std::lround(std::clamp(static_cast<double>(s.image[p]), 0.0, 1.0) * 255.0));
    }
    png_write_gray8(root / image_rel, img);

    manifest << image_rel << ',' << s.class_label << ',';
    switch (s.location.kind) {
      case Location::Kind::kNone:
        manifest << "none,";
        break;
      case Location::Kind::kMask: {
        const std::string mask_rel = "masks/" + name + ".png";
        GrayImage mk;
        mk.width = s.width;
        mk.height = s.height;
        mk.pixels.resize(s.location.mask.size());
        for (std::size_t p = 0; p < mk.pixels.size(); ++p) {
          mk.pixels[p] = s.location.mask[p] ? 255 : 0;
        }
        png_write_gray8(root / mask_rel, mk);
        manifest << "mask," << mask_rel;
        break;
      }
      case Location::Kind::kBBox:
        manifest << "bbox," << s.location.box.x0 << ';' << s.location.box.y0 << ';'
                 << s.location.box.x1 << ';' << s.location.box.y1;
        break;
    }
    manifest << '\n';
  }
  if (!manifest) throw IoError("failed writing manifest in " + root.string());
}

Dataset load_dataset(const fs::path& root) {
  const fs::path manifest_path = root / "manifest.csv";
  std::ifstream manifest(manifest_path, std::ios::binary);
  if (!manifest) throw IoError("missing manifest: " + manifest_path.string());

  std::string line;
  if (!std::getline(manifest, line)) throw IoError("empty manifest: " + manifest_path.string());
  {
    const auto header = split_csv_line(line);
    if (header != std::vector<std::string>{"file", "class", "loc_type", "loc_data"}) {
      throw IoError("malformed manifest header in " + manifest_path.string());
    }
  }

  Dataset ds;
  int line_no = 1;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != 4) {
      throw IoError("manifest line " + std::to_string(line_no) + ": expected 4 fields");
    }
    const std::string& file = fields[0];
    Sample s;

    const fs::path image_path = root / file;
    if (!fs::exists(image_path)) {
      throw IoError("manifest entry '" + file + "': image file not found");
    }
    const GrayImage img = png_read_gray8(image_path);
    s.width = img.width;
    s.height = img.height;
    s.image.resize(img.pixels.size());
    for (std::size_t p = 0; p < img.pixels.size(); ++p) {
      s.image[p] = static_cast<float>(img.pixels[p]) / 255.0f;
    }
    s.name = fs::path(file).stem().string();

    try {
      s.class_label = std::stoi(fields[1]);
    } catch (const std::exception&) {
      throw IoError("manifest entry '" + file + "': malformed class label '" + fields[1] + "'");
    }
    if (s.class_label < 0 || s.class_label > 4096) {
      throw IoError("manifest entry '" + file + "': class label out of range");
    }

    const std::string& loc_type = fields[2];
    if (loc_type == "none") {
      s.location = Location{};
    } else if (loc_type == "mask") {
      const fs::path mask_path = root / fields[3];
      if (!fs::exists(mask_path)) {
        throw IoError("manifest entry '" + file + "': mask file not found: " + fields[3]);
      }
      const GrayImage mk = png_read_gray8(mask_path);
      if (mk.width != s.width || mk.height != s.height) {
        throw IoError("manifest entry '" + file + "': mask dimensions differ from image");
      }
      s.location.kind = Location::Kind::kMask;
      s.location.mask.resize(mk.pixels.size());
      for (std::size_t p = 0; p < mk.pixels.size(); ++p) {
        s.location.mask[p] = mk.pixels[p] >= 128 ? 1 : 0;
      }
    } else if (loc_type == "bbox") {
      BBox b;
      char sep1 = 0, sep2 = 0, sep3 = 0;
      std::istringstream is(fields[3]);
      if (!(is >> b.x0 >> sep1 >> b.y0 >> sep2 >> b.x1 >> sep3 >> b.y1) || sep1 != ';' ||
          sep2 != ';' || sep3 != ';') {
        throw IoError("manifest entry '" + file + "': malformed bbox '" + fields[3] + "'");
      }
      if (b.x0 < 0 || b.y0 < 0 || b.x0 >= b.x1 || b.y0 >= b.y1 || b.x1 > s.width ||
          b.y1 > s.height) {
        throw IoError("manifest entry '" + file + "': bbox outside image bounds");
      }
      s.location.kind = Location::Kind::kBBox;
      s.location.box = b;
    } else {
      throw IoError("manifest entry '" + file + "': unknown loc_type '" + loc_type + "'");
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

std::vector<std::uint8_t> location_to_mask(const Location& loc, int width, int height) {
  if (!loc.present()) throw UsageError("location_to_mask: sample has no location");
  if (loc.kind == Location::Kind::kMask) {
    if (static_cast<int>(loc.mask.size()) != width * height) {
      throw DimensionError("location_to_mask: mask size mismatch");
    }
    return loc.mask;
  }
  std::vector<std::uint8_t> out(static_cast<std::size_t>(width) * height, 0);
  for (int y = loc.box.y0; y < loc.box.y1; ++y) {
    for (int x = loc.box.x0; x < loc.box.x1; ++x) {
      out[static_cast<std::size_t>(y) * width + x] = 1;
    }
  }
  return out;
}

std::vector<std::uint8_t> downsample_mask(const std::vector<std::uint8_t>& mask, int size,
                                          int target) {
  if (static_cast<int>(mask.size()) != size * size) {
    throw DimensionError("downsample_mask: mask size mismatch");
  }
  if (target < 1 || size % target != 0) {
    throw DimensionError("downsample_mask: target must divide mask size");
  }
  const int block = size / target;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(target) * target);
  const double denom = static_cast<double>(block) * block;
  for (int ty = 0; ty < target; ++ty) {
    for (int tx = 0; tx < target; ++tx) {
      int count = 0;
      for (int dy = 0; dy < block; ++dy) {
        for (int dx = 0; dx < block; ++dx) {
          count += mask[static_cast<std::size_t>(ty * block + dy) * size + (tx * block + dx)];
        }
      }
      out[static_cast<std::size_t>(ty) * target + tx] = (count / denom >= 0.5) ? 1 : 0;
    }
  }
  return out;
}

}  // namespace lesionaware
