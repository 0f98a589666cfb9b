#include "lesionaware/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "lesionaware/errors.hpp"
#include "lesionaware/interp.hpp"

namespace lesionaware {

ClassificationMetrics classification_metrics(const ConfusionCounts& c) {
  if (c.tp < 0 || c.fp < 0 || c.tn < 0 || c.fn < 0) {
    throw UsageError("classification_metrics: negative count");
  }
  ClassificationMetrics m;
  if (c.tp + c.fp > 0) {
    m.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  } else {
    m.precision_degenerate = true;
  }
  if (c.tn + c.fp > 0) {
    m.specificity = static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
  } else {
    m.specificity_degenerate = true;
  }
  if (c.tp + c.fn > 0) {
    m.sensitivity = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  } else {
    m.sensitivity_degenerate = true;
  }
  if (m.precision + m.sensitivity > 0.0) {
    m.f1 = 2.0 * m.precision * m.sensitivity / (m.precision + m.sensitivity);
  } else {
    m.f1_degenerate = true;
  }
  return m;
}

std::vector<std::uint8_t> binarize_mask(const std::vector<double>& probs, int in_size,
                                        double threshold, int out_h, int out_w) {
  if (threshold <= 0.0 || threshold >= 1.0) {
    throw ConfigError("binarize_mask: threshold must be in (0,1)");
  }
  if (static_cast<int>(probs.size()) != in_size * in_size) {
    throw DimensionError("binarize_mask: probability grid size mismatch");
  }
  std::vector<std::uint8_t> out(static_cast<std::size_t>(out_h) * out_w);
  for (int y = 0; y < out_h; ++y) {
    for (int x = 0; x < out_w; ++x) {
      const double v = interp::sample_plane(probs.data(), in_size, in_size, y, x, out_h, out_w);
      out[static_cast<std::size_t>(y) * out_w + x] = v >= threshold ? 1 : 0;
    }
  }
  return out;
}

namespace {

// Largest 4-connected positive region (flood fill).
std::vector<std::uint8_t> largest_component(const std::vector<std::uint8_t>& mask, int w, int h) {
  std::vector<int> label(mask.size(), 0);
  int next = 0;
  std::int64_t best_size = 0;
  int best_label = 0;
  std::vector<std::int64_t> stack;
  for (std::int64_t start = 0; start < static_cast<std::int64_t>(mask.size()); ++start) {
    if (!mask[start] || label[start]) continue;
    ++next;
    std::int64_t size = 0;
    stack.push_back(start);
    label[start] = next;
    while (!stack.empty()) {
      const std::int64_t p = stack.back();
      stack.pop_back();
      ++size;
      const int x = static_cast<int>(p % w), y = static_cast<int>(p / w);
      const int nx[4] = {x - 1, x + 1, x, x};
      const int ny[4] = {y, y, y - 1, y + 1};
      for (int d = 0; d < 4; ++d) {
        if (nx[d] < 0 || nx[d] >= w || ny[d] < 0 || ny[d] >= h) continue;
        const std::int64_t q = static_cast<std::int64_t>(ny[d]) * w + nx[d];
        if (mask[q] && !label[q]) {
          label[q] = next;
          stack.push_back(q);
        }
      }
    }
    if (size > best_size) {
      best_size = size;
      best_label = next;
    }
  }
  std::vector<std::uint8_t> out(mask.size(), 0);
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] = label[i] == best_label && best_label ? 1 : 0;
  return out;
}

}  // namespace

std::optional<BBox> mask_to_bbox(const std::vector<std::uint8_t>& mask, int width, int height,
                                 bool largest_component_only) {
  if (static_cast<int>(mask.size()) != width * height) {
    throw DimensionError("mask_to_bbox: mask size mismatch");
  }
  std::vector<std::uint8_t> component;
  if (largest_component_only) component = largest_component(mask, width, height);
  const std::vector<std::uint8_t>& m = largest_component_only ? component : mask;
  int x0 = width, y0 = height, x1 = -1, y1 = -1;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      if (m[static_cast<std::size_t>(y) * width + x]) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
      }
    }
  }
  if (x1 < 0) return std::nullopt;
  return BBox{x0, y0, x1 + 1, y1 + 1};
}

JsiResult jsi_masks(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  if (a.size() != b.size()) throw DimensionError("jsi: mask sizes differ");
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool pa = a[i] != 0, pb = b[i] != 0;
    inter += pa && pb;
    uni += pa || pb;
  }
  if (uni == 0) return {1.0, true};
  return {static_cast<double>(inter) / static_cast<double>(uni), false};
}

JsiResult jsi_boxes(const BBox& a, const BBox& b) {
  const std::int64_t area_a = a.area(), area_b = b.area();
  if (area_a == 0 && area_b == 0) return {1.0, true};
  const int ix0 = std::max(a.x0, b.x0), iy0 = std::max(a.y0, b.y0);
  const int ix1 = std::min(a.x1, b.x1), iy1 = std::min(a.y1, b.y1);
  const std::int64_t inter = (ix1 > ix0 && iy1 > iy0)
                                 ? static_cast<std::int64_t>(ix1 - ix0) * (iy1 - iy0)
                                 : 0;
  const std::int64_t uni = area_a + area_b - inter;
  return {static_cast<double>(inter) / static_cast<double>(uni), false};
}

double dice_from_jsi(double jsi) { return 2.0 * jsi / (1.0 + jsi); }

namespace {

// Two-sided 97.5% Student-t quantiles for 1..30 degrees of freedom.
constexpr double kT975[31] = {0.0,    12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365,
                              2.306,  2.262,  2.228, 2.201, 2.179, 2.160, 2.145, 2.131,
                              2.120,  2.110,  2.101, 2.093, 2.086, 2.080, 2.074, 2.069,
                              2.064,  2.060,  2.056, 2.052, 2.048, 2.045, 2.042};

double t975(int dof) {
  if (dof < 1) return 0.0;
  if (dof <= 30) return kT975[dof];
  return 1.960;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << std::fixed << v;
  return os.str();
}

}  // namespace

Interval aggregate_interval(const std::vector<double>& values) {
  if (values.empty()) throw UsageError("aggregate_interval: no runs");
  Interval out;
  double acc = 0.0;
  for (double v : values) acc += v;
  out.mean = acc / static_cast<double>(values.size());
  if (values.size() == 1) return out;
  double ss = 0.0;
  for (double v : values) ss += (v - out.mean) * (v - out.mean);
  const double sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
  out.half_width = t975(static_cast<int>(values.size()) - 1) * sd /
                   std::sqrt(static_cast<double>(values.size()));
  return out;
}

EvalReport aggregate_runs(const std::vector<RunMetrics>& runs) {
  if (runs.empty()) throw UsageError("aggregate_runs: no runs");
  EvalReport rep;
  rep.runs = runs;
  const auto collect = [&](auto getter) {
    std::vector<double> vs;
    for (const auto& r : runs) vs.push_back(getter(r));
    return aggregate_interval(vs);
  };
  rep.accuracy = collect([](const RunMetrics& r) { return r.accuracy; });
  rep.precision = collect([](const RunMetrics& r) { return r.classification.precision; });
  rep.specificity = collect([](const RunMetrics& r) { return r.classification.specificity; });
  rep.sensitivity = collect([](const RunMetrics& r) { return r.classification.sensitivity; });
  rep.f1 = collect([](const RunMetrics& r) { return r.classification.f1; });
  rep.has_jsi = std::all_of(runs.begin(), runs.end(), [](const RunMetrics& r) { return r.has_jsi; });
  if (rep.has_jsi) rep.jsi = collect([](const RunMetrics& r) { return r.jsi_mean; });
  return rep;
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "metric,mean,ci95_half_width\n";
  os << "accuracy," << fmt(accuracy.mean) << ',' << fmt(accuracy.half_width) << '\n';
  os << "precision," << fmt(precision.mean) << ',' << fmt(precision.half_width) << '\n';
  os << "specificity," << fmt(specificity.mean) << ',' << fmt(specificity.half_width) << '\n';
  os << "sensitivity," << fmt(sensitivity.mean) << ',' << fmt(sensitivity.half_width) << '\n';
  os << "f1," << fmt(f1.mean) << ',' << fmt(f1.half_width) << '\n';
  if (has_jsi) {
    os << "jsi," << fmt(jsi.mean) << ',' << fmt(jsi.half_width) << '\n';
    os << "dice," << fmt(dice_from_jsi(jsi.mean)) << ",\n";
  }
  os << "runs," << runs.size() << ",\n";
  return os.str();
}

std::string EvalReport::to_table() const {
  std::ostringstream os;
  os << "metric        mean      +/-95%\n";
  const auto row = [&](const char* name, const Interval& iv) {
    os << std::left << std::setw(13) << name << fmt(iv.mean) << "  " << fmt(iv.half_width) << '\n';
  };
  row("accuracy", accuracy);
  row("precision", precision);
  row("specificity", specificity);
  row("sensitivity", sensitivity);
  row("f1", f1);
  if (has_jsi) {
    row("jsi", jsi);
  } else {
    os << "jsi          (no located samples)\n";
  }
  os << "runs         " << runs.size() << '\n';
  return os.str();
}

}  // namespace lesionaware
