#pragma once

namespace lesionaware::interp {

// Corner-aligned bilinear sampling grid: source position of output index i is
// i * (in-1)/(out-1), so the first and last samples land exactly on the input
// corners and equal sizes pass through unchanged. A single-sample output reads
// position 0.
inline double source_pos(int out_index, int in_size, int out_size) {
  if (out_size <= 1 || in_size <= 1) return 0.0;
  return static_cast<double>(out_index) * (static_cast<double>(in_size - 1) / static_cast<double>(out_size - 1));
}

struct Taps {
  int lo;       // floor cell
  int hi;       // lo + 1 clamped to the last row/column
  double w_hi;  // weight of hi; weight of lo is 1 - w_hi
};

inline Taps taps(int out_index, int in_size, int out_size) {
  const double pos = source_pos(out_index, in_size, out_size);
  int lo = static_cast<int>(pos);
  if (lo > in_size - 1) lo = in_size - 1;
  const int hi = (lo + 1 < in_size) ? lo + 1 : lo;
  return Taps{lo, hi, pos - static_cast<double>(lo)};
}

// One interpolated value from a row-major [h, w] plane.
template <typename S>
double sample_plane(const S* plane, int h, int w, int oy, int ox, int out_h, int out_w) {
  const Taps ty = taps(oy, h, out_h);
  const Taps tx = taps(ox, w, out_w);
  const double v00 = static_cast<double>(plane[ty.lo * w + tx.lo]);
  const double v01 = static_cast<double>(plane[ty.lo * w + tx.hi]);
  const double v10 = static_cast<double>(plane[ty.hi * w + tx.lo]);
  const double v11 = static_cast<double>(plane[ty.hi * w + tx.hi]);
  const double top = v00 + (v01 - v00) * tx.w_hi;
  const double bot = v10 + (v11 - v10) * tx.w_hi;
  return top + (bot - top) * ty.w_hi;
}

}  // namespace lesionaware::interp
