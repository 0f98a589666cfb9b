#pragma once

#include <cmath>
#include <vector>

#include "lesionaware/tensor.hpp"

namespace lesionaware::testing {

// Direct-summation convolution oracle: plain window loops, no shared code with
// the library implementation.
inline std::vector<double> oracle_conv2d(const std::vector<double>& x, int n, int cin, int h, int w,
                                         const std::vector<double>& weight,
                                         const std::vector<double>& bias, int cout, int k,
                                         int stride, int padding) {
  const int oh = (h + 2 * padding - k) / stride + 1;
  const int ow = (w + 2 * padding - k) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(n) * cout * oh * ow, 0.0);
  for (int ni = 0; ni < n; ++ni)
    for (int oc = 0; oc < cout; ++oc)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          double acc = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(oc)];
          for (int ic = 0; ic < cin; ++ic)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = oy * stride + ky - padding;
                const int ix = ox * stride + kx - padding;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                acc += x[((static_cast<std::size_t>(ni) * cin + ic) * h + iy) * w + ix] *
                       weight[((static_cast<std::size_t>(oc) * cin + ic) * k + ky) * k + kx];
              }
          out[((static_cast<std::size_t>(ni) * cout + oc) * oh + oy) * ow + ox] = acc;
        }
  return out;
}

inline double oracle_sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Two-layer perceptron with ReLU, matching the channel-attention MLP layout:
// w1 [hidden, c], w2 [c, hidden].
inline std::vector<double> oracle_mlp(const std::vector<double>& in, const std::vector<double>& w1,
                                      const std::vector<double>& b1, const std::vector<double>& w2,
                                      const std::vector<double>& b2, int c, int hidden) {
  std::vector<double> mid(static_cast<std::size_t>(hidden), 0.0);
  for (int j = 0; j < hidden; ++j) {
    double acc = b1[static_cast<std::size_t>(j)];
    for (int i = 0; i < c; ++i) acc += w1[static_cast<std::size_t>(j) * c + i] * in[static_cast<std::size_t>(i)];
    mid[static_cast<std::size_t>(j)] = acc > 0.0 ? acc : 0.0;
  }
  std::vector<double> out(static_cast<std::size_t>(c), 0.0);
  for (int i = 0; i < c; ++i) {
    double acc = b2[static_cast<std::size_t>(i)];
    for (int j = 0; j < hidden; ++j) acc += w2[static_cast<std::size_t>(i) * hidden + j] * mid[static_cast<std::size_t>(j)];
    out[static_cast<std::size_t>(i)] = acc;
  }
  return out;
}

}  // namespace lesionaware::testing
