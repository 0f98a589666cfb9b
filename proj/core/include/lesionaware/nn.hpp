#pragma once

#include <string>
#include <utility>
#include <vector>

#include "lesionaware/rng.hpp"
#include "lesionaware/tensor.hpp"

namespace lesionaware {

// Named views of a model's trainable parameters and of its non-trainable
// buffers (batch-norm running statistics). Order is construction order and is
// the canonical checkpoint order.
template <typename S>
struct NamedParam {
  std::string name;
  Tensor<S> tensor;
};

template <typename S>
struct NamedBuffer {
  std::string name;
  std::vector<S>* values;
};

template <typename S>
using ParamList = std::vector<NamedParam<S>>;
template <typename S>
using BufferList = std::vector<NamedBuffer<S>>;

// Glorot/Xavier uniform: U[-a, a] with a = sqrt(6 / (fan_in + fan_out)).
template <typename S>
std::vector<S> xavier_uniform(Rng& rng, std::int64_t count, std::int64_t fan_in, std::int64_t fan_out) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<S> v(static_cast<std::size_t>(count));
  for (auto& x : v) x = static_cast<S>(rng.uniform(-a, a));
  return v;
}

template <typename S>
struct Conv2dLayer {
  Tensor<S> weight;  // [C_out, C_in, k, k]
  Tensor<S> bias;    // [C_out] or undefined
  int stride = 1;
  int padding = 0;

  static Conv2dLayer make(Rng& rng, int c_out, int c_in, int k, int stride, int padding,
                          bool with_bias) {
    Conv2dLayer l;
    const std::int64_t fan_in = static_cast<std::int64_t>(c_in) * k * k;
    const std::int64_t fan_out = static_cast<std::int64_t>(c_out) * k * k;
    l.weight = Tensor<S>::from_vector(
        {c_out, c_in, k, k},
        xavier_uniform<S>(rng, static_cast<std::int64_t>(c_out) * c_in * k * k, fan_in, fan_out),
        /*requires_grad=*/true);
    if (with_bias) l.bias = Tensor<S>::zeros({c_out}, /*requires_grad=*/true);
    l.stride = stride;
    l.padding = padding;
    return l;
  }

  Tensor<S> operator()(const Tensor<S>& x) const { return conv2d(x, weight, bias, stride, padding); }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
  }
};

template <typename S>
struct BatchNormLayer {
  Tensor<S> gamma;
  Tensor<S> beta;
  BatchNormState<S> state;
  double eps = 1e-5;
  double momentum = 0.1;

  static BatchNormLayer make(int channels) {
    BatchNormLayer l;
    l.gamma = Tensor<S>::filled({channels}, S(1), /*requires_grad=*/true);
    l.beta = Tensor<S>::zeros({channels}, /*requires_grad=*/true);
    l.state = BatchNormState<S>(channels);
    return l;
  }

  Tensor<S> operator()(const Tensor<S>& x, NormMode mode) {
    return batch_norm(x, gamma, beta, state, mode, eps, momentum);
  }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }

  void collect_buffers(const std::string& prefix, BufferList<S>& out) {
    out.push_back({prefix + ".running_mean", &state.running_mean});
    out.push_back({prefix + ".running_var", &state.running_var});
  }
};

template <typename S>
struct LinearLayer {
  Tensor<S> weight;  // [K, F]
  Tensor<S> bias;    // [K]

  static LinearLayer make(Rng& rng, int out_features, int in_features, bool with_bias = true) {
    LinearLayer l;
    l.weight = Tensor<S>::from_vector(
        {out_features, in_features},
        xavier_uniform<S>(rng, static_cast<std::int64_t>(out_features) * in_features, in_features,
                          out_features),
        /*requires_grad=*/true);
    if (with_bias) l.bias = Tensor<S>::zeros({out_features}, /*requires_grad=*/true);
    return l;
  }

  Tensor<S> operator()(const Tensor<S>& x) const { return linear(x, weight, bias); }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
  }
};

}  // namespace lesionaware
