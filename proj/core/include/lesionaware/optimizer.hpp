#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "lesionaware/nn.hpp"

namespace lesionaware {

// Adam with bias correction. Moment buffers are keyed by parameter order, so a
// given optimizer instance must always be stepped with the same parameter list.
template <typename S>
class Adam {
 public:
  struct Slot {
    std::vector<S> m, v;
  };

  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (lr <= 0.0) throw ConfigError("adam: lr must be > 0");
  }

  void step(const ParamList<S>& params) {
    if (slots_.empty()) {
      slots_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        slots_[i].m.assign(params[i].tensor.values().size(), S(0));
        slots_[i].v.assign(params[i].tensor.values().size(), S(0));
      }
    }
    if (slots_.size() != params.size()) {
      throw UsageError("adam: parameter list changed between steps");
    }
    // Validate every gradient before mutating any state.
    for (const auto& p : params) {
      for (const S g : p.tensor.grad()) {
        if (!std::isfinite(static_cast<double>(g))) {
          throw NumericError("adam: non-finite gradient in " + p.name);
        }
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& slot = slots_[i];
      auto& values = params[i].tensor.node()->values;
      const auto grad = params[i].tensor.grad();
      for (std::size_t j = 0; j < values.size(); ++j) {
        const double g = static_cast<double>(grad[j]);
        const double m = beta1_ * static_cast<double>(slot.m[j]) + (1.0 - beta1_) * g;
        const double v = beta2_ * static_cast<double>(slot.v[j]) + (1.0 - beta2_) * g * g;
        slot.m[j] = static_cast<S>(m);
        slot.v[j] = static_cast<S>(v);
        const double update = lr_ * (m / bc1) / (std::sqrt(v / bc2) + eps_);
        values[j] = static_cast<S>(static_cast<double>(values[j]) - update);
      }
    }
  }

  std::int64_t steps() const { return t_; }
  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) {
    if (lr <= 0.0) throw ConfigError("adam: lr must be > 0");
    lr_ = lr;
  }
  const std::vector<Slot>& slots() const { return slots_; }
  double beta1() const { return beta1_; }
  double beta2() const { return beta2_; }
  double epsilon() const { return eps_; }

  // Restores serialized state (checkpoint resume).
  void restore(std::vector<Slot> slots, std::int64_t t) {
    slots_ = std::move(slots);
    t_ = t;
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<Slot> slots_;
};

}  // namespace lesionaware
