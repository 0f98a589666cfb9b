#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lesionaware/classifier.hpp"
#include "lesionaware/losses.hpp"
#include "lesionaware/model.hpp"
#include "support/gradcheck.hpp"

namespace lesionaware::testing {

// One named finite-difference suite: runs `instances` random cases and keeps
// the worst relative error. These back both the unit tests (few instances)
// and the acceptance gradient criterion (>= 20 each).
struct GradSuite {
  std::string name;
  std::function<GradCheckResult(int instances, std::uint64_t seed)> run;
};

// Values pairwise separated by at least `gap` (random order), so max-pool
// argmax choices and ReLU signs sit away from finite-difference kinks.
inline Tensor<double> spread_tensor(Rng& rng, const Shape& shape, double gap = 5e-3) {
  const std::int64_t n = shape_numel(shape);
  std::vector<double> values(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    double v = (static_cast<double>(i) + 0.5) * gap - 0.5 * static_cast<double>(n) * gap;
    if (std::fabs(v) < gap) v += 2.0 * gap;  // keep clear of the ReLU kink
    values[static_cast<std::size_t>(i)] = v;
  }
  rng.shuffle(values);
  return Tensor<double>::from_vector(shape, std::move(values), true);
}

inline GradCheckResult worst_of(const GradCheckResult& a, const GradCheckResult& b) {
  GradCheckResult out = a.worst_rel_error >= b.worst_rel_error ? a : b;
  out.ok = a.ok && b.ok;
  return out;
}

template <typename MakeCase>
GradCheckResult run_instances(int instances, std::uint64_t seed, MakeCase make_case) {
  GradCheckResult worst;
  for (int i = 0; i < instances; ++i) {
    Rng rng(seed + static_cast<std::uint64_t>(i) * 1000003ULL);
    worst = worst_of(worst, make_case(rng));
  }
  return worst;
}

inline std::vector<GradSuite> gradient_suites() {
  std::vector<GradSuite> suites;

  suites.push_back({"conv2d", [](int n, std::uint64_t seed) {
    return run_instances(n, seed, [](Rng& rng) {
      const int b = rng.uniform_int(1, 2), cin = rng.uniform_int(1, 3), cout = rng.uniform_int(1, 3);
      const int h = rng.uniform_int(4, 6), w = rng.uniform_int(4, 6);
      const int k = rng.uniform_int(1, 3);
      const int stride = rng.uniform_int(1, 2), pad = rng.uniform_int(0, 1);
      auto x = random_tensor(rng, {b, cin, h, w});
      auto wt = random_tensor(rng, {cout, cin, k, k});
      auto bias = random_tensor(rng, {cout});
      return check_gradients({x, wt, bias},
                             [&] { return sum(mul(conv2d(x, wt, bias, stride, pad),
                                                  conv2d(x, wt, bias, stride, pad))); });
    });
  }});

  suites.push_back({"batch_norm_train", [](int n, std::uint64_t seed) {
    return run_instances(n, seed, [](Rng& rng) {
      const int b = rng.uniform_int(2, 3), c = rng.uniform_int(1, 3);
      auto x = random_tensor(rng, {b, c, 3, 3});
      auto gamma = random_tensor(rng, {c}, 0.5, 1.5);
      auto beta = random_tensor(rng, {c});
      return check_gradients({x, gamma, beta}, [&] {
        BatchNormState<double> state(c);
        auto y = batch_norm(x, gamma, beta, state, NormMode::kTrain, 1e-5, 0.1);
        return sum(mul(y, y));
      });
    });
  }});

  suites.push_back({"pool2d_max", [](int n, std::uint64_t seed) {
    return run_instances(n, seed, [](Rng& rng) {
      auto x = spread_tensor(rng, {2, 2, 4, 4});
      return check_gradients({x}, [&] { return sum(mul(pool2d(x, PoolKind::kMax, 2),
                                                       pool2d(x, PoolKind::kMax, 2))); });
    });
  }});

  suites.push_back({"pool2d_avg", [](int n, std::uint64_t seed) {
    return run_instances(n, seed, [](Rng& rng) {
      auto x = random_tensor(rng, {2, 2, 4, 4});
      return check_gradients({x}, [&] { return sum(mul(pool2d(x, PoolKind::kAvg, 2),
                                                       pool2d(x, PoolKind::kAvg, 2))); });
    });
  }});

  suites.push_back({"global_pool_max", [](int n, std::uint64_t seed) {
    return run_instances(n, seed, [](Rng& rng) {
      auto x = spread_tensor(rng, {2, 3, 3, 3});
      return check_gradients({x}, [&] { return sum(mul(global_pool2d(x, PoolKind::kMax),
                                                       global_pool2d(x, PoolKind::kMax))); });
    });
  }});

  suites.push_back({"global_pool_avg", [](int n, std::uint64_t seed) {
    return run_instances(n, seed, [](Rng& rng) {
      auto x = random_tensor(rng, {2, 3, 3, 3});
      return check_gradients({x}, [&] { return sum(mul(global_pool2d(x, PoolKind::kAvg),
                                                       global_pool2d(x, PoolKind::kAvg))); });
    });
  }});

  suites.push_back({"channel_pool_max", [](int n, std::uint64_t seed) {
    return run_instances(n, seed, [](Rng& rng) {
      auto x = spread_tensor(rng, {2, 4, 3, 3});
      return check_gradients({x}, [&] { return sum(mul(channel_pool(x, PoolKind::kMax),
                                                       channel_pool(x, PoolKind::kMax))); });
    });
  }});

  suites.push_back({"channel_pool_avg", [](int n, std::uint64_t seed) {
    return run_instances(n, seed, [](Rng& rng) {
      auto x = random_tensor(rng, {2, 4, 3, 3});
      return check_gradients({x}, [&] { return sum(mul(channel_pool(x, PoolKind::kAvg),
                                                       channel_pool(x, PoolKind::kAvg))); });
    });
  }});

  suites.push_back({"resize_bilinear", [](int n, std::uint64_t seed) {
    return run_instances(n, seed, [](Rng& rng) {
      const int oh = rng.uniform_int(2, 7), ow = rng.uniform_int(2, 7);
      auto x = random_tensor(rng, {1, 2, 4, 3});
      return check_gradients({x}, [&] { return sum(mul(resize_bilinear(x, oh, ow),
                                                       resize_bilinear(x, oh, ow))); });
    });
  }});

  suites.push_back({"relu", [](int n, std::uint64_t seed) {
    return run_instances(n, seed, [](Rng& rng) {
      auto x = spread_tensor(rng, {3, 5});
      return check_gradients({x}, [&] { return sum(mul(relu(x), relu(x))); });
    });
  }});

  suites.push_back({"sigmoid", [](int n, std::uint64_t seed) {
    return run_instances(n, seed, [](Rng& rng) {
      auto x = random_tensor(rng, {3, 5}, -3, 3);
      return check_gradients({x}, [&] { return sum(mul(sigmoid(x), sigmoid(x))); });
    });
  }});

  suites.push_back({"softmax", [](int n, std::uint64_t seed) {
    return run_instances(n, seed, [](Rng& rng) {
      auto x = random_tensor(rng, {3, 4}, -2, 2);
      auto w = random_tensor(rng, {3, 4}, 0.1, 1.0, false);
      return check_gradients({x}, [&] { return sum(mul(softmax(x, 1), w)); });
    });
  }});

  suites.push_back({"concat", [](int n, std::uint64_t seed) {
    return run_instances(n, seed, [](Rng& rng) {
      auto a = random_tensor(rng, {2, 2, 2, 2});
      auto b = random_tensor(rng, {2, 3, 2, 2});
      return check_gradients({a, b}, [&] {
        auto c = concat<double>({a, b}, 1);
        return sum(mul(c, c));
      });
    });
  }});

  suites.push_back({"add_broadcast", [](int n, std::uint64_t seed) {
    return run_instances(n, seed, [](Rng& rng) {
      auto a = random_tensor(rng, {2, 3, 1, 4});
      auto b = random_tensor(rng, {2, 1, 5, 4});
      return check_gradients({a, b}, [&] { return sum(mul(add(a, b), add(a, b))); });
    });
  }});

  suites.push_back({"mul_broadcast", [](int n, std::uint64_t seed) {
    return run_instances(n, seed, [](Rng& rng) {
      auto a = random_tensor(rng, {2, 3, 1, 4});
      auto b = random_tensor(rng, {2, 1, 5, 4});
      return check_gradients({a, b}, [&] { return sum(mul(mul(a, b), mul(a, b))); });
    });
  }});

  suites.push_back({"matmul", [](int n, std::uint64_t seed) {
    return run_instances(n, seed, [](Rng& rng) {
      auto a = random_tensor(rng, {3, 4});
      auto b = random_tensor(rng, {4, 5});
      return check_gradients({a, b}, [&] { return sum(mul(matmul(a, b), matmul(a, b))); });
    });
  }});

  suites.push_back({"linear", [](int n, std::uint64_t seed) {
    return run_instances(n, seed, [](Rng& rng) {
      auto x = random_tensor(rng, {3, 4});
      auto w = random_tensor(rng, {2, 4});
      auto b = random_tensor(rng, {2});
      return check_gradients({x, w, b}, [&] { return sum(mul(linear(x, w, b), linear(x, w, b))); });
    });
  }});

  suites.push_back({"narrow", [](int n, std::uint64_t seed) {
    return run_instances(n, seed, [](Rng& rng) {
      auto x = random_tensor(rng, {4, 3});
      return check_gradients({x}, [&] {
        auto y = narrow(x, 0, 1, 2);
        return sum(mul(y, y));
      });
    });
  }});

  // Composite head: mask attention into the classification cross-entropy,
  // gradients with respect to the mask, the features, and the FC parameters.
  suites.push_back({"mam_classify_head", [](int n, std::uint64_t seed) {
    return run_instances(n, seed, [](Rng& rng) {
      const int c = 3, s = 4, k = 2, b = 2;
      auto f = random_tensor(rng, {b, c, s, s});
      auto mask = random_tensor(rng, {b, 1, s, s}, 0.05, 0.95);
      auto w = random_tensor(rng, {k, c});
      auto bias = random_tensor(rng, {k});
      std::vector<double> onehot(static_cast<std::size_t>(b) * k, 0.0);
      for (int i = 0; i < b; ++i) onehot[static_cast<std::size_t>(i) * k + rng.uniform_int(0, k - 1)] = 1.0;
      auto labels = Tensor<double>::from_vector({b, k}, std::move(onehot));
      return check_gradients({f, mask, w, bias}, [&] {
        auto att = mam_enhance(f, mask);
        auto pooled = reshape(global_pool2d(att, PoolKind::kAvg), {b, c});
        auto probs = softmax(linear(pooled, w, bias), 1);
        return classification_loss(probs, labels);
      }, 1e-5, 1e-6);
    });
  }});

  // Composite head: localization BCE of a sigmoid conv prediction.
  suites.push_back({"bce_sigmoid_conv_head", [](int n, std::uint64_t seed) {
    return run_instances(n, seed, [](Rng& rng) {
      auto x = random_tensor(rng, {1, 1, 4, 4});
      auto w = random_tensor(rng, {1, 1, 3, 3});
      auto b = random_tensor(rng, {1});
      std::vector<double> gt(16);
      for (auto& v : gt) v = rng.coin() ? 1.0 : 0.0;
      auto target = Tensor<double>::from_vector({1, 1, 4, 4}, std::move(gt));
      return check_gradients({x, w, b}, [&] {
        return localization_loss(sigmoid(conv2d(x, w, b, 1, 1)), target);
      }, 1e-5, 1e-6);
    });
  }});

  // Composite head: the full hybrid loss through a tiny model. Pseudo-labels
  // are frozen from the unperturbed forward pass, matching their constant
  // (detached) role in training.
  suites.push_back({"hybrid_full_model_head", [](int n, std::uint64_t seed) {
    return run_instances(n, seed, [](Rng& rng) {
      ModelConfig cfg;
      cfg.fex.n_stages = 2;
      cfg.fex.channels = {4, 6};
      cfg.fex.blocks = {1, 1};
      cfg.fex.stem_channels = 4;
      cfg.fex.input_size = 16;
      cfg.num_classes = 2;
      cfg.cam_reduction = 2;
      auto model = LesionModel<double>::build(cfg, rng.next_u64());

      const int m = 2, mu = 1, batch = m + mu;
      auto images = random_tensor(rng, {batch, 1, 16, 16}, 0.0, 1.0, false);
      const int sn = cfg.fex.top_size();
      std::vector<double> gt(static_cast<std::size_t>(m) * sn * sn);
      for (auto& v : gt) v = rng.coin() ? 1.0 : 0.0;
      auto gt_masks = Tensor<double>::from_vector({m, 1, sn, sn}, std::move(gt));
      std::vector<double> onehot(static_cast<std::size_t>(batch) * 2, 0.0);
      for (int i = 0; i < batch; ++i) onehot[static_cast<std::size_t>(i) * 2 + rng.uniform_int(0, 1)] = 1.0;
      auto labels = Tensor<double>::from_vector({batch, 2}, std::move(onehot));

      Tensor<double> frozen_pseudo;
      {
        NoGradGuard ng;
        auto out = model.forward(images, NormMode::kEval);
        frozen_pseudo = binarize(narrow(out.mask, 0, m, mu), 0.8);
      }

      std::vector<Tensor<double>> leaves;
      for (auto& p : model.parameters()) leaves.push_back(p.tensor);
      return check_gradients(leaves, [&] {
        auto out = model.forward(images, NormMode::kEval);
        auto cls = classification_loss(out.probs, labels);
        auto loc = localization_loss(narrow(out.mask, 0, 0, m), gt_masks);
        auto pseudo = localization_loss(narrow(out.mask, 0, m, mu), frozen_pseudo);
        auto semi = add(loc, mul_scalar(pseudo, 0.1));
        return hybrid_loss(cls, semi, 0.5);
      }, 1e-5, 1e-6);
    });
  }});

  return suites;
}

}  // namespace lesionaware::testing
