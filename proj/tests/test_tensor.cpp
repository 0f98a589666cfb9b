#include <doctest.h>

#include "lesionaware/tensor.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace lesionaware;
using lesionaware::testing::oracle_conv2d;
using lesionaware::testing::random_tensor;

using T = Tensor<double>;

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(T::from_vector({2, 2}, {1.0, 2.0, 3.0}), DimensionError);
  CHECK_THROWS_AS(T::from_vector({2}, {1.0, std::nan("")}), NumericError);
  CHECK_THROWS_AS(T::zeros({0, 3}), DimensionError);
  auto t = T::zeros({2, 3}, true);
  CHECK(t.grad().size() == 6);
}

TEST_CASE("conv2d identity kernel passes input through") {
  Rng rng(11);
  auto x = random_tensor(rng, {1, 1, 5, 7}, 0.0, 1.0, false);
  auto w = T::filled({1, 1, 1, 1}, 1.0);
  auto b = T::zeros({1});
  auto y = conv2d(x, w, b, 1, 0);
  CHECK(y.shape() == Shape{1, 1, 5, 7});
  for (std::size_t i = 0; i < y.values().size(); ++i) CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("conv2d window-sum example") {
  auto x = T::from_vector({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto w = T::filled({1, 1, 2, 2}, 1.0);
  auto y = conv2d(x, w, 1, 0);
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  CHECK(y.values() == std::vector<double>{12, 16, 24, 28});
}

TEST_CASE("conv2d output shape formula") {
  Rng rng(3);
  auto x = random_tensor(rng, {1, 3, 8, 8}, -1, 1, false);
  auto w = random_tensor(rng, {5, 3, 3, 3}, -1, 1, false);
  auto y = conv2d(x, w, 2, 1);
  CHECK(y.shape() == Shape{1, 5, 4, 4});
}

TEST_CASE("conv2d matches the direct-summation oracle on random instances") {
  Rng rng(17);
  for (int inst = 0; inst < 10; ++inst) {
    const int n = rng.uniform_int(1, 2), cin = rng.uniform_int(1, 3), cout = rng.uniform_int(1, 3);
    const int h = rng.uniform_int(4, 7), w = rng.uniform_int(4, 7);
    const int k = rng.uniform_int(1, 3), stride = rng.uniform_int(1, 2),
              pad = rng.uniform_int(0, 1);
    auto x = random_tensor(rng, {n, cin, h, w}, -1, 1, false);
    auto wt = random_tensor(rng, {cout, cin, k, k}, -1, 1, false);
    auto b = random_tensor(rng, {cout}, -1, 1, false);
    auto y = conv2d(x, wt, b, stride, pad);
    const auto expect =
        oracle_conv2d(x.values(), n, cin, h, w, wt.values(), b.values(), cout, k, stride, pad);
    REQUIRE(y.values().size() == expect.size());
    for (std::size_t i = 0; i < expect.size(); ++i) {
      CHECK(y.values()[i] == doctest::Approx(expect[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("conv2d shape errors") {
  Rng rng(5);
  auto x = random_tensor(rng, {1, 2, 4, 4}, -1, 1, false);
  auto w_badc = random_tensor(rng, {1, 3, 3, 3}, -1, 1, false);
  CHECK_THROWS_AS(conv2d(x, w_badc, 1, 0), DimensionError);
  auto w_big = random_tensor(rng, {1, 2, 5, 5}, -1, 1, false);
  CHECK_THROWS_AS(conv2d(x, w_big, 1, 0), DimensionError);
  CHECK_NOTHROW(conv2d(x, w_big, 1, 1));  // padding makes it fit
}

TEST_CASE("conv2d linearity in the input") {
  Rng rng(23);
  auto w = random_tensor(rng, {2, 2, 3, 3}, -1, 1, false);
  auto x = random_tensor(rng, {1, 2, 6, 6}, -1, 1, false);
  auto y = random_tensor(rng, {1, 2, 6, 6}, -1, 1, false);
  const double a = 0.37, b = -1.21;
  auto lhs = conv2d(add(mul_scalar(x, a), mul_scalar(y, b)), w, 1, 1);
  auto rhs = add(mul_scalar(conv2d(x, w, 1, 1), a), mul_scalar(conv2d(y, w, 1, 1), b));
  for (std::size_t i = 0; i < lhs.values().size(); ++i) {
    CHECK(lhs.values()[i] == doctest::Approx(rhs.values()[i]).epsilon(1e-9));
  }
}

TEST_CASE("batch_norm normalizes and applies affine") {
  SUBCASE("constant channels go to beta in train mode") {
    auto x = T::filled({2, 2, 2, 2}, 3.25);
    auto gamma = T::filled({2}, 1.0);
    auto beta = T::zeros({2});
    BatchNormState<double> state(2);
    auto y = batch_norm(x, gamma, beta, state, NormMode::kTrain);
    for (double v : y.values()) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("affine map: normalized 1 with gamma 2 beta 3 gives 5") {
    // values {1,3}: mean 2, population variance 1 -> normalized {-1,+1}
    auto x = T::from_vector({2, 1, 1, 1}, {1.0, 3.0});
    auto gamma = T::filled({1}, 2.0);
    auto beta = T::filled({1}, 3.0);
    BatchNormState<double> state(1);
    auto y = batch_norm(x, gamma, beta, state, NormMode::kTrain, 1e-12);
    CHECK(y.values()[0] == doctest::Approx(1.0).epsilon(1e-6));   // 2*(-1)+3
    CHECK(y.values()[1] == doctest::Approx(5.0).epsilon(1e-6));   // 2*(+1)+3
  }
  SUBCASE("eps must be positive") {
    auto x = T::filled({1, 1, 2, 2}, 1.0);
    auto gamma = T::filled({1}, 1.0);
    auto beta = T::zeros({1});
    BatchNormState<double> state(1);
    CHECK_THROWS_AS(batch_norm(x, gamma, beta, state, NormMode::kTrain, 0.0), NumericError);
  }
  SUBCASE("running stats feed eval mode") {
    Rng rng(7);
    auto x = random_tensor(rng, {2, 1, 3, 3}, 0, 1, false);
    auto gamma = T::filled({1}, 1.0);
    auto beta = T::zeros({1});
    BatchNormState<double> state(1);
    batch_norm(x, gamma, beta, state, NormMode::kTrain, 1e-5, /*momentum=*/1.0);
    auto y = batch_norm(x, gamma, beta, state, NormMode::kEval, 1e-5);
    double mean = 0;
    for (double v : y.values()) mean += v;
    CHECK(mean / y.numel() == doctest::Approx(0.0).epsilon(1e-9));
  }
}

TEST_CASE("pooling definitions") {
  auto x = T::from_vector({1, 1, 1, 3}, {0.1, 0.9, 0.5});
  CHECK(global_pool2d(x, PoolKind::kMax).values()[0] == 0.9);
  auto y = T::from_vector({1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK(global_pool2d(y, PoolKind::kAvg).values()[0] == doctest::Approx(2.5));
  CHECK(pool2d(y, PoolKind::kMax, 2).values()[0] == 4.0);
  CHECK(pool2d(y, PoolKind::kMax, 2).shape() == Shape{1, 1, 1, 1});
  CHECK_THROWS_AS(pool2d(y, PoolKind::kMax, 3), DimensionError);
  auto z = T::from_vector({1, 1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  CHECK_THROWS_AS(pool2d(z, PoolKind::kAvg, 3), DimensionError);  // 3 does not divide 4
}

TEST_CASE("channel_pool reduces over channels only") {
  SUBCASE("single channel is the identity") {
    Rng rng(9);
    auto x = random_tensor(rng, {1, 1, 3, 3}, -1, 1, false);
    for (auto kind : {PoolKind::kMax, PoolKind::kAvg}) {
      auto y = channel_pool(x, kind);
      CHECK(y.shape() == Shape{1, 1, 3, 3});
      for (std::size_t i = 0; i < x.values().size(); ++i) CHECK(y.values()[i] == x.values()[i]);
    }
  }
  SUBCASE("per-pixel reduction values") {
    auto x = T::from_vector({1, 3, 1, 1}, {-1, 4, 2});
    CHECK(channel_pool(x, PoolKind::kMax).values()[0] == 4.0);
    CHECK(channel_pool(x, PoolKind::kAvg).values()[0] == doctest::Approx(5.0 / 3.0).epsilon(1e-12));
  }
  SUBCASE("constants are preserved by both kinds") {
    auto x = T::filled({2, 4, 2, 2}, 0.77);
    for (auto kind : {PoolKind::kMax, PoolKind::kAvg}) {
      for (double v : channel_pool(x, kind).values()) CHECK(v == doctest::Approx(0.77).epsilon(1e-12));
    }
  }
}

TEST_CASE("resize_bilinear corner-aligned") {
  SUBCASE("identity when sizes match") {
    Rng rng(31);
    auto x = random_tensor(rng, {1, 2, 4, 5}, -1, 1, false);
    auto y = resize_bilinear(x, 4, 5);
    for (std::size_t i = 0; i < x.values().size(); ++i) CHECK(y.values()[i] == x.values()[i]);
  }
  SUBCASE("constants stay constant") {
    auto x = T::filled({1, 1, 3, 3}, 0.4);
    for (double v : resize_bilinear(x, 7, 2).values()) CHECK(v == doctest::Approx(0.4).epsilon(1e-12));
  }
  SUBCASE("2x2 to 3x3 hand values") {
    auto x = T::from_vector({1, 1, 2, 2}, {0, 1, 2, 3});
    auto y = resize_bilinear(x, 3, 3);
    const std::vector<double> expect{0, 0.5, 1, 1, 1.5, 2, 2, 2.5, 3};
    for (std::size_t i = 0; i < expect.size(); ++i) {
      CHECK(y.values()[i] == doctest::Approx(expect[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("activations") {
  auto x = T::from_vector({3}, {0.0, -2.0, 3.0});
  auto s = sigmoid(x);
  CHECK(s.values()[0] == doctest::Approx(0.5).epsilon(1e-12));
  auto r = relu(x);
  CHECK(r.values()[1] == 0.0);
  CHECK(r.values()[2] == 3.0);
  auto sm = softmax(T::from_vector({1, 3}, {0, 0, 0}), 1);
  for (double v : sm.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  SUBCASE("sigmoid output stays in (0,1) and softmax rows sum to 1") {
    Rng rng(41);
    auto big = random_tensor(rng, {4, 7}, -50.0, 50.0, false);
    for (double v : sigmoid(big).values()) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
    auto p = softmax(big, 1);
    for (int i = 0; i < 4; ++i) {
      double row = 0;
      for (int j = 0; j < 7; ++j) row += p.values()[static_cast<std::size_t>(i) * 7 + j];
      CHECK(std::fabs(row - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("backward basics") {
  SUBCASE("sum gives unit gradients") {
    auto w = T::from_vector({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    backward(sum(w));
    for (double g : w.grad()) CHECK(g == 1.0);
  }
  SUBCASE("untouched parameters keep zero gradients") {
    auto w = T::from_vector({3}, {1, 2, 3}, true);
    auto x = T::from_vector({3}, {4, 5, 6}, true);
    backward(sum(x));
    for (double g : w.grad()) CHECK(g == 0.0);
  }
  SUBCASE("backward rejects non-scalars") {
    auto w = T::from_vector({2}, {1, 2}, true);
    CHECK_THROWS_AS(backward(add(w, w)), UsageError);
  }
  SUBCASE("gradients accumulate across calls and reset on zero_grad") {
    auto w = T::from_vector({2}, {1, 2}, true);
    auto loss = sum(mul_scalar(w, 3.0));
    backward(loss);
    backward(loss);
    CHECK(w.grad()[0] == 6.0);
    w.zero_grad();
    CHECK(w.grad()[0] == 0.0);
  }
}

TEST_CASE("deterministic op outputs for identical inputs") {
  const auto run = [] {
    Rng rng(99);
    auto x = random_tensor(rng, {2, 3, 6, 6}, -1, 1, false);
    auto w = random_tensor(rng, {4, 3, 3, 3}, -1, 1, false);
    auto y = conv2d(x, w, 1, 1);
    return sigmoid(global_pool2d(y, PoolKind::kAvg)).values();
  };
  const auto a = run();
  const auto b = run();
  CHECK(a == b);
}

TEST_CASE("broadcast add and mul") {
  auto x = T::from_vector({2, 2, 1, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  auto bias = T::from_vector({2, 1, 1, 1}, {10, 20});  // per-channel
  auto y = add(x, bias);
  CHECK(y.values() == std::vector<double>{11, 12, 23, 24, 15, 16, 27, 28});
  auto m = mul(x, bias);
  CHECK(m.values() == std::vector<double>{10, 20, 60, 80, 50, 60, 140, 160});
  CHECK_THROWS_AS(add(T::zeros({2, 3}), T::zeros({2, 4})), DimensionError);
}

TEST_CASE("concat and narrow round trip") {
  Rng rng(55);
  auto a = random_tensor(rng, {2, 2, 2, 2}, -1, 1, false);
  auto b = random_tensor(rng, {2, 3, 2, 2}, -1, 1, false);
  auto c = concat<double>({a, b}, 1);
  CHECK(c.shape() == Shape{2, 5, 2, 2});
  auto a2 = narrow(c, 1, 0, 2);
  auto b2 = narrow(c, 1, 2, 3);
  CHECK(a2.values() == a.values());
  CHECK(b2.values() == b.values());
}
