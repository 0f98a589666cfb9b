#include <doctest.h>

#include "support/gradsuites.hpp"

using namespace lesionaware;
using namespace lesionaware::testing;

// Fast sweep over every finite-difference suite; the acceptance binary runs
// the same suites at >= 20 instances each.
TEST_CASE("analytic gradients match central finite differences") {
  for (const auto& suite : gradient_suites()) {
    CAPTURE(suite.name);
    const GradCheckResult r = suite.run(3, 42);
    CHECK_MESSAGE(r.ok, suite.name, ": worst rel error ", r.worst_rel_error, " at ", r.worst_at);
  }
}

TEST_CASE("gradient accumulation semantics hold through composite graphs") {
  Rng rng(7);
  auto x = random_tensor(rng, {2, 2});
  auto loss = sum(mul(x, x));
  backward(loss);
  const auto g1 = x.grad();
  backward(loss);
  const auto g2 = x.grad();
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g2[i] == doctest::Approx(2.0 * g1[i]));
}
