#include <doctest.h>

#include <numeric>

#include "helpers.hpp"
#include "blo/testbed.hpp"

using namespace blo;
using namespace blo::test;

TEST_SUITE("core") {
  TEST_CASE("counter arithmetic") {
    OracleCounters a{1, 2, 3, 4, 5, 6};
    OracleCounters b{1, 1, 1, 1, 1, 1};
    CHECK((a - b) + b == a);
    CHECK(a.gradients() == 3);
    CHECK(a.total() == 21);
  }

  TEST_CASE("every oracle call increments exactly one counter") {
    const auto tp = testbed::make_quad_bilevel({});
    Oracle<double> o(tp.problem);
    const Vec t = tp.theta0, p = Vec::Zero(tp.problem.dim_phi);
    auto step = [&](auto&& call) {
      const auto before = o.counters().total();
      call();
      CHECK(o.counters().total() == before + 1);
    };
    step([&] { o.upper_value(t, p); });
    step([&] { o.upper_grad_theta(t, p); });
    step([&] { o.upper_grad_phi(t, p); });
    step([&] { o.lower_grad_phi(t, p); });
    step([&] { o.hvp(t, p, p); });
    step([&] { o.cross_jvp(t, p, p); });
    CHECK(o.counters().hvps == 1);
    CHECK(o.counters().jvps == 1);
  }

  TEST_CASE("batch_mean with the explicit full batch matches the empty batch bitwise") {
    const Index n = 7;
    auto f = [](Index i) { return Vec::Constant(3, 0.1 * double(i * i) + 1.0 / 3.0).eval(); };
    std::vector<Index> all(n);
    std::iota(all.begin(), all.end(), Index{0});
    const Vec implicit_all = batch_mean(n, Batch{}, f);
    const Vec explicit_all = batch_mean(n, Batch(all), f);
    CHECK(implicit_all == explicit_all);
    CHECK_THROWS_AS(batch_mean(0, Batch{}, f), ArgumentError);
  }

  TEST_CASE("sample_batch is sorted, distinct and reproducible") {
    const auto a = sample_batch(50, 10, 42);
    const auto b = sample_batch(50, 10, 42);
    CHECK(a.indices == b.indices);
    CHECK(std::is_sorted(a.indices.begin(), a.indices.end()));
    CHECK(std::adjacent_find(a.indices.begin(), a.indices.end()) == a.indices.end());
    CHECK(sample_batch(5, 99, 1).indices.size() == 5);
    CHECK_THROWS_AS(sample_batch(0, 1, 1), ArgumentError);
    CHECK_THROWS_AS(sample_batch(4, 0, 1), ArgumentError);
  }

  TEST_CASE("batch_gradients checks its indices") {
    const auto tp = testbed::make_quad_finite_sum(8, 2, 2, 1, 1, 0);
    const Vec t = Vec::Zero(2), p = Vec::Zero(2);
    CHECK_THROWS_AS(batch_gradients(tp.problem, t, p, SampleBatch{{9}, 0}, GradientKind::lower_phi), ArgumentError);
    CHECK_THROWS_AS(batch_gradients(tp.problem, t, p, SampleBatch{{}, 0}, GradientKind::lower_phi), ArgumentError);
    CHECK(batch_gradients(tp.problem, t, p, SampleBatch{{0, 3}, 0}, GradientKind::lower_phi).size() == 2);
  }

  TEST_CASE("mix_seed separates streams") {
    CHECK(mix_seed(1, 0) != mix_seed(1, 1));
    CHECK(mix_seed(1, 0) != mix_seed(2, 0));
    CHECK(mix_seed(3, 4) == mix_seed(3, 4));
  }
}
