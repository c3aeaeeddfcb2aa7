#include <cmath>

#include "doctest.h"
#include "json.hpp"
#include "msnet/error.hpp"
#include "msnet/metrics.hpp"
#include "msnet/rng.hpp"

using namespace msnet;

namespace {

Tensor row(std::vector<float> v) {
  const auto n = static_cast<std::int64_t>(v.size());
  return Tensor({1, 1, n}, std::move(v));
}

// Oracle written directly from the definitions.
MetricReport reference(const std::vector<float>& pred, const std::vector<float>& gt, const std::vector<bool>& valid) {
  double sum = 0.0;
  int n = 0, bad3 = 0, badd1 = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!valid[i]) continue;
    const double e = std::fabs(double(pred[i]) - double(gt[i]));
    sum += e;
    ++n;
    if (e > 3.0) ++bad3;
    if (e > 3.0 && e > 0.05 * gt[i]) ++badd1;
  }
  return {sum / n, 100.0 * bad3 / n, 100.0 * badd1 / n, n};
}

}  // namespace

TEST_CASE("fixture: gt [10,100,50,2] against pred [14,104,50,2]") {
  const DisparityMap gt = DisparityMap::dense(row({10, 100, 50, 2}));
  const Tensor pred = row({14, 104, 50, 2});
  CHECK(epe(pred, gt) == doctest::Approx(2.0));
  CHECK(px_k(pred, gt) == doctest::Approx(50.0));
  CHECK(d1(pred, gt) == doctest::Approx(25.0));
  const MetricReport r = evaluate(pred, gt);
  CHECK(r.epe == doctest::Approx(2.0));
  CHECK(r.px3 == doctest::Approx(50.0));
  CHECK(r.d1 == doctest::Approx(25.0));
  CHECK(r.valid_count == 4);
}

TEST_CASE("trivial cases") {
  const DisparityMap gt = DisparityMap::dense(row({1, 2, 3, 4}));
  SUBCASE("perfect prediction") {
    const MetricReport r = evaluate(row({1, 2, 3, 4}), gt);
    CHECK(r.epe == 0.0);
    CHECK(r.px3 == 0.0);
    CHECK(r.d1 == 0.0);
  }
  SUBCASE("thresholds are strict") {
    const Tensor pred = row({4, 5, 6, 7});
    CHECK(epe(pred, gt) == doctest::Approx(3.0));
    CHECK(px_k(pred, gt) == 0.0);
    CHECK(d1(pred, gt) == 0.0);
    CHECK(px_k(pred, gt, 2.5) == 100.0);
  }
  SUBCASE("an error of 4 at gt 100 is within 5 percent") {
    const DisparityMap far = DisparityMap::dense(row({100}));
    CHECK(px_k(row({104}), far) == 100.0);
    CHECK(d1(row({104}), far) == 0.0);
    CHECK(d1(row({106}), far) == 100.0);
  }
}

TEST_CASE("sparse ground truth ignores zero pixels") {
  const DisparityMap gt = DisparityMap::sparse(row({0, 10, 0, 20}));
  CHECK(gt.valid_count() == 2);
  const Tensor pred = row({99, 11, -50, 20});
  CHECK(epe(pred, gt) == doctest::Approx(0.5));
  CHECK(px_k(pred, gt) == 0.0);
}

TEST_CASE("errors") {
  SUBCASE("no valid pixel") {
    const DisparityMap gt = DisparityMap::sparse(row({0, 0}));
    CHECK_THROWS_AS(epe(row({1, 2}), gt), NumericError);
    CHECK_THROWS_AS(px_k(row({1, 2}), gt), NumericError);
    CHECK_THROWS_AS(d1(row({1, 2}), gt), NumericError);
  }
  SUBCASE("shape mismatch") {
    const DisparityMap gt = DisparityMap::dense(row({1, 2, 3}));
    CHECK_THROWS_AS(epe(row({1, 2}), gt), ShapeError);
    DisparityMap bad{row({1, 2}), row({1})};
    CHECK_THROWS_AS(epe(row({1, 2}), bad), ShapeError);
  }
}

TEST_CASE("properties on random maps") {
  Rng rng(7);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 50 + static_cast<std::size_t>(rng.uniform(0.0, 200.0));
    std::vector<float> g(n), p(n), shifted(n), rev_g(n), rev_p(n);
    std::vector<bool> valid(n);
    Tensor mask({1, 1, static_cast<std::int64_t>(n)});
    for (std::size_t i = 0; i < n; ++i) {
      g[i] = static_cast<float>(rng.uniform(1.0, 192.0));
      p[i] = g[i] + static_cast<float>(rng.normal() * 6.0);
      valid[i] = rng.uniform(0.0, 1.0) < 0.7 || i == 0;
      mask[i] = valid[i] ? 1.0f : 0.0f;
    }
    const DisparityMap gt{row(g), mask};
    const MetricReport r = evaluate(row(p), gt);
    const MetricReport o = reference(p, g, valid);
    CHECK(r.epe == doctest::Approx(o.epe).epsilon(1e-12));
    CHECK(r.px3 == doctest::Approx(o.px3));
    CHECK(r.d1 == doctest::Approx(o.d1));
    CHECK(r.valid_count == o.valid_count);

    // D1 never exceeds the 3-pixel rate; all metrics are non-negative.
    CHECK(r.d1 <= r.px3);
    CHECK(r.epe >= 0.0);

    // Shifting prediction and ground truth together preserves EPE and px3.
    for (std::size_t i = 0; i < n; ++i) shifted[i] = p[i] + 5.0f;
    std::vector<float> gshift(n);
    for (std::size_t i = 0; i < n; ++i) gshift[i] = g[i] + 5.0f;
    const MetricReport s = evaluate(row(shifted), DisparityMap{row(gshift), mask});
    CHECK(s.epe == doctest::Approx(r.epe).epsilon(1e-5));

    // Pixel order does not matter.
    Tensor rev_mask(mask.shape());
    for (std::size_t i = 0; i < n; ++i) {
      rev_g[i] = g[n - 1 - i];
      rev_p[i] = p[n - 1 - i];
      rev_mask[i] = mask[n - 1 - i];
    }
    const MetricReport q = evaluate(row(rev_p), DisparityMap{row(rev_g), rev_mask});
    CHECK(q.epe == doctest::Approx(r.epe).epsilon(1e-12));
    CHECK(q.px3 == r.px3);
    CHECK(q.d1 == r.d1);
  }
}

TEST_CASE("report serializes to JSON") {
  const MetricReport r{2.0, 50.0, 25.0, 4};
  const auto j = nlohmann::json::parse(r.to_json());
  CHECK(j["epe"].get<double>() == 2.0);
  CHECK(j["px3"].get<double>() == 50.0);
  CHECK(j["d1"].get<double>() == 25.0);
  CHECK(j["valid_count"].get<int>() == 4);
}
