#include <cmath>
#include <limits>

#include "doctest.h"
#include "msnet/autodiff.hpp"
#include "support.hpp"

using namespace msnet;
using namespace msnet::ad;
using testsupport::random_tensor;

namespace {

ConvOptions conv3d_opts(int stride, int pad, int groups = 1) {
  return ConvOptions::make(3, stride, pad, 1, groups);
}

void check_passes(const GradcheckReport& r, double tol) {
  INFO("worst: " << r.worst << " skipped " << r.skipped << " of " << (r.checked + r.skipped));
  CHECK(r.passed);
  CHECK(r.max_rel_error < tol);
}

}  // namespace

TEST_CASE("backward of sum(relu(x)) with positive x is all ones") {
  Tape<float> tape;
  Var<float> x = tape.leaf(random_tensor<float>({2, 3, 4}, 1, 0.1, 1.0));
  tape.backward(ad::sum(ad::relu(x)));
  for (float g : x.grad().values()) CHECK(g == 1.0f);
}

TEST_CASE("backward of sum(conv(x, w)) matches the loop oracle for dL/dw") {
  ParamStore<double> store;
  Parameter<double>& w = store.add("w", random_tensor<double>({2, 3, 3, 3}, 2));
  TensorD xv = random_tensor<double>({2, 3, 5, 6}, 3);
  Tape<double> tape;
  Var<double> y = ad::conv(tape.constant(xv), tape.param(w), Var<double>(), ConvOptions::make(2, 1, 1));
  tape.backward(ad::sum(y));
  REQUIRE(w.grad.shape() == w.value.shape());
  for (std::int64_t oc = 0; oc < 2; ++oc)
    for (std::int64_t ic = 0; ic < 3; ++ic)
      for (std::int64_t ky = 0; ky < 3; ++ky)
        for (std::int64_t kx = 0; kx < 3; ++kx) {
          double s = 0.0;
          for (std::int64_t n = 0; n < 2; ++n)
            for (std::int64_t i = 0; i < 5; ++i)
              for (std::int64_t j = 0; j < 6; ++j) {
                const auto iy = i - 1 + ky, ix = j - 1 + kx;
                if (iy >= 0 && iy < 5 && ix >= 0 && ix < 6) s += xv.at({n, ic, iy, ix});
              }
          CHECK(w.grad.at({oc, ic, ky, kx}) == doctest::Approx(s).epsilon(1e-12));
        }
}

TEST_CASE("non-scalar loss is rejected") {
  Tape<double> tape;
  Var<double> x = tape.leaf(TensorD({2}, 1.0));
  CHECK_THROWS_AS(tape.backward(x), ShapeError);
}

TEST_CASE("gradcheck is exact for a linear map") {
  TensorD a = random_tensor<double>({3, 4}, 4);
  auto f = [&](Tape<double>& t, const Var<double>& x) { return ad::sum(ad::mul(t.constant(a), x)); };
  GradcheckReport r = gradcheck(f, random_tensor<double>({3, 4}, 5));
  CHECK(r.passed);
  CHECK(r.max_rel_error < 1e-10);
  CHECK(r.skipped == 0);
}

TEST_CASE("gradcheck of a 3D depthwise convolution") {
  ParamStore<double> store;
  Parameter<double>& w = store.add("w", random_tensor<double>({4, 1, 3, 3, 3}, 6));
  TensorD g = random_tensor<double>({1, 4, 4, 4, 4}, 7);
  auto f = [&](Tape<double>& t, const Var<double>& x) {
    Var<double> y = ad::conv(x, t.param(w), Var<double>(), conv3d_opts(1, 1, 4));
    return ad::sum(ad::mul(y, t.constant(g)));
  };
  check_passes(gradcheck(f, random_tensor<double>({1, 4, 4, 4, 4}, 8)), 1e-6);
  auto fw = [&](Tape<double>& t) {
    Var<double> y = ad::conv(t.constant(random_tensor<double>({1, 4, 4, 4, 4}, 9)), t.param(w),
                             Var<double>(), conv3d_opts(1, 1, 4));
    return ad::sum(ad::mul(y, t.constant(g)));
  };
  check_passes(gradcheck_params(fw, store), 1e-6);
}

// Every primitive op is checked on three random shapes. The loss is a random
// projection <g, op(x)> so that every output coordinate contributes.
TEST_CASE("gradcheck of every primitive op on three shapes") {
  auto projected = [](Tape<double>& t, const Var<double>& y, std::uint64_t seed) {
    return ad::sum(ad::mul(y, t.constant(random_tensor<double>(y.shape(), seed))));
  };
  const GradcheckOptions opt;
  std::uint64_t seed = 100;

  SUBCASE("conv with bias, input and parameters") {
    struct Case {
      int rank;
      Shape x, w;
      int stride, pad, dil, groups;
    };
    const Case cases[] = {{2, {2, 3, 5, 6}, {4, 3, 3, 3}, 1, 1, 1, 1},
                          {2, {1, 4, 7, 7}, {4, 2, 3, 3}, 2, 2, 2, 2},
                          {3, {1, 2, 4, 5, 5}, {3, 2, 3, 3, 3}, 2, 1, 1, 1}};
    for (const auto& c : cases) {
      ParamStore<double> s;
      Parameter<double>& w = s.add("w", random_tensor<double>(c.w, seed++));
      Parameter<double>& b = s.add("b", random_tensor<double>({c.w[0]}, seed++));
      const ConvOptions o = ConvOptions::make(c.rank, c.stride, c.pad, c.dil, c.groups);
      const std::uint64_t gs = seed++;
      auto f = [&](Tape<double>& t, const Var<double>& x) {
        return projected(t, ad::conv(x, t.param(w), t.param(b), o), gs);
      };
      TensorD x0 = random_tensor<double>(c.x, seed++);
      check_passes(gradcheck(f, x0, opt), 1e-5);
      auto fp = [&](Tape<double>& t) { return f(t, t.constant(x0)); };
      check_passes(gradcheck_params(fp, s, opt), 1e-5);
    }
  }
  SUBCASE("conv_transposed") {
    struct Case {
      int rank;
      Shape x, w;
      int stride, pad, outpad;
    };
    const Case cases[] = {{2, {1, 3, 3, 4}, {3, 2, 3, 3}, 2, 1, 1},
                          {2, {2, 2, 4, 4}, {2, 3, 3, 3}, 1, 1, 0},
                          {3, {1, 2, 2, 3, 3}, {2, 2, 3, 3, 3}, 2, 1, 1}};
    for (const auto& c : cases) {
      ParamStore<double> s;
      Parameter<double>& w = s.add("w", random_tensor<double>(c.w, seed++));
      ConvOptions o = ConvOptions::make(c.rank, c.stride, c.pad);
      for (int a = 3 - c.rank; a < 3; ++a) o.output_padding[static_cast<std::size_t>(a)] = c.outpad;
      const std::uint64_t gs = seed++;
      auto f = [&](Tape<double>& t, const Var<double>& x) {
        return projected(t, ad::conv_transposed(x, t.param(w), o), gs);
      };
      TensorD x0 = random_tensor<double>(c.x, seed++);
      check_passes(gradcheck(f, x0, opt), 1e-5);
      auto fp = [&](Tape<double>& t) { return f(t, t.constant(x0)); };
      check_passes(gradcheck_params(fp, s, opt), 1e-5);
    }
  }
  SUBCASE("batch_norm in train and eval mode") {
    const Shape shapes[] = {{2, 3, 4, 4}, {4, 2, 3}, {1, 2, 3, 3, 3}};
    for (const auto& sh : shapes) {
      for (BnMode mode : {BnMode::train, BnMode::eval}) {
        ParamStore<double> s;
        const std::int64_t c = sh[1];
        Parameter<double>& gamma = s.add("g", random_tensor<double>({c}, seed++, 0.5, 1.5));
        Parameter<double>& beta = s.add("b", random_tensor<double>({c}, seed++));
        Parameter<double>& rm = s.add("rm", random_tensor<double>({c}, seed++), false);
        Parameter<double>& rv = s.add("rv", random_tensor<double>({c}, seed++, 0.5, 2.0), false);
        const TensorD rm0 = rm.value, rv0 = rv.value;
        const std::uint64_t gs = seed++;
        auto f = [&](Tape<double>& t, const Var<double>& x) {
          rm.value = rm0;
          rv.value = rv0;
          return projected(t, ad::batch_norm(x, t.param(gamma), t.param(beta), rm, rv, mode), gs);
        };
        TensorD x0 = random_tensor<double>(sh, seed++, -2.0, 2.0);
        check_passes(gradcheck(f, x0, opt), 1e-5);
        auto fp = [&](Tape<double>& t) { return f(t, t.constant(x0)); };
        check_passes(gradcheck_params(fp, s, opt), 1e-5);
      }
    }
  }
  SUBCASE("pointwise, softmax, reshape, concat, interpolate") {
    const Shape shapes[] = {{2, 3, 4}, {1, 2, 3, 5}, {1, 1, 2, 3, 4}};
    for (const auto& sh : shapes) {
      const std::uint64_t gs = seed++;
      TensorD other = random_tensor<double>(sh, seed++);
      TensorD x0 = random_tensor<double>(sh, seed++);
      check_passes(gradcheck([&](Tape<double>& t, const Var<double>& x) { return projected(t, ad::relu(x), gs); }, x0, opt), 1e-5);
      check_passes(gradcheck([&](Tape<double>& t, const Var<double>& x) { return projected(t, ad::add(x, t.constant(other)), gs); }, x0, opt), 1e-5);
      check_passes(gradcheck([&](Tape<double>& t, const Var<double>& x) { return projected(t, ad::sub(t.constant(other), x), gs); }, x0, opt), 1e-5);
      check_passes(gradcheck([&](Tape<double>& t, const Var<double>& x) { return projected(t, ad::mul(x, x), gs); }, x0, opt), 1e-5);
      check_passes(gradcheck([&](Tape<double>& t, const Var<double>& x) { return projected(t, ad::scale(x, -2.5), gs); }, x0, opt), 1e-5);
      for (std::size_t axis = 0; axis < sh.size(); ++axis) {
        check_passes(gradcheck([&](Tape<double>& t, const Var<double>& x) { return projected(t, ad::softmax(x, axis), gs); }, x0, opt), 1e-5);
      }
      check_passes(gradcheck([&](Tape<double>& t, const Var<double>& x) {
                     return projected(t, ad::reshape(x, {checked_numel(sh)}), gs);
                   }, x0, opt), 1e-5);
      check_passes(gradcheck([&](Tape<double>& t, const Var<double>& x) {
                     return projected(t, ad::concat<double>({x, t.constant(other), x}, 1), gs);
                   }, x0, opt), 1e-5);
      const bool tri = sh.size() == 5;
      if (sh.size() >= 4) {
        const std::vector<double> sc = tri ? std::vector<double>{2, 2, 2} : std::vector<double>{2, 4};
        check_passes(gradcheck([&](Tape<double>& t, const Var<double>& x) {
                       return projected(t, ad::interpolate(x, sc, tri ? InterpMode::trilinear : InterpMode::bilinear), gs);
                     }, x0, opt), 1e-5);
      }
    }
  }
}

TEST_CASE("gradients add up across graphs") {
  ParamStore<double> s;
  Parameter<double>& w = s.add("w", random_tensor<double>({2, 2, 3, 3}, 200));
  TensorD a = random_tensor<double>({1, 2, 4, 4}, 201);
  TensorD b = random_tensor<double>({1, 2, 4, 4}, 202);
  auto graph = [&](Tape<double>& t, const TensorD& x) {
    return ad::sum(ad::relu(ad::conv(t.constant(x), t.param(w), Var<double>(), ConvOptions::make(2, 1, 1))));
  };
  TensorD ga, gb, gab;
  {
    Tape<double> t;
    t.backward(graph(t, a));
    ga = w.grad;
    s.zero_grad();
  }
  {
    Tape<double> t;
    t.backward(graph(t, b));
    gb = w.grad;
    s.zero_grad();
  }
  {
    Tape<double> t;
    t.backward(ad::add(graph(t, a), graph(t, b)));
    gab = w.grad;
    s.zero_grad();
  }
  for (std::size_t i = 0; i < gab.size(); ++i) CHECK(gab[i] == doctest::Approx(ga[i] + gb[i]).epsilon(1e-12));

  // Accumulation across backward calls until zeroed.
  {
    Tape<double> t1;
    t1.backward(graph(t1, a));
    Tape<double> t2;
    t2.backward(graph(t2, b));
  }
  for (std::size_t i = 0; i < gab.size(); ++i) CHECK(w.grad[i] == doctest::Approx(gab[i]).epsilon(1e-12));
  s.zero_grad();
  CHECK(w.grad.empty());
}

TEST_CASE("replay reproduces recorded values bit-exactly") {
  ParamStore<float> s;
  Parameter<float>& w = s.add("w", random_tensor<float>({3, 2, 3, 3}, 300));
  Parameter<float>& g = s.add("g", Tensor({3}, 1.0f));
  Parameter<float>& b = s.add("b", Tensor({3}, 0.0f));
  Parameter<float>& rm = s.add("rm", Tensor({3}, 0.0f), false);
  Parameter<float>& rv = s.add("rv", Tensor({3}, 1.0f), false);
  Tape<float> t;
  Var<float> x = t.leaf(random_tensor<float>({2, 2, 6, 6}, 301));
  Var<float> y = ad::relu(ad::batch_norm(ad::conv(x, t.param(w), Var<float>(), ConvOptions::make(2, 1, 1)),
                                         t.param(g), t.param(b), rm, rv, BnMode::train));
  Var<float> z = ad::softmax(ad::interpolate(y, {2.0, 2.0}, InterpMode::bilinear), 1);
  ad::sum(z);
  const auto replayed = t.replay();
  REQUIRE(replayed.size() == t.nodes().size());
  for (std::size_t i = 0; i < replayed.size(); ++i) CHECK(replayed[i] == t.nodes()[i]->value);
}

TEST_CASE("parameter gradients have parameter shapes") {
  ParamStore<double> s;
  Parameter<double>& w = s.add("w", random_tensor<double>({4, 2, 3, 3, 3}, 400));
  Tape<double> t;
  t.backward(ad::sum(ad::conv(t.constant(random_tensor<double>({1, 2, 4, 4, 4}, 401)), t.param(w), Var<double>(),
                              conv3d_opts(2, 1))));
  CHECK(w.grad.shape() == w.value.shape());
  CHECK_THROWS_AS(s.add("w", TensorD({1})), ConfigError);
  CHECK_THROWS_AS(s.get("missing"), ConfigError);
}

TEST_CASE("adam") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    ParamStore<float> s;
    Parameter<float>& p = s.add("p", random_tensor<float>({5}, 500));
    const Tensor before = p.value;
    p.grad = Tensor({5}, 0.0f);
    Adam<float> opt(s);
    opt.step();
    CHECK(p.value == before);
  }
  SUBCASE("single step follows the bias-corrected formula") {
    ParamStore<double> s;
    Parameter<double>& p = s.add("p", TensorD({1}, 2.0));
    const double g = 0.3;
    p.grad = TensorD({1}, g);
    Adam<double> opt(s);
    opt.step();
    // m = 0.1 g, v = 0.001 g^2; bias correction divides by 0.1 and 0.001.
    const double m = (1 - 0.9) * g / (1 - 0.9);
    const double v = (1 - 0.999) * g * g / (1 - 0.999);
    CHECK(p.value[0] == doctest::Approx(2.0 - 1e-3 * m / (std::sqrt(v) + 1e-8)).epsilon(1e-14));
    CHECK(opt.steps() == 1);
  }
  SUBCASE("learning rate zero is the identity") {
    ParamStore<double> s;
    Parameter<double>& p = s.add("p", random_tensor<double>({3, 3}, 501));
    const TensorD before = p.value;
    p.grad = random_tensor<double>({3, 3}, 502);
    AdamOptions o;
    o.lr = 0.0;
    Adam<double> opt(s, o);
    opt.step();
    CHECK(p.value == before);
  }
  SUBCASE("schedule halves at the listed epochs") {
    AdamOptions o;
    CHECK(scheduled_lr(o, 0) == 1e-3);
    CHECK(scheduled_lr(o, 9) == 1e-3);
    CHECK(scheduled_lr(o, 10) == doctest::Approx(0.0005).epsilon(1e-15));
    CHECK(scheduled_lr(o, 12) == doctest::Approx(0.00025).epsilon(1e-15));
    CHECK(scheduled_lr(o, 16) == doctest::Approx(0.0000625).epsilon(1e-15));
  }
  SUBCASE("non-finite gradient names the parameter") {
    ParamStore<float> s;
    s.add("ok", Tensor({2}, 1.0f)).grad = Tensor({2}, 0.5f);
    Parameter<float>& bad = s.add("layer.weight", Tensor({2}, 1.0f));
    bad.grad = Tensor({2}, std::vector<float>{0.0f, std::numeric_limits<float>::quiet_NaN()});
    Adam<float> opt(s);
    CHECK_THROWS_WITH_AS(opt.step(), doctest::Contains("layer.weight"), NumericError);
    CHECK(s.get("ok").value[0] == 1.0f);
  }
  SUBCASE("running statistics are never optimized") {
    ParamStore<float> s;
    Parameter<float>& rm = s.add("rm", Tensor({2}, 1.0f), false);
    rm.grad = Tensor({2}, 1.0f);
    Adam<float> opt(s);
    opt.step();
    CHECK(rm.value[0] == 1.0f);
  }
}
