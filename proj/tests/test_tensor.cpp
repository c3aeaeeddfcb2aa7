#include <cmath>

#include "doctest.h"
#include "msnet/instrument.hpp"
#include "msnet/ops.hpp"
#include "msnet/parallel.hpp"
#include "support.hpp"

using namespace msnet;
using testsupport::random_tensor;

TEST_CASE("tensor construction and indexing") {
  Tensor t({2, 3}, 1.5f);
  CHECK(t.size() == 6);
  CHECK(t.at({1, 2}) == 1.5f);
  t.at({1, 2}) = 4.0f;
  CHECK(t[5] == 4.0f);
  CHECK_THROWS_AS(Tensor({2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<float>(3)), ShapeError);
  CHECK_THROWS_AS(t.at({2, 0}), ShapeError);
  CHECK(t.reshaped({3, 2}).dim(0) == 3);
  CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
}

TEST_CASE("conv of ones with unit kernel sums the window") {
  Tensor x({1, 1, 3, 3}, 1.0f);
  ConvParams<float> p{Tensor({1, 1, 3, 3}, 1.0f), {}, ConvOptions::make(2, 1, 1)};
  Tensor y = conv(x, p);
  CHECK(y.shape() == Shape{1, 1, 3, 3});
  CHECK(y.at({0, 0, 1, 1}) == 9.0f);
  CHECK(y.at({0, 0, 0, 0}) == 4.0f);
}

TEST_CASE("pointwise conv with unit weights is a channel sum") {
  Tensor x = random_tensor<float>({1, 2, 4, 5}, 1);
  ConvParams<float> p{Tensor({1, 2, 1, 1}, 1.0f), {}, ConvOptions::make(2)};
  Tensor y = conv(x, p);
  for (std::int64_t i = 0; i < 4; ++i)
    for (std::int64_t j = 0; j < 5; ++j)
      CHECK(y.at({0, 0, i, j}) == doctest::Approx(x.at({0, 0, i, j}) + x.at({0, 1, i, j})));
}

TEST_CASE("conv matches nested-loop oracle") {
  struct Case {
    Shape x, w;
    int stride, pad, dil, groups;
  };
  const Case cases[] = {
      {{1, 3, 8, 8}, {4, 3, 3, 3}, 1, 1, 1, 1},
      {{2, 4, 9, 7}, {6, 2, 3, 3}, 2, 1, 1, 2},
      {{1, 4, 10, 10}, {4, 1, 3, 3}, 1, 2, 2, 4},
      {{1, 3, 6, 6}, {5, 3, 1, 1}, 2, 0, 1, 1},
  };
  std::uint64_t seed = 10;
  for (const auto& c : cases) {
    TensorD x = random_tensor<double>(c.x, seed++);
    TensorD w = random_tensor<double>(c.w, seed++);
    TensorD expect = testsupport::naive_conv2d(x, w, c.stride, c.pad, c.dil, c.groups);
    ConvParams<double> p{w, {}, ConvOptions::make(2, c.stride, c.pad, c.dil, c.groups)};
    TensorD got = conv(x, p);
    REQUIRE(got.shape() == expect.shape());
    CHECK(testsupport::max_abs_diff(got, expect) < 1e-12);

    ConvParams<float> pf{w.cast<float>(), {}, p.options};
    Tensor gotf = conv(x.cast<float>(), pf);
    CHECK(testsupport::max_abs_diff(gotf.cast<double>(), expect) <= 1e-5 * testsupport::max_abs(expect));
  }
}

TEST_CASE("conv shape errors name the problem") {
  Tensor x({1, 3, 5, 5});
  ConvParams<float> p{Tensor({4, 2, 3, 3}), {}, ConvOptions::make(2)};
  CHECK_THROWS_AS(conv(x, p), ShapeError);
  ConvParams<float> g{Tensor({4, 1, 3, 3}), {}, ConvOptions::make(2, 1, 0, 1, 2)};
  CHECK_THROWS_WITH_AS(conv(x, g), doctest::Contains("groups"), ShapeError);
  ConvParams<float> big{Tensor({1, 3, 7, 7}), {}, ConvOptions::make(2)};
  CHECK_THROWS_WITH_AS(conv(x, big), doctest::Contains("height"), ShapeError);
}

TEST_CASE("depthwise conv equals independent per-channel convs") {
  TensorD x = random_tensor<double>({1, 3, 6, 7}, 3);
  TensorD w = random_tensor<double>({3, 1, 3, 3}, 4);
  TensorD y = conv(x, ConvParams<double>{w, {}, ConvOptions::make(2, 1, 1, 1, 3)});
  for (std::int64_t c = 0; c < 3; ++c) {
    TensorD xc({1, 1, 6, 7});
    TensorD wc({1, 1, 3, 3});
    for (std::int64_t i = 0; i < 42; ++i) xc[static_cast<std::size_t>(i)] = x[static_cast<std::size_t>(c * 42 + i)];
    for (std::int64_t i = 0; i < 9; ++i) wc[static_cast<std::size_t>(i)] = w[static_cast<std::size_t>(c * 9 + i)];
    TensorD yc = conv(xc, ConvParams<double>{wc, {}, ConvOptions::make(2, 1, 1)});
    for (std::int64_t i = 0; i < 42; ++i) CHECK(y[static_cast<std::size_t>(c * 42 + i)] == yc[static_cast<std::size_t>(i)]);
  }
}

TEST_CASE("conv is linear") {
  Tensor a = random_tensor<float>({1, 2, 5, 6}, 5);
  Tensor b = random_tensor<float>({1, 2, 5, 6}, 6);
  ConvParams<float> p{random_tensor<float>({3, 2, 3, 3}, 7), {}, ConvOptions::make(2, 1, 1)};
  Tensor mix(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) mix[i] = 2.0f * a[i] - 0.5f * b[i];
  Tensor lhs = conv(mix, p);
  Tensor ya = conv(a, p), yb = conv(b, p);
  Tensor rhs(lhs.shape());
  for (std::size_t i = 0; i < rhs.size(); ++i) rhs[i] = 2.0f * ya[i] - 0.5f * yb[i];
  CHECK(testsupport::max_abs_diff(lhs, rhs) <= 1e-5 * testsupport::max_abs(rhs));
}

TEST_CASE("3D conv matches a depth-sliced 2D computation") {
  // A kernel with depth 1 acts as an independent 2D conv on every depth slice.
  TensorD x = random_tensor<double>({1, 2, 3, 5, 5}, 8);
  TensorD w = random_tensor<double>({2, 2, 1, 3, 3}, 9);
  TensorD y = conv(x, ConvParams<double>{w, {}, [] {
                     auto o = ConvOptions::make(3, 1, 1);
                     o.padding[0] = 0;
                     return o;
                   }()});
  REQUIRE(y.shape() == Shape{1, 2, 3, 5, 5});
  TensorD w2 = w.reshaped({2, 2, 3, 3});
  for (std::int64_t d = 0; d < 3; ++d) {
    TensorD xs({1, 2, 5, 5});
    for (std::int64_t c = 0; c < 2; ++c)
      for (std::int64_t i = 0; i < 5; ++i)
        for (std::int64_t j = 0; j < 5; ++j) xs.at({0, c, i, j}) = x.at({0, c, d, i, j});
    TensorD ys = testsupport::naive_conv2d(xs, w2, 1, 1, 1, 1);
    for (std::int64_t c = 0; c < 2; ++c)
      for (std::int64_t i = 0; i < 5; ++i)
        for (std::int64_t j = 0; j < 5; ++j) CHECK(y.at({0, c, d, i, j}) == doctest::Approx(ys.at({0, c, i, j})).epsilon(1e-12));
  }
}

TEST_CASE("conv_transposed shape and impulse response") {
  ConvOptions o = ConvOptions::make(2, 2, 1);
  o.output_padding = {0, 1, 1};
  CHECK(conv_transposed_output_shape({1, 1, 2, 2}, {1, 1, 3, 3}, o) == Shape{1, 1, 4, 4});

  TensorD k = random_tensor<double>({1, 1, 3, 3}, 11);
  TensorD delta({1, 1, 1, 1}, 1.0);
  TensorD y = conv_transposed(delta, ConvParams<double>{k, {}, ConvOptions::make(2)});
  REQUIRE(y.shape() == Shape{1, 1, 3, 3});
  CHECK(y.storage() == k.storage());

  ConvOptions bad = ConvOptions::make(2, 2, 1);
  bad.output_padding = {0, 2, 2};
  CHECK_THROWS_AS(conv_transposed_output_shape({1, 1, 2, 2}, {1, 1, 3, 3}, bad), ShapeError);
}

TEST_CASE("conv_transposed is the adjoint of conv") {
  struct Case {
    int rank;
    Shape x, w;
    int stride, pad, groups;
  };
  const Case cases[] = {
      {2, {2, 4, 8, 8}, {6, 2, 3, 3}, 2, 1, 2},
      {2, {1, 3, 7, 9}, {5, 3, 3, 3}, 1, 1, 1},
      {3, {1, 4, 6, 8, 8}, {2, 4, 3, 3, 3}, 2, 1, 1},
      {3, {1, 4, 4, 6, 6}, {4, 1, 3, 3, 3}, 1, 1, 4},
  };
  std::uint64_t seed = 20;
  for (const auto& c : cases) {
    ConvOptions opt = ConvOptions::make(c.rank, c.stride, c.pad, 1, c.groups);
    TensorD x = random_tensor<double>(c.x, seed++);
    TensorD w = random_tensor<double>(c.w, seed++);
    const Shape yshape = conv_output_shape(c.x, c.w, opt);
    TensorD g = random_tensor<double>(yshape, seed++);
    // The transposed weight layout [Cin_t, Cout_t/groups, ...] is the forward
    // layout with roles swapped, so the same tensor serves both directions.
    ConvOptions topt = opt;
    for (int a = 0; a < 3; ++a) {
      const std::size_t ax = static_cast<std::size_t>(a - (3 - c.rank) + 2);
      if (a < 3 - c.rank) continue;
      const auto back = conv_transposed_output_shape(yshape, c.w, opt);
      topt.output_padding[static_cast<std::size_t>(a)] = static_cast<int>(c.x[ax] - back[ax]);
    }
    TensorD cx = conv(x, ConvParams<double>{w, {}, opt});
    TensorD tg = conv_transposed(g, ConvParams<double>{w, {}, topt});
    REQUIRE(tg.shape() == x.shape());
    const double lhs = testsupport::inner(cx, g);
    const double rhs = testsupport::inner(x, tg);
    CHECK(std::abs(lhs - rhs) <= 1e-10 * std::max(1.0, std::abs(lhs)));
  }
}

TEST_CASE("conv backward weight equals correlation with all-ones gradient") {
  TensorD x = random_tensor<double>({1, 2, 5, 5}, 30);
  const Shape ws{3, 2, 3, 3};
  ConvOptions opt = ConvOptions::make(2, 1, 1);
  TensorD gy(conv_output_shape(x.shape(), ws, opt), 1.0);
  TensorD gw = conv_backward_weight(x, gy, ws, opt);
  for (std::int64_t oc = 0; oc < 3; ++oc)
    for (std::int64_t ic = 0; ic < 2; ++ic)
      for (std::int64_t ky = 0; ky < 3; ++ky)
        for (std::int64_t kx = 0; kx < 3; ++kx) {
          double s = 0.0;
          for (std::int64_t i = 0; i < 5; ++i)
            for (std::int64_t j = 0; j < 5; ++j) {
              const auto iy = i - 1 + ky, ix = j - 1 + kx;
              if (iy >= 0 && iy < 5 && ix >= 0 && ix < 5) s += x.at({0, ic, iy, ix});
            }
          CHECK(gw.at({oc, ic, ky, kx}) == doctest::Approx(s).epsilon(1e-12));
        }
}

TEST_CASE("convolution MAC tallies are dense-equivalent") {
  instrument::MacRecorder rec;
  {
    instrument::RecordingScope scope(rec);
    instrument::LabelScope label("c");
    Tensor x({1, 4, 6, 6});
    conv(x, ConvParams<float>{Tensor({8, 2, 3, 3}), {}, ConvOptions::make(2, 2, 1, 1, 2)});
  }
  CHECK(rec.tallies().at("c") == 3u * 3u * 8u * 2u * 9u);
  instrument::MacRecorder trec;
  {
    instrument::RecordingScope scope(trec);
    ConvOptions o = ConvOptions::make(3, 2, 1);
    o.output_padding = {1, 1, 1};
    Tensor x({1, 4, 2, 3, 3});
    Tensor y = conv_transposed(x, ConvParams<float>{Tensor({4, 2, 3, 3, 3}), {}, o});
    CHECK(y.shape() == Shape{1, 2, 4, 6, 6});
  }
  CHECK(trec.total() == 4u * 6u * 6u * 2u * 4u * 27u);
}

TEST_CASE("batch norm") {
  Tensor gamma({2}, 1.0f), beta({2}, 0.0f);
  SUBCASE("constant input gives beta") {
    Tensor x({2, 2, 3, 3}, 7.0f);
    Tensor b({2}, std::vector<float>{0.25f, -1.0f});
    Tensor rm({2}, 0.0f), rv({2}, 1.0f);
    Tensor y = batch_norm(x, gamma, b, rm, rv, BnMode::train);
    for (std::int64_t n = 0; n < 2; ++n)
      for (std::int64_t i = 0; i < 9; ++i) {
        CHECK(y[static_cast<std::size_t>(n * 18 + i)] == doctest::Approx(0.25f));
        CHECK(y[static_cast<std::size_t>(n * 18 + 9 + i)] == doctest::Approx(-1.0f));
      }
    CHECK(rm[0] == doctest::Approx(0.7f));
    CHECK(rv[0] == doctest::Approx(0.9f));
  }
  SUBCASE("train mode normalizes") {
    TensorD x = random_tensor<double>({3, 2, 4, 5}, 40, -3.0, 5.0);
    TensorD g({2}, 1.0), b({2}, 0.0), rm({2}, 0.0), rv({2}, 1.0);
    TensorD y = batch_norm(x, g, b, rm, rv, BnMode::train);
    for (std::int64_t c = 0; c < 2; ++c) {
      double s = 0, ss = 0;
      for (std::int64_t n = 0; n < 3; ++n)
        for (std::int64_t i = 0; i < 20; ++i) {
          const double v = y[static_cast<std::size_t>((n * 2 + c) * 20 + i)];
          s += v;
          ss += v * v;
        }
      CHECK(std::abs(s / 60) < 1e-4);
      CHECK(std::abs(ss / 60 - 1.0) < 1e-4);
    }
  }
  SUBCASE("eval mode uses running statistics") {
    TensorD x = random_tensor<double>({1, 2, 3, 3}, 41);
    TensorD g({2}, std::vector<double>{1.5, -0.5}), b({2}, std::vector<double>{0.1, 0.2});
    TensorD rm({2}, std::vector<double>{0.3, -0.2}), rv({2}, std::vector<double>{2.0, 0.5});
    TensorD y = batch_norm(x, g, b, rm, rv, BnMode::eval);
    for (std::int64_t c = 0; c < 2; ++c)
      for (std::int64_t i = 0; i < 9; ++i) {
        const auto k = static_cast<std::size_t>(c * 9 + i);
        const auto ci = static_cast<std::size_t>(c);
        CHECK(y[k] == doctest::Approx(g[ci] * (x[k] - rm[ci]) / std::sqrt(rv[ci] + 1e-5) + b[ci]).epsilon(1e-12));
      }
    CHECK(rm[0] == 0.3);
  }
  SUBCASE("length mismatch") {
    Tensor x({1, 3, 2, 2}), rm({2}), rv({2});
    CHECK_THROWS_AS(batch_norm(x, gamma, beta, rm, rv, BnMode::eval), ShapeError);
  }
}

TEST_CASE("relu and softmax") {
  Tensor x = random_tensor<float>({2, 3, 4}, 50, 0.1, 2.0);
  Tensor neg(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) neg[i] = -x[i];
  Tensor rn = relu(neg);
  for (float v : rn.values()) CHECK(v == 0.0f);
  CHECK(relu(x) == x);

  Tensor u({1, 7, 2}, 3.0f);
  Tensor su = softmax(u, 1);
  for (float v : su.values()) CHECK(v == doctest::Approx(1.0f / 7.0f));

  TensorD r = random_tensor<double>({3, 5, 4}, 51, -20.0, 20.0);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    TensorD s = softmax(r, axis);
    for (double v : s.values()) CHECK(v >= 0.0);
    const auto& sh = s.shape();
    std::int64_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= sh[i];
    for (std::size_t i = axis + 1; i < 3; ++i) inner *= sh[i];
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t i = 0; i < inner; ++i) {
        double sum = 0.0;
        for (std::int64_t k = 0; k < sh[axis]; ++k) sum += s[static_cast<std::size_t>((o * sh[axis] + k) * inner + i)];
        CHECK(std::abs(sum - 1.0) < 1e-6);
      }
  }
  CHECK_THROWS_AS(softmax(r, 3), ShapeError);
}

TEST_CASE("bilinear upsampling follows the half-pixel coordinate map") {
  // Row [0, 1] upsampled 2x samples source positions -0.25, 0.25, 0.75, 1.25,
  // clamped to [0, 1].
  Tensor x({1, 1, 2, 2}, std::vector<float>{0, 1, 0, 1});
  Tensor y = interpolate(x, {2.0, 2.0}, InterpMode::bilinear);
  REQUIRE(y.shape() == Shape{1, 1, 4, 4});
  const float row[4] = {0.0f, 0.25f, 0.75f, 1.0f};
  for (std::int64_t i = 0; i < 4; ++i)
    for (std::int64_t j = 0; j < 4; ++j) CHECK(y.at({0, 0, i, j}) == doctest::Approx(row[j]));

  Tensor v({1, 1, 2, 1}, std::vector<float>{2, 6});
  Tensor vy = interpolate(v, {2.0, 1.0}, InterpMode::bilinear);
  CHECK(vy.storage() == std::vector<float>{2, 3, 5, 6});

  Tensor t({1, 1, 2, 2, 2}, 1.0f);
  CHECK(interpolate(t, {2.0, 2.0, 2.0}, InterpMode::trilinear).shape() == Shape{1, 1, 4, 4, 4});
  CHECK_THROWS_AS(interpolate(x, {0.0, 2.0}, InterpMode::bilinear), ShapeError);
}

TEST_CASE("interpolate backward is the adjoint of interpolate") {
  TensorD x = random_tensor<double>({2, 3, 3, 5}, 60);
  TensorD y = interpolate(x, {4.0, 4.0}, InterpMode::bilinear);
  TensorD g = random_tensor<double>(y.shape(), 61);
  TensorD gx = interpolate_backward(x.shape(), g, {4.0, 4.0}, InterpMode::bilinear);
  CHECK(testsupport::inner(y, g) == doctest::Approx(testsupport::inner(x, gx)).epsilon(1e-12));
}

TEST_CASE("kernels are deterministic across thread counts") {
  Tensor x = random_tensor<float>({2, 8, 12, 12}, 70);
  ConvParams<float> p{random_tensor<float>({16, 8, 3, 3}, 71), {}, ConvOptions::make(2, 1, 1)};
  set_num_threads(1);
  Tensor a = conv(x, p);
  set_num_threads(4);
  Tensor b = conv(x, p);
  Tensor c = conv(x, p);
  set_num_threads(1);
  CHECK(a == b);
  CHECK(b == c);
}
