#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "msnet/ops.hpp"
#include "msnet/tensor.hpp"

namespace testsupport {

template <class T>
msnet::BasicTensor<T> random_tensor(const msnet::Shape& shape, std::uint64_t seed,
                                    double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  msnet::BasicTensor<T> t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(dist(rng));
  return t;
}

template <class T>
double max_abs_diff(const msnet::BasicTensor<T>& a, const msnet::BasicTensor<T>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

template <class T>
double max_abs(const msnet::BasicTensor<T>& a) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i])));
  return m;
}

template <class T>
double inner(const msnet::BasicTensor<T>& a, const msnet::BasicTensor<T>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

// Straightforward nested-loop 2D convolution used as an oracle.
inline msnet::TensorD naive_conv2d(const msnet::TensorD& x, const msnet::TensorD& w, int stride,
                                   int pad, int dil, int groups) {
  const auto n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const auto cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const auto oh = (h + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
  const auto ow = (wd + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
  const auto cin_g = cin / groups, cout_g = cout / groups;
  msnet::TensorD y({n, cout, oh, ow});
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t oc = 0; oc < cout; ++oc)
      for (std::int64_t oy = 0; oy < oh; ++oy)
        for (std::int64_t ox = 0; ox < ow; ++ox) {
          double s = 0.0;
          for (std::int64_t icg = 0; icg < cin_g; ++icg)
            for (std::int64_t ky = 0; ky < kh; ++ky)
              for (std::int64_t kx = 0; kx < kw; ++kx) {
                const auto iy = oy * stride - pad + ky * dil;
                const auto ix = ox * stride - pad + kx * dil;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                const auto ic = (oc / cout_g) * cin_g + icg;
                s += x.at({b, ic, iy, ix}) * w.at({oc, icg, ky, kx});
              }
          y.at({b, oc, oy, ox}) = s;
        }
  return y;
}

}  // namespace testsupport
