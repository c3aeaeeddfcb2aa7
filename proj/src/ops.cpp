#include "msnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "msnet/instrument.hpp"
#include "msnet/parallel.hpp"

namespace msnet {

ConvOptions ConvOptions::make(int spatial_rank, int stride, int padding, int dilation,
                              int groups) {
  ConvOptions o;
  o.spatial_rank = spatial_rank;
  o.stride = {stride, stride, stride};
  o.padding = {padding, padding, padding};
  o.dilation = {dilation, dilation, dilation};
  o.groups = groups;
  if (spatial_rank == 2) {
    o.stride[0] = 1;
    o.padding[0] = 0;
    o.dilation[0] = 1;
  }
  return o;
}

namespace {

constexpr const char* kAxisNames[3] = {"depth", "height", "width"};

// Every convolution is executed as a 3D one; 2D tensors get a unit depth axis.
struct Geometry {
  std::int64_t batch = 0;
  std::int64_t cin = 0, in_d = 1, in_h = 1, in_w = 1;
  std::int64_t cout = 0, out_d = 1, out_h = 1, out_w = 1;
  std::int64_t k_d = 1, k_h = 1, k_w = 1;
  std::array<int, 3> stride{1, 1, 1}, pad{0, 0, 0}, dil{1, 1, 1};
  std::int64_t groups = 1;

  std::int64_t cin_g() const { return cin / groups; }
  std::int64_t cout_g() const { return cout / groups; }
  std::int64_t taps() const { return k_d * k_h * k_w; }
  std::int64_t in_plane() const { return in_d * in_h * in_w; }
  std::int64_t out_plane() const { return out_d * out_h * out_w; }
};

void validate_options(const ConvOptions& opt) {
  if (opt.spatial_rank != 2 && opt.spatial_rank != 3) {
    throw ShapeError("convolution spatial rank must be 2 or 3, got " +
                     std::to_string(opt.spatial_rank));
  }
  if (opt.groups < 1) throw ShapeError("convolution groups must be >= 1");
  const int first = opt.spatial_rank == 2 ? 1 : 0;
  for (int a = first; a < 3; ++a) {
    if (opt.stride[a] < 1) throw ShapeError(std::string("stride on ") + kAxisNames[a] + " axis must be >= 1");
    if (opt.dilation[a] < 1) throw ShapeError(std::string("dilation on ") + kAxisNames[a] + " axis must be >= 1");
    if (opt.padding[a] < 0) throw ShapeError(std::string("padding on ") + kAxisNames[a] + " axis must be >= 0");
    if (opt.output_padding[a] < 0) {
      throw ShapeError(std::string("output padding on ") + kAxisNames[a] + " axis must be >= 0");
    }
  }
}

// Shapes are validated once; `in` and `weight` follow the forward-conv roles.
Geometry make_geometry(const Shape& in, const Shape& weight, const ConvOptions& opt,
                       bool transposed) {
  validate_options(opt);
  const std::size_t rank = static_cast<std::size_t>(opt.spatial_rank) + 2;
  if (in.size() != rank) {
    throw ShapeError("convolution input must have rank " + std::to_string(rank) + ", got " +
                     to_string(in));
  }
  if (weight.size() != rank) {
    throw ShapeError("convolution weight must have rank " + std::to_string(rank) + ", got " +
                     to_string(weight));
  }
  Geometry g;
  g.groups = opt.groups;
  g.batch = in[0];
  const std::int64_t in_channels = in[1];
  // Forward conv: weight [Cout, Cin/g, k...]. Transposed: weight [Cin, Cout/g, k...].
  const std::int64_t w0 = weight[0];
  const std::int64_t w1 = weight[1];
  if (!transposed) {
    if (in_channels % opt.groups != 0) {
      throw ShapeError("groups " + std::to_string(opt.groups) + " do not divide input channels " +
                       std::to_string(in_channels));
    }
    if (w0 % opt.groups != 0) {
      throw ShapeError("groups " + std::to_string(opt.groups) +
                       " do not divide output channels " + std::to_string(w0));
    }
    if (w1 * opt.groups != in_channels) {
      throw ShapeError("channel axis mismatch: input has " + std::to_string(in_channels) +
                       " channels, weight expects " + std::to_string(w1 * opt.groups));
    }
    g.cin = in_channels;
    g.cout = w0;
  } else {
    if (w0 != in_channels) {
      throw ShapeError("channel axis mismatch: input has " + std::to_string(in_channels) +
                       " channels, transposed weight expects " + std::to_string(w0));
    }
    if (in_channels % opt.groups != 0) {
      throw ShapeError("groups " + std::to_string(opt.groups) + " do not divide input channels " +
                       std::to_string(in_channels));
    }
    // Forward-conv roles: the transposed output is the conv input.
    g.cout = in_channels;
    g.cin = w1 * opt.groups;
  }
  const int first = opt.spatial_rank == 2 ? 1 : 0;
  std::array<std::int64_t, 3> ext{1, 1, 1};
  std::array<std::int64_t, 3> ker{1, 1, 1};
  for (int a = first; a < 3; ++a) {
    ext[a] = in[static_cast<std::size_t>(a - first + 2)];
    ker[a] = weight[static_cast<std::size_t>(a - first + 2)];
    g.stride[a] = opt.stride[a];
    g.pad[a] = opt.padding[a];
    g.dil[a] = opt.dilation[a];
  }
  std::array<std::int64_t, 3> out{1, 1, 1};
  for (int a = first; a < 3; ++a) {
    const std::int64_t span = static_cast<std::int64_t>(g.dil[a]) * (ker[a] - 1) + 1;
    if (!transposed) {
      const std::int64_t padded = ext[a] + 2 * g.pad[a];
      if (padded < span) {
        throw ShapeError(std::string("kernel does not fit the ") + kAxisNames[a] +
                         " axis: padded extent " + std::to_string(padded) + " < kernel span " +
                         std::to_string(span));
      }
      out[a] = (padded - span) / g.stride[a] + 1;
    } else {
      if (opt.output_padding[a] >= g.stride[a] && opt.output_padding[a] >= g.dil[a]) {
        throw ShapeError(std::string("output padding on ") + kAxisNames[a] +
                         " axis must be smaller than stride or dilation");
      }
      out[a] = (ext[a] - 1) * g.stride[a] - 2 * g.pad[a] + span + opt.output_padding[a];
      if (out[a] < 1) {
        throw ShapeError(std::string("transposed convolution output on ") + kAxisNames[a] +
                         " axis is empty");
      }
    }
  }
  if (!transposed) {
    g.in_d = ext[0];
    g.in_h = ext[1];
    g.in_w = ext[2];
    g.out_d = out[0];
    g.out_h = out[1];
    g.out_w = out[2];
  } else {
    g.out_d = ext[0];
    g.out_h = ext[1];
    g.out_w = ext[2];
    g.in_d = out[0];
    g.in_h = out[1];
    g.in_w = out[2];
  }
  g.k_d = ker[0];
  g.k_h = ker[1];
  g.k_w = ker[2];
  return g;
}

Shape spatial_shape(std::int64_t n, std::int64_t c, std::int64_t d, std::int64_t h,
                    std::int64_t w, int rank) {
  if (rank == 2) return {n, c, h, w};
  return {n, c, d, h, w};
}

// Valid output index range [lo, hi) along one axis for kernel tap `t`, such
// that o * stride - pad + t * dil lies in [0, in_extent).
inline void valid_range(std::int64_t out_extent, std::int64_t in_extent, int stride,
                        std::int64_t offset, std::int64_t& lo, std::int64_t& hi) {
  // o * stride + offset >= 0, offset = t*dil - pad
  std::int64_t l = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
  std::int64_t last = in_extent - 1 - offset;  // o*stride <= last
  std::int64_t h = last < 0 ? 0 : last / stride + 1;
  lo = std::max<std::int64_t>(0, l);
  hi = std::min<std::int64_t>(out_extent, h);
  if (hi < lo) hi = lo;
}

// out[n, oc] = sum_{ic in group, taps} w * in. Charges dense-equivalent MACs.
template <class T>
void conv_forward_kernel(const Geometry& g, const T* x, const T* w, const T* bias, T* y,
                         bool count) {
  const std::int64_t planes = g.batch * g.cout;
  const std::int64_t out_plane = g.out_plane();
  const std::int64_t in_plane = g.in_plane();
  const std::int64_t cin_g = g.cin_g();
  const std::int64_t cout_g = g.cout_g();
  const std::int64_t taps = g.taps();
  std::vector<std::uint64_t> tallies(static_cast<std::size_t>(planes), 0);

  parallel_for(
      planes,
      [&](std::int64_t begin, std::int64_t end) {
        std::vector<double> acc(static_cast<std::size_t>(out_plane));
        for (std::int64_t p = begin; p < end; ++p) {
          const std::int64_t n = p / g.cout;
          const std::int64_t oc = p % g.cout;
          const std::int64_t grp = oc / cout_g;
          std::fill(acc.begin(), acc.end(), bias ? static_cast<double>(bias[oc]) : 0.0);
          std::uint64_t tally = 0;
          for (std::int64_t icg = 0; icg < cin_g; ++icg) {
            const std::int64_t ic = grp * cin_g + icg;
            const T* xin = x + (n * g.cin + ic) * in_plane;
            const T* wk = w + (oc * cin_g + icg) * taps;
            for (std::int64_t a = 0; a < g.k_d; ++a) {
              std::int64_t z_lo, z_hi;
              const std::int64_t z_off = a * g.dil[0] - g.pad[0];
              valid_range(g.out_d, g.in_d, g.stride[0], z_off, z_lo, z_hi);
              for (std::int64_t b = 0; b < g.k_h; ++b) {
                std::int64_t y_lo, y_hi;
                const std::int64_t y_off = b * g.dil[1] - g.pad[1];
                valid_range(g.out_h, g.in_h, g.stride[1], y_off, y_lo, y_hi);
                for (std::int64_t c = 0; c < g.k_w; ++c) {
                  tally += static_cast<std::uint64_t>(out_plane);
                  const double wv = static_cast<double>(wk[(a * g.k_h + b) * g.k_w + c]);
                  std::int64_t x_lo, x_hi;
                  const std::int64_t x_off = c * g.dil[2] - g.pad[2];
                  valid_range(g.out_w, g.in_w, g.stride[2], x_off, x_lo, x_hi);
                  if (x_lo >= x_hi) continue;
                  for (std::int64_t z = z_lo; z < z_hi; ++z) {
                    const std::int64_t iz = z * g.stride[0] + z_off;
                    for (std::int64_t yy = y_lo; yy < y_hi; ++yy) {
                      const std::int64_t iy = yy * g.stride[1] + y_off;
                      const T* row = xin + (iz * g.in_h + iy) * g.in_w;
                      double* arow = acc.data() + (z * g.out_h + yy) * g.out_w;
                      if (g.stride[2] == 1) {
                        const T* src = row + x_off;
                        for (std::int64_t xx = x_lo; xx < x_hi; ++xx) {
                          arow[xx] += wv * static_cast<double>(src[xx]);
                        }
                      } else {
                        const int s = g.stride[2];
                        for (std::int64_t xx = x_lo; xx < x_hi; ++xx) {
                          arow[xx] += wv * static_cast<double>(row[xx * s + x_off]);
                        }
                      }
                    }
                  }
                }
              }
            }
          }
          T* out = y + p * out_plane;
          for (std::int64_t i = 0; i < out_plane; ++i) out[i] = static_cast<T>(acc[static_cast<std::size_t>(i)]);
          tallies[static_cast<std::size_t>(p)] = tally;
        }
      },
      1);
  if (count) {
    std::uint64_t total = 0;
    for (auto t : tallies) total += t;
    instrument::record_macs(total);
  }
}

// gx[n, ic] = sum_{oc in group, taps} w * gy scattered back to input positions.
// Used both for the conv input gradient and as the transposed-conv forward;
// in the latter case each gx element is charged (cout/groups) x taps MACs.
template <class T>
void conv_scatter_kernel(const Geometry& g, const T* gy, const T* w, T* gx, bool count) {
  const std::int64_t planes = g.batch * g.cin;
  const std::int64_t out_plane = g.out_plane();
  const std::int64_t in_plane = g.in_plane();
  const std::int64_t cin_g = g.cin_g();
  const std::int64_t cout_g = g.cout_g();
  const std::int64_t taps = g.taps();
  std::vector<std::uint64_t> tallies(static_cast<std::size_t>(planes), 0);

  parallel_for(
      planes,
      [&](std::int64_t begin, std::int64_t end) {
        std::vector<double> acc(static_cast<std::size_t>(in_plane));
        for (std::int64_t p = begin; p < end; ++p) {
          const std::int64_t n = p / g.cin;
          const std::int64_t ic = p % g.cin;
          const std::int64_t grp = ic / cin_g;
          const std::int64_t icg = ic % cin_g;
          std::fill(acc.begin(), acc.end(), 0.0);
          std::uint64_t tally = 0;
          for (std::int64_t ocg = 0; ocg < cout_g; ++ocg) {
            const std::int64_t oc = grp * cout_g + ocg;
            const T* gout = gy + (n * g.cout + oc) * out_plane;
            const T* wk = w + (oc * cin_g + icg) * taps;
            for (std::int64_t a = 0; a < g.k_d; ++a) {
              std::int64_t z_lo, z_hi;
              const std::int64_t z_off = a * g.dil[0] - g.pad[0];
              valid_range(g.out_d, g.in_d, g.stride[0], z_off, z_lo, z_hi);
              for (std::int64_t b = 0; b < g.k_h; ++b) {
                std::int64_t y_lo, y_hi;
                const std::int64_t y_off = b * g.dil[1] - g.pad[1];
                valid_range(g.out_h, g.in_h, g.stride[1], y_off, y_lo, y_hi);
                for (std::int64_t c = 0; c < g.k_w; ++c) {
                  tally += static_cast<std::uint64_t>(in_plane);
                  const double wv = static_cast<double>(wk[(a * g.k_h + b) * g.k_w + c]);
                  std::int64_t x_lo, x_hi;
                  const std::int64_t x_off = c * g.dil[2] - g.pad[2];
                  valid_range(g.out_w, g.in_w, g.stride[2], x_off, x_lo, x_hi);
                  if (x_lo >= x_hi) continue;
                  for (std::int64_t z = z_lo; z < z_hi; ++z) {
                    const std::int64_t iz = z * g.stride[0] + z_off;
                    for (std::int64_t yy = y_lo; yy < y_hi; ++yy) {
                      const std::int64_t iy = yy * g.stride[1] + y_off;
                      double* arow = acc.data() + (iz * g.in_h + iy) * g.in_w;
                      const T* grow = gout + (z * g.out_h + yy) * g.out_w;
                      const int s = g.stride[2];
                      for (std::int64_t xx = x_lo; xx < x_hi; ++xx) {
                        arow[xx * s + x_off] += wv * static_cast<double>(grow[xx]);
                      }
                    }
                  }
                }
              }
            }
          }
          T* out = gx + p * in_plane;
          for (std::int64_t i = 0; i < in_plane; ++i) out[i] = static_cast<T>(acc[static_cast<std::size_t>(i)]);
          tallies[static_cast<std::size_t>(p)] = tally;
        }
      },
      1);
  if (count) {
    std::uint64_t total = 0;
    for (auto t : tallies) total += t;
    instrument::record_macs(total);
  }
}

// gw[oc, icg, tap] = sum_{n, out positions} gy * x.
template <class T>
void conv_weight_kernel(const Geometry& g, const T* x, const T* gy, T* gw) {
  const std::int64_t out_plane = g.out_plane();
  const std::int64_t in_plane = g.in_plane();
  const std::int64_t cin_g = g.cin_g();
  const std::int64_t cout_g = g.cout_g();
  const std::int64_t taps = g.taps();
  parallel_for(
      g.cout,
      [&](std::int64_t begin, std::int64_t end) {
        for (std::int64_t oc = begin; oc < end; ++oc) {
          const std::int64_t grp = oc / cout_g;
          for (std::int64_t icg = 0; icg < cin_g; ++icg) {
            const std::int64_t ic = grp * cin_g + icg;
            for (std::int64_t a = 0; a < g.k_d; ++a) {
              std::int64_t z_lo, z_hi;
              const std::int64_t z_off = a * g.dil[0] - g.pad[0];
              valid_range(g.out_d, g.in_d, g.stride[0], z_off, z_lo, z_hi);
              for (std::int64_t b = 0; b < g.k_h; ++b) {
                std::int64_t y_lo, y_hi;
                const std::int64_t y_off = b * g.dil[1] - g.pad[1];
                valid_range(g.out_h, g.in_h, g.stride[1], y_off, y_lo, y_hi);
                for (std::int64_t c = 0; c < g.k_w; ++c) {
                  std::int64_t x_lo, x_hi;
                  const std::int64_t x_off = c * g.dil[2] - g.pad[2];
                  valid_range(g.out_w, g.in_w, g.stride[2], x_off, x_lo, x_hi);
                  double sum = 0.0;
                  for (std::int64_t n = 0; n < g.batch; ++n) {
                    const T* xin = x + (n * g.cin + ic) * in_plane;
                    const T* gout = gy + (n * g.cout + oc) * out_plane;
                    for (std::int64_t z = z_lo; z < z_hi; ++z) {
                      const std::int64_t iz = z * g.stride[0] + z_off;
                      for (std::int64_t yy = y_lo; yy < y_hi; ++yy) {
                        const std::int64_t iy = yy * g.stride[1] + y_off;
                        const T* row = xin + (iz * g.in_h + iy) * g.in_w;
                        const T* grow = gout + (z * g.out_h + yy) * g.out_w;
                        const int s = g.stride[2];
                        for (std::int64_t xx = x_lo; xx < x_hi; ++xx) {
                          sum += static_cast<double>(grow[xx]) *
                                 static_cast<double>(row[xx * s + x_off]);
                        }
                      }
                    }
                  }
                  gw[((oc * cin_g + icg) * taps) + (a * g.k_h + b) * g.k_w + c] = static_cast<T>(sum);
                }
              }
            }
          }
        }
      },
      1);
}

void require_bias_shape(const Shape& bias, std::int64_t cout) {
  if (bias.size() != 1 || bias[0] != cout) {
    throw ShapeError("bias must have shape [" + std::to_string(cout) + "], got " +
                     to_string(bias));
  }
}

}  // namespace

Shape conv_output_shape(const Shape& input, const Shape& weight, const ConvOptions& opt) {
  const Geometry g = make_geometry(input, weight, opt, false);
  return spatial_shape(g.batch, g.cout, g.out_d, g.out_h, g.out_w, opt.spatial_rank);
}

Shape conv_transposed_output_shape(const Shape& input, const Shape& weight,
                                   const ConvOptions& opt) {
  const Geometry g = make_geometry(input, weight, opt, true);
  return spatial_shape(g.batch, g.cin, g.in_d, g.in_h, g.in_w, opt.spatial_rank);
}

template <class T>
BasicTensor<T> conv(const BasicTensor<T>& x, const ConvParams<T>& p) {
  const Geometry g = make_geometry(x.shape(), p.weight.shape(), p.options, false);
  if (!p.bias.empty()) require_bias_shape(p.bias.shape(), g.cout);
  BasicTensor<T> y(spatial_shape(g.batch, g.cout, g.out_d, g.out_h, g.out_w, p.options.spatial_rank));
  conv_forward_kernel(g, x.data(), p.weight.data(), p.bias.empty() ? nullptr : p.bias.data(),
                      y.data(), true);
  return y;
}

template <class T>
BasicTensor<T> conv_transposed(const BasicTensor<T>& x, const ConvParams<T>& p) {
  const Geometry g = make_geometry(x.shape(), p.weight.shape(), p.options, true);
  BasicTensor<T> y(spatial_shape(g.batch, g.cin, g.in_d, g.in_h, g.in_w, p.options.spatial_rank));
  conv_scatter_kernel(g, x.data(), p.weight.data(), y.data(), true);
  if (!p.bias.empty()) {
    require_bias_shape(p.bias.shape(), g.cin);
    const std::int64_t plane = g.in_plane();
    for (std::int64_t n = 0; n < g.batch; ++n) {
      for (std::int64_t c = 0; c < g.cin; ++c) {
        T* out = y.data() + (n * g.cin + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) out[i] += p.bias[static_cast<std::size_t>(c)];
      }
    }
  }
  return y;
}

template <class T>
BasicTensor<T> conv_backward_input(const BasicTensor<T>& grad_out, const BasicTensor<T>& weight,
                                   const Shape& input_shape, const ConvOptions& opt) {
  const Geometry g = make_geometry(input_shape, weight.shape(), opt, false);
  require_same_shape(grad_out.shape(),
                     spatial_shape(g.batch, g.cout, g.out_d, g.out_h, g.out_w, opt.spatial_rank),
                     "conv_backward_input");
  BasicTensor<T> gx(input_shape);
  conv_scatter_kernel(g, grad_out.data(), weight.data(), gx.data(), false);
  return gx;
}

template <class T>
BasicTensor<T> conv_backward_weight(const BasicTensor<T>& x, const BasicTensor<T>& grad_out,
                                    const Shape& weight_shape, const ConvOptions& opt) {
  const Geometry g = make_geometry(x.shape(), weight_shape, opt, false);
  require_same_shape(grad_out.shape(),
                     spatial_shape(g.batch, g.cout, g.out_d, g.out_h, g.out_w, opt.spatial_rank),
                     "conv_backward_weight");
  BasicTensor<T> gw(weight_shape);
  conv_weight_kernel(g, x.data(), grad_out.data(), gw.data());
  return gw;
}

template <class T>
BasicTensor<T> channel_sum(const BasicTensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("channel_sum needs rank >= 2, got " + to_string(x.shape()));
  const std::int64_t n = x.dim(0);
  const std::int64_t c = x.dim(1);
  const std::int64_t inner = static_cast<std::int64_t>(x.size()) / (n * c);
  BasicTensor<T> out({c});
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::int64_t b = 0; b < n; ++b) {
      const T* p = x.data() + (b * c + ch) * inner;
      for (std::int64_t i = 0; i < inner; ++i) s += static_cast<double>(p[i]);
    }
    out[static_cast<std::size_t>(ch)] = static_cast<T>(s);
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

struct ChannelLayout {
  std::int64_t n, c, inner;
};

ChannelLayout channel_layout(const Shape& s, const char* what) {
  if (s.size() < 2) throw ShapeError(std::string(what) + " needs rank >= 2, got " + to_string(s));
  std::int64_t inner = 1;
  for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
  return {s[0], s[1], inner};
}

void require_channel_vector(const Shape& s, std::int64_t c, const char* what) {
  if (s.size() != 1 || s[0] != c) {
    throw ShapeError(std::string(what) + " must have shape [" + std::to_string(c) + "], got " +
                     to_string(s));
  }
}

}  // namespace

template <class T>
BasicTensor<T> batch_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, BasicTensor<T>& running_mean,
                          BasicTensor<T>& running_var, BnMode mode, double eps, double momentum,
                          BnSaved* saved) {
  const ChannelLayout L = channel_layout(x.shape(), "batch_norm");
  require_channel_vector(gamma.shape(), L.c, "batch_norm gamma");
  require_channel_vector(beta.shape(), L.c, "batch_norm beta");
  require_channel_vector(running_mean.shape(), L.c, "batch_norm running_mean");
  require_channel_vector(running_var.shape(), L.c, "batch_norm running_var");
  const std::int64_t count = L.n * L.inner;
  std::vector<double> mean(static_cast<std::size_t>(L.c));
  std::vector<double> invstd(static_cast<std::size_t>(L.c));
  for (std::int64_t ch = 0; ch < L.c; ++ch) {
    const auto ci = static_cast<std::size_t>(ch);
    double m, v;
    if (mode == BnMode::train) {
      double s = 0.0;
      for (std::int64_t b = 0; b < L.n; ++b) {
        const T* p = x.data() + (b * L.c + ch) * L.inner;
        for (std::int64_t i = 0; i < L.inner; ++i) s += static_cast<double>(p[i]);
      }
      m = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::int64_t b = 0; b < L.n; ++b) {
        const T* p = x.data() + (b * L.c + ch) * L.inner;
        for (std::int64_t i = 0; i < L.inner; ++i) {
          const double d = static_cast<double>(p[i]) - m;
          ss += d * d;
        }
      }
      v = ss / static_cast<double>(count);
      const double unbiased = count > 1 ? ss / static_cast<double>(count - 1) : v;
      running_mean[ci] = static_cast<T>((1.0 - momentum) * static_cast<double>(running_mean[ci]) + momentum * m);
      running_var[ci] = static_cast<T>((1.0 - momentum) * static_cast<double>(running_var[ci]) + momentum * unbiased);
    } else {
      m = static_cast<double>(running_mean[ci]);
      v = static_cast<double>(running_var[ci]);
    }
    mean[ci] = m;
    invstd[ci] = 1.0 / std::sqrt(v + eps);
  }
  BasicTensor<T> y(x.shape());
  for (std::int64_t b = 0; b < L.n; ++b) {
    for (std::int64_t ch = 0; ch < L.c; ++ch) {
      const auto ci = static_cast<std::size_t>(ch);
      const double scale = static_cast<double>(gamma[ci]) * invstd[ci];
      const double shift = static_cast<double>(beta[ci]) - mean[ci] * scale;
      const T* p = x.data() + (b * L.c + ch) * L.inner;
      T* q = y.data() + (b * L.c + ch) * L.inner;
      for (std::int64_t i = 0; i < L.inner; ++i) q[i] = static_cast<T>(static_cast<double>(p[i]) * scale + shift);
    }
  }
  if (saved) {
    saved->mean = std::move(mean);
    saved->invstd = std::move(invstd);
  }
  return y;
}

template <class T>
BnGrads<T> batch_norm_backward(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                               const BnSaved& saved, const BasicTensor<T>& grad_out,
                               BnMode mode) {
  require_same_shape(x.shape(), grad_out.shape(), "batch_norm_backward");
  const ChannelLayout L = channel_layout(x.shape(), "batch_norm_backward");
  const double count = static_cast<double>(L.n * L.inner);
  BnGrads<T> g{BasicTensor<T>(x.shape()), BasicTensor<T>({L.c}), BasicTensor<T>({L.c})};
  for (std::int64_t ch = 0; ch < L.c; ++ch) {
    const auto ci = static_cast<std::size_t>(ch);
    const double m = saved.mean[ci];
    const double is = saved.invstd[ci];
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::int64_t b = 0; b < L.n; ++b) {
      const T* p = x.data() + (b * L.c + ch) * L.inner;
      const T* gy = grad_out.data() + (b * L.c + ch) * L.inner;
      for (std::int64_t i = 0; i < L.inner; ++i) {
        const double xhat = (static_cast<double>(p[i]) - m) * is;
        sum_g += static_cast<double>(gy[i]);
        sum_gx += static_cast<double>(gy[i]) * xhat;
      }
    }
    g.beta[ci] = static_cast<T>(sum_g);
    g.gamma[ci] = static_cast<T>(sum_gx);
    const double gm = static_cast<double>(gamma[ci]) * is;
    for (std::int64_t b = 0; b < L.n; ++b) {
      const T* p = x.data() + (b * L.c + ch) * L.inner;
      const T* gy = grad_out.data() + (b * L.c + ch) * L.inner;
      T* gx = g.input.data() + (b * L.c + ch) * L.inner;
      for (std::int64_t i = 0; i < L.inner; ++i) {
        if (mode == BnMode::train) {
          const double xhat = (static_cast<double>(p[i]) - m) * is;
          gx[i] = static_cast<T>(gm * (static_cast<double>(gy[i]) - sum_g / count - xhat * sum_gx / count));
        } else {
          gx[i] = static_cast<T>(gm * static_cast<double>(gy[i]));
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  BasicTensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

template <class T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out) {
  require_same_shape(x.shape(), grad_out.shape(), "relu_backward");
  BasicTensor<T> g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] > T(0) ? grad_out[i] : T(0);
  return g;
}

namespace {

struct AxisLayout {
  std::int64_t outer, extent, inner;
};

AxisLayout axis_layout(const Shape& s, std::size_t axis, const char* what) {
  if (axis >= s.size()) {
    throw ShapeError(std::string(what) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + to_string(s));
  }
  AxisLayout L{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) L.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) L.inner *= s[i];
  return L;
}

}  // namespace

template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis) {
  const AxisLayout L = axis_layout(x.shape(), axis, "softmax");
  BasicTensor<T> y(x.shape());
  std::vector<double> buf(static_cast<std::size_t>(L.extent));
  for (std::int64_t o = 0; o < L.outer; ++o) {
    for (std::int64_t i = 0; i < L.inner; ++i) {
      const std::int64_t base = o * L.extent * L.inner + i;
      double mx = -INFINITY;
      for (std::int64_t k = 0; k < L.extent; ++k) mx = std::max(mx, static_cast<double>(x[static_cast<std::size_t>(base + k * L.inner)]));
      double s = 0.0;
      for (std::int64_t k = 0; k < L.extent; ++k) {
        buf[static_cast<std::size_t>(k)] = std::exp(static_cast<double>(x[static_cast<std::size_t>(base + k * L.inner)]) - mx);
        s += buf[static_cast<std::size_t>(k)];
      }
      for (std::int64_t k = 0; k < L.extent; ++k) {
        y[static_cast<std::size_t>(base + k * L.inner)] = static_cast<T>(buf[static_cast<std::size_t>(k)] / s);
      }
    }
  }
  return y;
}

template <class T>
BasicTensor<T> softmax_backward(const BasicTensor<T>& y, const BasicTensor<T>& grad_out,
                                std::size_t axis) {
  require_same_shape(y.shape(), grad_out.shape(), "softmax_backward");
  const AxisLayout L = axis_layout(y.shape(), axis, "softmax_backward");
  BasicTensor<T> g(y.shape());
  for (std::int64_t o = 0; o < L.outer; ++o) {
    for (std::int64_t i = 0; i < L.inner; ++i) {
      const std::int64_t base = o * L.extent * L.inner + i;
      double dot = 0.0;
      for (std::int64_t k = 0; k < L.extent; ++k) {
        const auto idx = static_cast<std::size_t>(base + k * L.inner);
        dot += static_cast<double>(y[idx]) * static_cast<double>(grad_out[idx]);
      }
      for (std::int64_t k = 0; k < L.extent; ++k) {
        const auto idx = static_cast<std::size_t>(base + k * L.inner);
        g[idx] = static_cast<T>(static_cast<double>(y[idx]) * (static_cast<double>(grad_out[idx]) - dot));
      }
    }
  }
  return g;
}

namespace {

// Per-axis linear sampling table: out[o] = (1-l)*in[i0] + l*in[i1].
struct AxisSampler {
  std::vector<std::int64_t> i0, i1;
  std::vector<double> lambda;
};

AxisSampler make_sampler(std::int64_t in, std::int64_t out, double scale) {
  AxisSampler s;
  s.i0.resize(static_cast<std::size_t>(out));
  s.i1.resize(static_cast<std::size_t>(out));
  s.lambda.resize(static_cast<std::size_t>(out));
  for (std::int64_t o = 0; o < out; ++o) {
    double src;
    if constexpr (kAlignCorners) {
      src = out > 1 ? static_cast<double>(o) * static_cast<double>(in - 1) / static_cast<double>(out - 1) : 0.0;
    } else {
      src = (static_cast<double>(o) + 0.5) / scale - 0.5;
      if (src < 0.0) src = 0.0;
    }
    std::int64_t lo = static_cast<std::int64_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const std::int64_t hi = std::min(lo + 1, in - 1);
    const auto oi = static_cast<std::size_t>(o);
    s.i0[oi] = lo;
    s.i1[oi] = hi;
    s.lambda[oi] = hi == lo ? 0.0 : src - static_cast<double>(lo);
  }
  return s;
}

struct InterpPlan {
  std::int64_t outer = 1;
  std::array<std::int64_t, 3> in{1, 1, 1};
  std::array<std::int64_t, 3> out{1, 1, 1};
  std::array<AxisSampler, 3> axes;
};

InterpPlan make_interp_plan(const Shape& in_shape, const std::vector<double>& scales,
                            InterpMode mode) {
  const std::size_t r = mode == InterpMode::bilinear ? 2 : 3;
  if (in_shape.size() < r + 1) {
    throw ShapeError("interpolate needs rank >= " + std::to_string(r + 1) + ", got " +
                     to_string(in_shape));
  }
  if (scales.size() != r) {
    throw ShapeError("interpolate expects " + std::to_string(r) + " scale factors, got " +
                     std::to_string(scales.size()));
  }
  InterpPlan plan;
  const std::size_t lead = in_shape.size() - r;
  for (std::size_t i = 0; i < lead; ++i) plan.outer *= in_shape[i];
  const std::size_t first = 3 - r;
  for (std::size_t a = 0; a < 3; ++a) {
    if (a < first) {
      plan.axes[a] = make_sampler(1, 1, 1.0);
      continue;
    }
    const double sc = scales[a - first];
    if (!(sc > 0.0)) throw ShapeError("interpolate scale factors must be positive");
    const std::int64_t in = in_shape[lead + a - first];
    const std::int64_t out = static_cast<std::int64_t>(std::floor(static_cast<double>(in) * sc));
    if (out < 1) throw ShapeError("interpolate output extent would be empty");
    plan.in[a] = in;
    plan.out[a] = out;
    plan.axes[a] = make_sampler(in, out, sc);
  }
  return plan;
}

Shape interp_output_shape(const Shape& in_shape, const InterpPlan& plan, std::size_t r) {
  Shape s(in_shape.begin(), in_shape.end() - static_cast<std::ptrdiff_t>(r));
  for (std::size_t a = 3 - r; a < 3; ++a) s.push_back(plan.out[a]);
  return s;
}

}  // namespace

template <class T>
BasicTensor<T> interpolate(const BasicTensor<T>& x, const std::vector<double>& scales,
                           InterpMode mode) {
  const std::size_t r = mode == InterpMode::bilinear ? 2 : 3;
  const InterpPlan P = make_interp_plan(x.shape(), scales, mode);
  BasicTensor<T> y(interp_output_shape(x.shape(), P, r));
  const std::int64_t in_plane = P.in[0] * P.in[1] * P.in[2];
  const std::int64_t out_plane = P.out[0] * P.out[1] * P.out[2];
  for (std::int64_t o = 0; o < P.outer; ++o) {
    const T* src = x.data() + o * in_plane;
    T* dst = y.data() + o * out_plane;
    for (std::int64_t z = 0; z < P.out[0]; ++z) {
      const auto zi = static_cast<std::size_t>(z);
      for (std::int64_t yy = 0; yy < P.out[1]; ++yy) {
        const auto yi = static_cast<std::size_t>(yy);
        for (std::int64_t xx = 0; xx < P.out[2]; ++xx) {
          const auto xi = static_cast<std::size_t>(xx);
          double v = 0.0;
          for (int dz = 0; dz < 2; ++dz) {
            const double wz = dz ? P.axes[0].lambda[zi] : 1.0 - P.axes[0].lambda[zi];
            const std::int64_t iz = dz ? P.axes[0].i1[zi] : P.axes[0].i0[zi];
            for (int dy = 0; dy < 2; ++dy) {
              const double wy = dy ? P.axes[1].lambda[yi] : 1.0 - P.axes[1].lambda[yi];
              const std::int64_t iy = dy ? P.axes[1].i1[yi] : P.axes[1].i0[yi];
              for (int dx = 0; dx < 2; ++dx) {
                const double wx = dx ? P.axes[2].lambda[xi] : 1.0 - P.axes[2].lambda[xi];
                const std::int64_t ix = dx ? P.axes[2].i1[xi] : P.axes[2].i0[xi];
                v += wz * wy * wx * static_cast<double>(src[(iz * P.in[1] + iy) * P.in[2] + ix]);
              }
            }
          }
          dst[(z * P.out[1] + yy) * P.out[2] + xx] = static_cast<T>(v);
        }
      }
    }
  }
  return y;
}

template <class T>
BasicTensor<T> interpolate_backward(const Shape& input_shape, const BasicTensor<T>& grad_out,
                                    const std::vector<double>& scales, InterpMode mode) {
  const std::size_t r = mode == InterpMode::bilinear ? 2 : 3;
  const InterpPlan P = make_interp_plan(input_shape, scales, mode);
  require_same_shape(grad_out.shape(), interp_output_shape(input_shape, P, r),
                     "interpolate_backward");
  const std::int64_t in_plane = P.in[0] * P.in[1] * P.in[2];
  const std::int64_t out_plane = P.out[0] * P.out[1] * P.out[2];
  BasicTensor<T> gx(input_shape);
  std::vector<double> acc(static_cast<std::size_t>(in_plane));
  for (std::int64_t o = 0; o < P.outer; ++o) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const T* g = grad_out.data() + o * out_plane;
    for (std::int64_t z = 0; z < P.out[0]; ++z) {
      const auto zi = static_cast<std::size_t>(z);
      for (std::int64_t yy = 0; yy < P.out[1]; ++yy) {
        const auto yi = static_cast<std::size_t>(yy);
        for (std::int64_t xx = 0; xx < P.out[2]; ++xx) {
          const auto xi = static_cast<std::size_t>(xx);
          const double gv = static_cast<double>(g[(z * P.out[1] + yy) * P.out[2] + xx]);
          for (int dz = 0; dz < 2; ++dz) {
            const double wz = dz ? P.axes[0].lambda[zi] : 1.0 - P.axes[0].lambda[zi];
            const std::int64_t iz = dz ? P.axes[0].i1[zi] : P.axes[0].i0[zi];
            for (int dy = 0; dy < 2; ++dy) {
              const double wy = dy ? P.axes[1].lambda[yi] : 1.0 - P.axes[1].lambda[yi];
              const std::int64_t iy = dy ? P.axes[1].i1[yi] : P.axes[1].i0[yi];
              for (int dx = 0; dx < 2; ++dx) {
                const double wx = dx ? P.axes[2].lambda[xi] : 1.0 - P.axes[2].lambda[xi];
                const std::int64_t ix = dx ? P.axes[2].i1[xi] : P.axes[2].i0[xi];
                acc[static_cast<std::size_t>((iz * P.in[1] + iy) * P.in[2] + ix)] += wz * wy * wx * gv;
              }
            }
          }
        }
      }
    }
    T* dst = gx.data() + o * in_plane;
    for (std::int64_t i = 0; i < in_plane; ++i) dst[i] = static_cast<T>(acc[static_cast<std::size_t>(i)]);
  }
  return gx;
}

#define MSNET_INSTANTIATE_OPS(T)                                                              \
  template BasicTensor<T> conv(const BasicTensor<T>&, const ConvParams<T>&);                   \
  template BasicTensor<T> conv_transposed(const BasicTensor<T>&, const ConvParams<T>&);        \
  template BasicTensor<T> conv_backward_input(const BasicTensor<T>&, const BasicTensor<T>&,    \
                                              const Shape&, const ConvOptions&);               \
  template BasicTensor<T> conv_backward_weight(const BasicTensor<T>&, const BasicTensor<T>&,   \
                                               const Shape&, const ConvOptions&);              \
  template BasicTensor<T> channel_sum(const BasicTensor<T>&);                                  \
  template BasicTensor<T> batch_norm(const BasicTensor<T>&, const BasicTensor<T>&,             \
                                     const BasicTensor<T>&, BasicTensor<T>&, BasicTensor<T>&,  \
                                     BnMode, double, double, BnSaved*);                        \
  template BnGrads<T> batch_norm_backward(const BasicTensor<T>&, const BasicTensor<T>&,        \
                                          const BnSaved&, const BasicTensor<T>&, BnMode);      \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                         \
  template BasicTensor<T> relu_backward(const BasicTensor<T>&, const BasicTensor<T>&);         \
  template BasicTensor<T> softmax(const BasicTensor<T>&, std::size_t);                         \
  template BasicTensor<T> softmax_backward(const BasicTensor<T>&, const BasicTensor<T>&,       \
                                           std::size_t);                                       \
  template BasicTensor<T> interpolate(const BasicTensor<T>&, const std::vector<double>&,       \
                                      InterpMode);                                             \
  template BasicTensor<T> interpolate_backward(const Shape&, const BasicTensor<T>&,            \
                                               const std::vector<double>&, InterpMode);

MSNET_INSTANTIATE_OPS(float)
MSNET_INSTANTIATE_OPS(double)

#undef MSNET_INSTANTIATE_OPS

}  // namespace msnet
