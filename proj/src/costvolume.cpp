#include "msnet/costvolume.hpp"

#include <algorithm>

#include "msnet/parallel.hpp"

namespace msnet {

namespace {

struct Dims {
  std::int64_t n, c, h, w;
};

Dims check_pair(const Shape& left, const Shape& right, const char* what) {
  if (left.size() != 4) {
    throw ShapeError(std::string(what) + ": expected [N,C,H,W] features, got " + to_string(left));
  }
  require_same_shape(left, right, what);
  return {left[0], left[1], left[2], left[3]};
}

void check_levels(std::int64_t levels, const char* what) {
  if (levels < 1) {
    throw ShapeError(std::string(what) + ": disparity levels must be positive, got " + std::to_string(levels));
  }
}

void check_groups(std::int64_t channels, std::int64_t groups) {
  if (groups < 1 || channels % groups != 0) {
    throw ShapeError("gwc_volume: groups " + std::to_string(groups) + " must divide channels " +
                     std::to_string(channels));
  }
}

template <class T>
BasicTensor<T> gwc_forward(const BasicTensor<T>& left, const BasicTensor<T>& right, std::int64_t levels,
                           std::int64_t groups) {
  const Dims s = check_pair(left.shape(), right.shape(), "gwc_volume");
  check_levels(levels, "gwc_volume");
  check_groups(s.c, groups);
  const std::int64_t per = s.c / groups;
  const double scale = 1.0 / static_cast<double>(per);
  const std::int64_t plane = s.h * s.w;
  BasicTensor<T> out({s.n, groups, levels, s.h, s.w});
  parallel_for(s.n * groups * levels, [&](std::int64_t begin, std::int64_t end) {
    std::vector<double> acc(static_cast<std::size_t>(plane));
    for (std::int64_t job = begin; job < end; ++job) {
      const std::int64_t d = job % levels;
      const std::int64_t g = (job / levels) % groups;
      const std::int64_t n = job / (levels * groups);
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::int64_t c = g * per; c < (g + 1) * per; ++c) {
        const T* l = left.data() + (n * s.c + c) * plane;
        const T* r = right.data() + (n * s.c + c) * plane;
        for (std::int64_t y = 0; y < s.h; ++y) {
          for (std::int64_t x = d; x < s.w; ++x) {
            acc[static_cast<std::size_t>(y * s.w + x)] +=
                static_cast<double>(l[y * s.w + x]) * static_cast<double>(r[y * s.w + x - d]);
          }
        }
      }
      T* o = out.data() + job * plane;
      for (std::int64_t i = 0; i < plane; ++i) o[i] = static_cast<T>(acc[static_cast<std::size_t>(i)] * scale);
    }
  });
  return out;
}

/// Adds the gwc input gradients into the non-null targets.
template <class T>
void gwc_backward(const BasicTensor<T>& left, const BasicTensor<T>& right, const BasicTensor<T>& gy,
                  std::int64_t groups, BasicTensor<T>* gl, BasicTensor<T>* gr) {
  const Dims s{left.dim(0), left.dim(1), left.dim(2), left.dim(3)};
  const std::int64_t levels = gy.dim(2);
  const std::int64_t per = s.c / groups;
  const double scale = 1.0 / static_cast<double>(per);
  const std::int64_t plane = s.h * s.w;
  BasicTensor<T> dl(left.shape());
  BasicTensor<T> dr(right.shape());
  parallel_for(s.n * s.c, [&](std::int64_t begin, std::int64_t end) {
    std::vector<double> al(static_cast<std::size_t>(plane));
    std::vector<double> ar(static_cast<std::size_t>(plane));
    for (std::int64_t job = begin; job < end; ++job) {
      const std::int64_t c = job % s.c;
      const std::int64_t n = job / s.c;
      const std::int64_t g = c / per;
      const T* l = left.data() + job * plane;
      const T* r = right.data() + job * plane;
      std::fill(al.begin(), al.end(), 0.0);
      std::fill(ar.begin(), ar.end(), 0.0);
      for (std::int64_t d = 0; d < levels; ++d) {
        const T* go = gy.data() + ((n * groups + g) * levels + d) * plane;
        for (std::int64_t y = 0; y < s.h; ++y) {
          for (std::int64_t x = d; x < s.w; ++x) {
            const double gv = static_cast<double>(go[y * s.w + x]) * scale;
            al[static_cast<std::size_t>(y * s.w + x)] += gv * static_cast<double>(r[y * s.w + x - d]);
            ar[static_cast<std::size_t>(y * s.w + x - d)] += gv * static_cast<double>(l[y * s.w + x]);
          }
        }
      }
      for (std::int64_t i = 0; i < plane; ++i) {
        dl.data()[job * plane + i] = static_cast<T>(al[static_cast<std::size_t>(i)]);
        dr.data()[job * plane + i] = static_cast<T>(ar[static_cast<std::size_t>(i)]);
      }
    }
  });
  if (gl) ad::accumulate(*gl, dl);
  if (gr) ad::accumulate(*gr, dr);
}

template <class T>
BasicTensor<T> concat_forward(const BasicTensor<T>& left, const BasicTensor<T>& right, std::int64_t levels) {
  const Dims s = check_pair(left.shape(), right.shape(), "concat_volume");
  check_levels(levels, "concat_volume");
  const std::int64_t plane = s.h * s.w;
  BasicTensor<T> out({s.n, 2 * s.c, levels, s.h, s.w});
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::int64_t c = 0; c < s.c; ++c) {
      const T* l = left.data() + (n * s.c + c) * plane;
      const T* r = right.data() + (n * s.c + c) * plane;
      for (std::int64_t d = 0; d < levels; ++d) {
        T* ol = out.data() + ((n * 2 * s.c + c) * levels + d) * plane;
        T* orr = out.data() + ((n * 2 * s.c + s.c + c) * levels + d) * plane;
        std::copy(l, l + plane, ol);
        for (std::int64_t y = 0; y < s.h; ++y) {
          for (std::int64_t x = d; x < s.w; ++x) orr[y * s.w + x] = r[y * s.w + x - d];
        }
      }
    }
  }
  return out;
}

template <class T>
void concat_backward(const BasicTensor<T>& gy, const Dims& s, BasicTensor<T>* gl, BasicTensor<T>* gr) {
  const std::int64_t levels = gy.dim(2);
  const std::int64_t plane = s.h * s.w;
  BasicTensor<T> dl({s.n, s.c, s.h, s.w});
  BasicTensor<T> dr({s.n, s.c, s.h, s.w});
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::int64_t c = 0; c < s.c; ++c) {
      T* l = dl.data() + (n * s.c + c) * plane;
      T* r = dr.data() + (n * s.c + c) * plane;
      for (std::int64_t d = 0; d < levels; ++d) {
        const T* gl_in = gy.data() + ((n * 2 * s.c + c) * levels + d) * plane;
        const T* gr_in = gy.data() + ((n * 2 * s.c + s.c + c) * levels + d) * plane;
        for (std::int64_t i = 0; i < plane; ++i) l[i] += gl_in[i];
        for (std::int64_t y = 0; y < s.h; ++y) {
          for (std::int64_t x = d; x < s.w; ++x) r[y * s.w + x - d] += gr_in[y * s.w + x];
        }
      }
    }
  }
  if (gl) ad::accumulate(*gl, dl);
  if (gr) ad::accumulate(*gr, dr);
}

struct PairLayout {
  bool interlaced;
  std::int64_t c;
  std::int64_t left_slot(std::int64_t ch) const { return interlaced ? 2 * ch : ch; }
  std::int64_t right_slot(std::int64_t ch) const { return interlaced ? 2 * ch + 1 : c + ch; }
};

void check_pair_levels(const std::vector<std::int64_t>& levels) {
  if (levels.empty()) throw ShapeError("disparity_pairs: no disparity levels");
  for (std::int64_t d : levels) {
    if (d < 0) throw ShapeError("disparity_pairs: negative disparity " + std::to_string(d));
  }
}

template <class T>
BasicTensor<T> pairs_forward(const BasicTensor<T>& left, const BasicTensor<T>& right,
                             const std::vector<std::int64_t>& levels, InterlaceOrder order) {
  const Dims s = check_pair(left.shape(), right.shape(), "disparity_pairs");
  check_pair_levels(levels);
  const auto count = static_cast<std::int64_t>(levels.size());
  const PairLayout lay{order == InterlaceOrder::interlaced, s.c};
  const std::int64_t plane = s.h * s.w;
  BasicTensor<T> out({s.n * count, 1, 2 * s.c, s.h, s.w});
  parallel_for(s.n * count, [&](std::int64_t begin, std::int64_t end) {
    for (std::int64_t b = begin; b < end; ++b) {
      const std::int64_t n = b / count;
      const std::int64_t d = levels[static_cast<std::size_t>(b % count)];
      for (std::int64_t c = 0; c < s.c; ++c) {
        const T* l = left.data() + (n * s.c + c) * plane;
        const T* r = right.data() + (n * s.c + c) * plane;
        T* ol = out.data() + (b * 2 * s.c + lay.left_slot(c)) * plane;
        T* orr = out.data() + (b * 2 * s.c + lay.right_slot(c)) * plane;
        std::copy(l, l + plane, ol);
        for (std::int64_t y = 0; y < s.h; ++y) {
          for (std::int64_t x = d; x < s.w; ++x) orr[y * s.w + x] = r[y * s.w + x - d];
        }
      }
    }
  });
  return out;
}

template <class T>
void pairs_backward(const BasicTensor<T>& gy, const Dims& s, const std::vector<std::int64_t>& levels,
                    InterlaceOrder order, BasicTensor<T>* gl, BasicTensor<T>* gr) {
  const auto count = static_cast<std::int64_t>(levels.size());
  const PairLayout lay{order == InterlaceOrder::interlaced, s.c};
  const std::int64_t plane = s.h * s.w;
  BasicTensor<T> dl({s.n, s.c, s.h, s.w});
  BasicTensor<T> dr({s.n, s.c, s.h, s.w});
  parallel_for(s.n * s.c, [&](std::int64_t begin, std::int64_t end) {
    for (std::int64_t job = begin; job < end; ++job) {
      const std::int64_t n = job / s.c;
      const std::int64_t c = job % s.c;
      T* l = dl.data() + job * plane;
      T* r = dr.data() + job * plane;
      for (std::int64_t j = 0; j < count; ++j) {
        const std::int64_t b = n * count + j;
        const std::int64_t d = levels[static_cast<std::size_t>(j)];
        const T* gl_in = gy.data() + (b * 2 * s.c + lay.left_slot(c)) * plane;
        const T* gr_in = gy.data() + (b * 2 * s.c + lay.right_slot(c)) * plane;
        for (std::int64_t i = 0; i < plane; ++i) l[i] += gl_in[i];
        for (std::int64_t y = 0; y < s.h; ++y) {
          for (std::int64_t x = d; x < s.w; ++x) r[y * s.w + x - d] += gr_in[y * s.w + x];
        }
      }
    }
  });
  if (gl) ad::accumulate(*gl, dl);
  if (gr) ad::accumulate(*gr, dr);
}

}  // namespace

template <class T>
BasicTensor<T> shift_right(const BasicTensor<T>& f, std::int64_t d) {
  if (f.rank() != 4) throw ShapeError("shift_right: expected [N,C,H,W], got " + to_string(f.shape()));
  const std::int64_t w = f.dim(3);
  if (d < 0 || d > w) {
    throw ShapeError("shift_right: disparity " + std::to_string(d) + " outside [0, " + std::to_string(w) + "]");
  }
  BasicTensor<T> out(f.shape());
  const std::int64_t rows = static_cast<std::int64_t>(f.size()) / w;
  for (std::int64_t row = 0; row < rows; ++row) {
    for (std::int64_t x = d; x < w; ++x) out.data()[row * w + x] = f.data()[row * w + x - d];
  }
  return out;
}

template <class T>
BasicTensor<T> correlation_volume(const BasicTensor<T>& left, const BasicTensor<T>& right, std::int64_t levels) {
  BasicTensor<T> v = gwc_forward(left, right, levels, 1);
  return std::move(v).reshaped({left.dim(0), levels, left.dim(2), left.dim(3)});
}

template <class T>
BasicTensor<T> concat_volume(const BasicTensor<T>& left, const BasicTensor<T>& right, std::int64_t levels) {
  return concat_forward(left, right, levels);
}

template <class T>
BasicTensor<T> gwc_volume(const BasicTensor<T>& left, const BasicTensor<T>& right, std::int64_t levels,
                          std::int64_t groups) {
  return gwc_forward(left, right, levels, groups);
}

template <class T>
BasicTensor<T> interlace(const BasicTensor<T>& left, const BasicTensor<T>& right) {
  const Dims s = check_pair(left.shape(), right.shape(), "interlace");
  BasicTensor<T> pairs = pairs_forward(left, right, {0}, InterlaceOrder::interlaced);
  return std::move(pairs).reshaped({s.n, 2 * s.c, s.h, s.w});
}

namespace ad {

template <class T>
Var<T> concat_volume(const Var<T>& left, const Var<T>& right, std::int64_t levels) {
  return left.tape().apply(
      "concat_volume", {left, right},
      [levels](const ValueRefs<T>& in) { return concat_forward(*in[0], *in[1], levels); },
      [](const ValueRefs<T>& in, const BasicTensor<T>&, const BasicTensor<T>& gy,
         const std::vector<BasicTensor<T>*>& g) {
        const Shape& s = in[0]->shape();
        concat_backward(gy, Dims{s[0], s[1], s[2], s[3]}, g[0], g[1]);
      });
}

template <class T>
Var<T> gwc_volume(const Var<T>& left, const Var<T>& right, std::int64_t levels, std::int64_t groups) {
  return left.tape().apply(
      "gwc_volume", {left, right},
      [levels, groups](const ValueRefs<T>& in) { return gwc_forward(*in[0], *in[1], levels, groups); },
      [groups](const ValueRefs<T>& in, const BasicTensor<T>&, const BasicTensor<T>& gy,
               const std::vector<BasicTensor<T>*>& g) { gwc_backward(*in[0], *in[1], gy, groups, g[0], g[1]); });
}

template <class T>
Var<T> disparity_pairs(const Var<T>& left, const Var<T>& right, const std::vector<std::int64_t>& levels,
                       InterlaceOrder order) {
  return left.tape().apply(
      "disparity_pairs", {left, right},
      [levels, order](const ValueRefs<T>& in) { return pairs_forward(*in[0], *in[1], levels, order); },
      [levels, order](const ValueRefs<T>& in, const BasicTensor<T>&, const BasicTensor<T>& gy,
                      const std::vector<BasicTensor<T>*>& g) {
        const Shape& s = in[0]->shape();
        pairs_backward(gy, Dims{s[0], s[1], s[2], s[3]}, levels, order, g[0], g[1]);
      });
}

}  // namespace ad

// ---------------------------------------------------------------------------
// InterlaceSpec

InterlaceSpec InterlaceSpec::for_group(int group, std::int64_t feature_channels, std::int64_t first_channels) {
  if (group < 1 || feature_channels < 1 || feature_channels % group != 0) {
    throw ConfigError("interlace group " + std::to_string(group) + " must divide the feature channels " +
                      std::to_string(feature_channels));
  }
  InterlaceSpec s;
  s.group = group;
  s.feature_channels = feature_channels;
  const auto rest = static_cast<int>(feature_channels / group);
  const int last = rest % 2 == 0 ? 2 : 1;
  s.layers = {{first_channels, 2 * group}, {2 * first_channels, rest / last}, {first_channels, last}};
  s.validate();
  return s;
}

void InterlaceSpec::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("interlace spec: " + msg); };
  if (group < 1 || feature_channels < 1 || feature_channels % group != 0) {
    fail("group " + std::to_string(group) + " must divide the feature channels " + std::to_string(feature_channels));
  }
  if (layers.size() != 3) fail("expected three 3D layers, got " + std::to_string(layers.size()));
  if (layers[0].depth_stride != 2 * group) fail("first depth stride must be twice the group size");
  if (layers[1].channels != 2 * layers[0].channels || layers[2].channels != layers[0].channels) {
    fail("layer channels must be F, 2F, F");
  }
  std::int64_t depth = 2 * feature_channels;
  for (const Layer& l : layers) {
    if (l.channels < 1 || l.depth_stride < 1) fail("layer channels and strides must be positive");
    if (depth % l.depth_stride != 0) {
      fail("depth " + std::to_string(depth) + " is not divisible by stride " + std::to_string(l.depth_stride));
    }
    depth /= l.depth_stride;
  }
  if (depth != 1) fail("strides reduce depth " + std::to_string(2 * feature_channels) + " to " + std::to_string(depth) + ", not 1");
  if (final_kernel < 1 || final_kernel % 2 == 0) fail("final kernel must be odd and positive");
}

std::vector<ConvSpec> InterlaceSpec::conv_specs() const {
  std::vector<ConvSpec> out;
  std::int64_t cin = 1;
  for (const Layer& l : layers) {
    ConvSpec s = ConvSpec::make(3, cin, l.channels, 3);
    s.kernel[0] = l.depth_stride;
    s.stride[0] = l.depth_stride;
    s.padding[0] = 0;
    out.push_back(s);
    cin = l.channels;
  }
  return out;
}

ConvSpec InterlaceSpec::final_spec() const {
  ConvSpec s = ConvSpec::make(2, layers.back().channels, 1, final_kernel);
  s.batch_norm = false;
  s.relu = false;
  return s;
}

// ---------------------------------------------------------------------------
// InterlacedCostVolume

InterlacedCostVolume::InterlacedCostVolume(std::string name, InterlaceSpec spec, InterlaceOrder order)
    : name_(std::move(name)), spec_(std::move(spec)), order_(order) {
  spec_.validate();
  const std::vector<ConvSpec> specs = spec_.conv_specs();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    stack_.push_back(std::make_unique<ConvUnit>(name_ + ".conv" + std::to_string(i + 1), specs[i]));
  }
  final_ = std::make_unique<ConvUnit>(name_ + ".final", spec_.final_spec());
}

LayerCost InterlacedCostVolume::cost(const Grid& features, std::int64_t levels) const {
  LayerCost per = LayerCost::group(name_);
  Grid g{2 * spec_.feature_channels, features.h, features.w};
  for (const auto& unit : stack_) {
    per.add(unit->cost(g));
    g = unit->output_grid(g);
  }
  per.add(final_->cost({1, g.h, g.w}));
  return per.repeated(static_cast<std::uint64_t>(levels));
}

void InterlacedCostVolume::declare(ad::ParamStore<float>& store, Rng& rng) const {
  for (const auto& unit : stack_) unit->declare(store, rng);
  final_->declare(store, rng);
}

template <class T>
ad::Var<T> InterlacedCostVolume::forward(ad::Tape<T>& tape, ad::ParamStore<T>& store, const ad::Var<T>& left,
                                         const ad::Var<T>& right, std::int64_t levels, BnMode mode) const {
  check_levels(levels, "interlaced_cost_volume");
  std::vector<std::int64_t> all(static_cast<std::size_t>(levels));
  for (std::int64_t d = 0; d < levels; ++d) all[static_cast<std::size_t>(d)] = d;
  return forward_levels(tape, store, left, right, all, mode);
}

template <class T>
ad::Var<T> InterlacedCostVolume::forward_levels(ad::Tape<T>& tape, ad::ParamStore<T>& store,
                                                const ad::Var<T>& left, const ad::Var<T>& right,
                                                const std::vector<std::int64_t>& levels, BnMode mode) const {
  const Dims s = check_pair(left.shape(), right.shape(), "interlaced_cost_volume");
  if (s.c != spec_.feature_channels) {
    throw ShapeError(name_ + ": expected " + std::to_string(spec_.feature_channels) + " feature channels, got " +
                     std::to_string(s.c));
  }
  const auto count = static_cast<std::int64_t>(levels.size());
  ad::Var<T> y = ad::disparity_pairs(left, right, levels, order_);
  for (const auto& unit : stack_) y = unit->forward(tape, store, y, mode);
  y = ad::reshape(y, {s.n * count, spec_.layers.back().channels, s.h, s.w});
  y = final_->forward(tape, store, y, mode);
  return ad::reshape(y, {s.n, count, s.h, s.w});
}

#define MSNET_COSTVOLUME_INSTANTIATE(T)                                                                      \
  template BasicTensor<T> shift_right(const BasicTensor<T>&, std::int64_t);                                 \
  template BasicTensor<T> correlation_volume(const BasicTensor<T>&, const BasicTensor<T>&, std::int64_t);   \
  template BasicTensor<T> concat_volume(const BasicTensor<T>&, const BasicTensor<T>&, std::int64_t);        \
  template BasicTensor<T> gwc_volume(const BasicTensor<T>&, const BasicTensor<T>&, std::int64_t,            \
                                     std::int64_t);                                                         \
  template BasicTensor<T> interlace(const BasicTensor<T>&, const BasicTensor<T>&);                          \
  template ad::Var<T> ad::concat_volume(const ad::Var<T>&, const ad::Var<T>&, std::int64_t);                \
  template ad::Var<T> ad::gwc_volume(const ad::Var<T>&, const ad::Var<T>&, std::int64_t, std::int64_t);     \
  template ad::Var<T> ad::disparity_pairs(const ad::Var<T>&, const ad::Var<T>&,                             \
                                          const std::vector<std::int64_t>&, InterlaceOrder);                \
  template ad::Var<T> InterlacedCostVolume::forward(ad::Tape<T>&, ad::ParamStore<T>&, const ad::Var<T>&,    \
                                                    const ad::Var<T>&, std::int64_t, BnMode) const;         \
  template ad::Var<T> InterlacedCostVolume::forward_levels(ad::Tape<T>&, ad::ParamStore<T>&,                \
                                                           const ad::Var<T>&, const ad::Var<T>&,            \
                                                           const std::vector<std::int64_t>&, BnMode) const;

MSNET_COSTVOLUME_INSTANTIATE(float)
MSNET_COSTVOLUME_INSTANTIATE(double)

}  // namespace msnet
