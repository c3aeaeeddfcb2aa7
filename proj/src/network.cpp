#include "msnet/network.hpp"

#include <algorithm>
#include <cmath>

namespace msnet {

std::string to_string(VolumeKind kind) {
  switch (kind) {
    case VolumeKind::interlaced: return "interlaced";
    case VolumeKind::concatenated: return "concatenated";
    case VolumeKind::gwc: return "gwc";
  }
  return "unknown";
}

VolumeKind parse_volume_kind(const std::string& text) {
  if (text == "interlaced") return VolumeKind::interlaced;
  if (text == "concatenated") return VolumeKind::concatenated;
  if (text == "gwc") return VolumeKind::gwc;
  throw ConfigError("unknown cost volume kind '" + text + "'");
}

// ---------------------------------------------------------------------------
// ModelConfig

ModelConfig ModelConfig::preset(const std::string& name) {
  ModelConfig c;
  auto standard = [&c] {
    c.first_convs = c.backbone_blocks = c.pre_hourglass = c.hourglass = BlockKind::std_conv;
    c.first_t = c.backbone_t = c.pre_hourglass_t = c.hourglass_t = 1;
    c.num_hourglasses = 1;
  };
  auto two_d = [&c] {
    c.rank = 2;
    c.hourglass_width = 48;
    c.volume = VolumeKind::interlaced;
  };
  if (name == "mobile3d" || name == "3d") {
    c.name = "mobile3d";
  } else if (name == "mobile2d" || name == "2d") {
    c.name = "mobile2d";
    two_d();
  } else if (name == "baseline3d") {
    c.name = name;
    standard();
  } else if (name == "baseline2d") {
    c.name = name;
    standard();
    two_d();
  } else if (name == "micro") {
    c.name = name;
    two_d();
    c.num_hourglasses = 1;
    c.hourglass_width = 6;
    c.d_max = 24;
    c.first_channels = 4;
    c.stage_channels = {4, 8, 16, 16};
    c.stage_blocks = {1, 2, 1, 1};
    c.reduction = {32, 16, 8, 8};
    c.interlace_group = 2;
    c.interlace_channels = 4;
  } else {
    throw ConfigError("unknown model '" + name + "' (expected baseline2d, baseline3d, mobile2d, mobile3d or micro)");
  }
  c.validate();
  return c;
}

std::int64_t ModelConfig::feature_channels() const {
  return stage_channels[1] + stage_channels[2] + stage_channels[3];
}

void ModelConfig::validate() const {
  auto require = [this](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(name + ": " + msg);
  };
  require(rank == 2 || rank == 3, "rank must be 2 or 3");
  require(d_max > 0 && d_max % 4 == 0, "d_max must be a positive multiple of 4");
  require(num_hourglasses >= 1, "at least one hourglass is required");
  require(loss_weights.size() >= static_cast<std::size_t>(num_hourglasses),
          "need one loss weight per hourglass");
  require(hourglass_width > 0, "hourglass width must be positive");
  require(first_channels > 0, "first conv channels must be positive");
  for (int i = 0; i < 4; ++i) {
    require(stage_channels[static_cast<std::size_t>(i)] > 0 && stage_blocks[static_cast<std::size_t>(i)] > 0,
            "backbone stages need positive channels and block counts");
  }
  for (BlockKind k : {first_convs, backbone_blocks, pre_hourglass, hourglass}) {
    require(k != BlockKind::residual_basic, "block substitutions must be std, v1 or v2");
  }
  for (int t : {first_t, backbone_t, pre_hourglass_t, hourglass_t}) require(t >= 1, "expansion factors must be >= 1");
  if (rank == 3) {
    require(volume == VolumeKind::gwc, "3D encoder-decoders take a group-wise correlation volume");
    require(levels() % 4 == 0, "3D hourglasses need d_max / 4 divisible by 4");
    require(gwc_groups >= 1 && feature_channels() % gwc_groups == 0, "gwc groups must divide the feature channels");
  } else {
    require(volume != VolumeKind::gwc, "2D encoder-decoders take an interlaced or concatenated volume");
    for (std::int64_t r : reduction) require(r > 0, "channel reduction widths must be positive");
    InterlaceSpec::for_group(interlace_group, reduced_channels(), interlace_channels);
  }
}

// ---------------------------------------------------------------------------
// Regression and losses

template <class T>
ad::Var<T> disparity_regression(const ad::Var<T>& logits) {
  if (logits.shape().size() != 4) {
    throw ShapeError("disparity_regression: expected [N,D,H,W] logits, got " + to_string(logits.shape()));
  }
  ad::Var<T> p = ad::softmax(logits, 1);
  return p.tape().apply(
      "expectation", {p},
      [](const ad::ValueRefs<T>& in) {
        const BasicTensor<T>& x = *in[0];
        const std::int64_t n = x.dim(0), d = x.dim(1), plane = x.dim(2) * x.dim(3);
        BasicTensor<T> y({n, x.dim(2), x.dim(3)});
        for (std::int64_t b = 0; b < n; ++b) {
          for (std::int64_t i = 0; i < plane; ++i) {
            double s = 0.0;
            for (std::int64_t k = 0; k < d; ++k) s += static_cast<double>(k) * x.data()[(b * d + k) * plane + i];
            y.data()[b * plane + i] = static_cast<T>(s);
          }
        }
        return y;
      },
      [](const ad::ValueRefs<T>& in, const BasicTensor<T>&, const BasicTensor<T>& gy,
         const std::vector<BasicTensor<T>*>& g) {
        if (!g[0]) return;
        const Shape& s = in[0]->shape();
        const std::int64_t n = s[0], d = s[1], plane = s[2] * s[3];
        BasicTensor<T> gx(s);
        for (std::int64_t b = 0; b < n; ++b)
          for (std::int64_t k = 0; k < d; ++k)
            for (std::int64_t i = 0; i < plane; ++i)
              gx.data()[(b * d + k) * plane + i] = static_cast<T>(k) * gy.data()[b * plane + i];
        ad::accumulate(*g[0], gx);
      });
}

template <class T>
ad::Var<T> smooth_l1_loss(const ad::Var<T>& pred, const BasicTensor<T>& gt, const BasicTensor<T>& mask) {
  require_same_shape(pred.shape(), gt.shape(), "smooth_l1_loss prediction vs ground truth");
  require_same_shape(gt.shape(), mask.shape(), "smooth_l1_loss ground truth vs mask");
  std::int64_t valid = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) valid += mask[i] != T(0);
  if (valid == 0) throw NumericError("smooth_l1_loss: no valid pixels");
  const double inv = 1.0 / static_cast<double>(valid);
  return pred.tape().apply(
      "smooth_l1", {pred},
      [gt, mask, inv](const ad::ValueRefs<T>& in) {
        double s = 0.0;
        for (std::size_t i = 0; i < gt.size(); ++i) {
          if (mask[i] == T(0)) continue;
          const double e = std::abs(static_cast<double>((*in[0])[i]) - static_cast<double>(gt[i]));
          s += e < 1.0 ? 0.5 * e * e : e - 0.5;
        }
        return BasicTensor<T>({1}, static_cast<T>(s * inv));
      },
      [gt, mask, inv](const ad::ValueRefs<T>& in, const BasicTensor<T>&, const BasicTensor<T>& gy,
                      const std::vector<BasicTensor<T>*>& g) {
        if (!g[0]) return;
        BasicTensor<T> gx(gt.shape());
        const double scale = static_cast<double>(gy[0]) * inv;
        for (std::size_t i = 0; i < gt.size(); ++i) {
          if (mask[i] == T(0)) continue;
          const double e = static_cast<double>((*in[0])[i]) - static_cast<double>(gt[i]);
          gx[i] = static_cast<T>(std::clamp(e, -1.0, 1.0) * scale);
        }
        ad::accumulate(*g[0], gx);
      });
}

template <class T>
ad::Var<T> training_loss(const ModelConfig& config, const StereoOutput<T>& out, const BasicTensor<T>& gt,
                         const BasicTensor<T>& mask) {
  if (out.heads.empty()) throw Error("training_loss: no head outputs");
  const std::size_t offset = config.loss_weights.size() - out.heads.size();
  ad::Var<T> total;
  for (std::size_t k = 0; k < out.heads.size(); ++k) {
    ad::Var<T> term = ad::scale(smooth_l1_loss(out.heads[k], gt, mask), config.loss_weights[offset + k]);
    total = total.defined() ? ad::add(total, term) : term;
  }
  return total;
}

// ---------------------------------------------------------------------------
// StereoNet

namespace {

BlockSpec block(BlockKind kind, int rank, std::int64_t cin, std::int64_t cout, int stride, int t, bool relu) {
  BlockSpec s;
  s.kind = kind;
  s.rank = rank;
  s.cin = cin;
  s.cout = cout;
  s.stride = stride;
  s.t = t;
  s.final_relu = relu;
  return s;
}

template <class T, class Range>
ad::Var<T> chain(const Range& modules, ad::Tape<T>& tape, ad::ParamStore<T>& store, ad::Var<T> x, BnMode mode) {
  for (const auto& m : modules) x = m->forward(tape, store, x, mode);
  return x;
}

template <class Range>
Grid chain_cost(const Range& modules, Grid g, LayerCost& into) {
  for (const auto& m : modules) {
    into.add(m->cost(g));
    g = m->output_grid(g);
  }
  return g;
}

}  // namespace

StereoNet::StereoNet(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const ModelConfig& c = config_;
  const std::int64_t fc = c.first_channels;
  for (int i = 0; i < 3; ++i) {
    first_.push_back(make_block("fe.first" + std::to_string(i),
                                block(c.first_convs, 2, i == 0 ? 3 : fc, fc, i == 0 ? 2 : 1, c.first_t, true)));
  }
  const std::array<int, 4> strides{1, 2, 1, 1};
  const std::array<int, 4> dilations{1, 1, 1, 2};
  std::int64_t cin = fc;
  for (std::size_t s = 0; s < 4; ++s) {
    for (int b = 0; b < c.stage_blocks[s]; ++b) {
      BlockSpec spec = block(BlockKind::residual_basic, 2, cin, c.stage_channels[s], b == 0 ? strides[s] : 1, 1, true);
      spec.dilation = dilations[s];
      spec.inner = c.backbone_blocks;
      spec.inner_t = c.backbone_t;
      stages_[s].push_back(make_block("fe.layer" + std::to_string(s + 1) + "." + std::to_string(b), spec));
      cin = c.stage_channels[s];
    }
  }

  std::int64_t volume_channels = c.gwc_groups;
  if (c.rank == 2) {
    cin = c.feature_channels();
    for (std::size_t j = 0; j < c.reduction.size(); ++j) {
      reduce_.push_back(std::make_unique<ConvUnit>("reduce." + std::to_string(j),
                                                   ConvSpec::make(2, cin, c.reduction[j], 1)));
      cin = c.reduction[j];
    }
    volume_ = std::make_unique<InterlacedCostVolume>(
        "cv", InterlaceSpec::for_group(c.interlace_group, c.reduced_channels(), c.interlace_channels),
        c.volume == VolumeKind::interlaced ? InterlaceOrder::interlaced : InterlaceOrder::concatenated);
    volume_channels = c.levels();
  }

  const std::int64_t w = c.hourglass_width;
  const int t = c.pre_hourglass_t;
  dres0_.push_back(make_block("dres0.0", block(c.pre_hourglass, c.rank, volume_channels, w, 1, t, true)));
  dres0_.push_back(make_block("dres0.1", block(c.pre_hourglass, c.rank, w, w, 1, t, true)));
  dres1_.push_back(make_block("dres1.0", block(c.pre_hourglass, c.rank, w, w, 1, t, true)));
  dres1_.push_back(make_block("dres1.1", block(c.pre_hourglass, c.rank, w, w, 1, t, false)));

  for (int k = 1; k <= c.num_hourglasses; ++k) {
    hourglasses_.push_back(std::make_unique<Hourglass>("hg" + std::to_string(k),
                                                       HourglassSpec{c.rank, w, c.hourglass, c.hourglass_t}));
    ConvSpec out = ConvSpec::make(c.rank, w, c.rank == 3 ? 1 : c.levels(), 3);
    out.batch_norm = false;
    out.relu = false;
    const std::string name = "head" + std::to_string(k);
    heads_.push_back({std::make_unique<ConvUnit>(name + ".0", ConvSpec::make(c.rank, w, w, 3)),
                      std::make_unique<ConvUnit>(name + ".1", out)});
  }
}

StereoNet::~StereoNet() = default;

void StereoNet::declare(ad::ParamStore<float>& store, Rng& rng) const {
  for (const auto& m : first_) m->declare(store, rng);
  for (const auto& stage : stages_)
    for (const auto& m : stage) m->declare(store, rng);
  for (const auto& m : reduce_) m->declare(store, rng);
  if (volume_) volume_->declare(store, rng);
  for (const auto& m : dres0_) m->declare(store, rng);
  for (const auto& m : dres1_) m->declare(store, rng);
  for (const auto& m : hourglasses_) m->declare(store, rng);
  for (const Head& h : heads_) {
    h.conv->declare(store, rng);
    h.out->declare(store, rng);
  }
}

ad::ParamStore<float> StereoNet::init(std::uint64_t seed) const {
  ad::ParamStore<float> store;
  Rng rng(seed);
  declare(store, rng);
  return store;
}

LayerCost StereoNet::feature_cost(const Grid& image) const {
  LayerCost fe = LayerCost::group("features");
  Grid g = chain_cost(first_, image, fe);
  for (const auto& stage : stages_) g = chain_cost(stage, g, fe);
  return fe;
}

LayerCost StereoNet::cost(std::int64_t height, std::int64_t width) const {
  check_input({1, 3, height, width}, {1, 3, height, width});
  const ModelConfig& c = config_;
  LayerCost total = LayerCost::group(c.name);
  total.add(feature_cost({1, height, width}).repeated(2));
  const Grid quarter{1, height / 4, width / 4};
  Grid g{c.levels(), quarter.h, quarter.w};
  if (c.rank == 2) {
    LayerCost red = LayerCost::group("reduction");
    chain_cost(reduce_, quarter, red);
    total.add(red.repeated(2));
    total.add(LayerCost::group("cost_volume", {volume_->cost(quarter, c.levels())}));
    g = quarter;
  }
  LayerCost ed = LayerCost::group("encoder_decoder");
  g = chain_cost(dres0_, g, ed);
  g = chain_cost(dres1_, g, ed);
  for (std::size_t k = 0; k < hourglasses_.size(); ++k) {
    ed.add(hourglasses_[k]->cost(g));
    const bool evaluated = k + 1 == hourglasses_.size();
    LayerCost head = LayerCost::group("head" + std::to_string(k + 1),
                                      {heads_[k].conv->cost(g), heads_[k].out->cost(g)});
    ed.add(evaluated ? head : head.repeated(0));
  }
  total.add(ed);
  return total;
}

void StereoNet::check_input(const Shape& left, const Shape& right) const {
  for (const Shape* s : {&left, &right}) {
    if (s->size() != 4 || (*s)[1] != 3) {
      throw ShapeError(config_.name + ": expected [N,3,H,W] images, got " + to_string(*s));
    }
  }
  require_same_shape(left, right, "left and right views");
  const std::int64_t m = config_.input_multiple();
  const char* axes[2] = {"height", "width"};
  for (std::size_t a = 0; a < 2; ++a) {
    const std::int64_t e = left[2 + a];
    if (e % m != 0) {
      throw ShapeError(config_.name + ": input " + axes[a] + " " + std::to_string(e) + " is not a multiple of " +
                       std::to_string(m));
    }
  }
}

template <class T>
ad::Var<T> StereoNet::extract_features(ad::Tape<T>& tape, ad::ParamStore<T>& store, const ad::Var<T>& image,
                                       BnMode mode) const {
  ad::Var<T> x = chain(first_, tape, store, image, mode);
  std::vector<ad::Var<T>> kept;
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    x = chain(stages_[s], tape, store, x, mode);
    if (s > 0) kept.push_back(x);
  }
  return ad::concat(kept, 1);
}

template <class T>
ad::Var<T> StereoNet::reduce_channels(ad::Tape<T>& tape, ad::ParamStore<T>& store, const ad::Var<T>& features,
                                      BnMode mode) const {
  if (config_.rank != 2) throw ConfigError(config_.name + ": channel reduction belongs to the 2D path");
  return chain(reduce_, tape, store, features, mode);
}

template <class T>
StereoOutput<T> StereoNet::forward(ad::Tape<T>& tape, ad::ParamStore<T>& store, const ad::Var<T>& left,
                                   const ad::Var<T>& right, BnMode mode) const {
  check_input(left.shape(), right.shape());
  const ModelConfig& c = config_;
  const std::int64_t n = left.dim(0), h = left.dim(2), w = left.dim(3);
  ad::Var<T> fl = extract_features(tape, store, left, mode);
  ad::Var<T> fr = extract_features(tape, store, right, mode);
  ad::Var<T> volume;
  if (c.rank == 2) {
    volume = volume_->forward(tape, store, reduce_channels(tape, store, fl, mode),
                              reduce_channels(tape, store, fr, mode), c.levels(), mode);
  } else {
    volume = ad::gwc_volume(fl, fr, c.levels(), c.gwc_groups);
  }
  ad::Var<T> cost0 = chain(dres0_, tape, store, volume, mode);
  cost0 = ad::add(chain(dres1_, tape, store, cost0, mode), cost0);

  StereoOutput<T> out;
  ad::Var<T> x = cost0;
  for (std::size_t k = 0; k < hourglasses_.size(); ++k) {
    x = hourglasses_[k]->forward(tape, store, x, mode);
    if (mode == BnMode::eval && k + 1 < hourglasses_.size()) continue;
    ad::Var<T> logits = heads_[k].out->forward(tape, store, heads_[k].conv->forward(tape, store, x, mode), mode);
    logits = ad::reshape(logits, {n, c.levels(), h / 4, w / 4});
    ad::Var<T> d = ad::scale(disparity_regression(logits), 4.0);
    d = ad::interpolate(ad::reshape(d, {n, 1, h / 4, w / 4}), {4.0, 4.0}, InterpMode::bilinear);
    out.heads.push_back(ad::reshape(d, {n, h, w}));
  }
  out.disparity = out.heads.back();
  return out;
}

#define MSNET_NETWORK_INSTANTIATE(T)                                                                           \
  template ad::Var<T> disparity_regression(const ad::Var<T>&);                                                 \
  template ad::Var<T> smooth_l1_loss(const ad::Var<T>&, const BasicTensor<T>&, const BasicTensor<T>&);         \
  template ad::Var<T> training_loss(const ModelConfig&, const StereoOutput<T>&, const BasicTensor<T>&,         \
                                    const BasicTensor<T>&);                                                    \
  template StereoOutput<T> StereoNet::forward(ad::Tape<T>&, ad::ParamStore<T>&, const ad::Var<T>&,             \
                                              const ad::Var<T>&, BnMode) const;                                \
  template ad::Var<T> StereoNet::extract_features(ad::Tape<T>&, ad::ParamStore<T>&, const ad::Var<T>&,         \
                                                  BnMode) const;                                               \
  template ad::Var<T> StereoNet::reduce_channels(ad::Tape<T>&, ad::ParamStore<T>&, const ad::Var<T>&, BnMode) \
      const;

MSNET_NETWORK_INSTANTIATE(float)
MSNET_NETWORK_INSTANTIATE(double)

}  // namespace msnet
