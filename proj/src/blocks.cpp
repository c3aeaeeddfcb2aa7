#include "msnet/blocks.hpp"

#include "msnet/instrument.hpp"

namespace msnet {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

template <class T>
ad::Var<T> param(ad::Tape<T>& tape, ad::ParamStore<T>& store, const std::string& name) {
  return tape.param(store.get(name));
}

void check_input(const Shape& s, int rank, std::int64_t channels, const std::string& who) {
  if (s.size() != static_cast<std::size_t>(rank) + 2) {
    throw ShapeError(who + ": expected a rank-" + std::to_string(rank + 2) + " input, got " +
                     to_string(s));
  }
  if (s[1] != channels) {
    throw ShapeError(who + ": channel axis mismatch, expected " + std::to_string(channels) +
                     " channels, got " + std::to_string(s[1]));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// ConvSpec

ConvSpec ConvSpec::make(int rank, std::int64_t cin, std::int64_t cout, int k, int stride,
                        int dilation, int groups) {
  ConvSpec s;
  s.rank = rank;
  s.cin = cin;
  s.cout = cout;
  s.groups = groups;
  const int pad = dilation * (k - 1) / 2;
  const int first = rank == 3 ? 0 : 1;
  s.kernel = {1, 1, 1};
  s.padding = {0, 0, 0};
  for (int a = first; a < 3; ++a) {
    const auto i = static_cast<std::size_t>(a);
    s.kernel[i] = k;
    s.stride[i] = stride;
    s.padding[i] = pad;
    s.dilation[i] = dilation;
  }
  return s;
}

ConvSpec ConvSpec::upsample(int rank, std::int64_t cin, std::int64_t cout, int k) {
  ConvSpec s = make(rank, cin, cout, k, 2);
  s.transposed = true;
  s.relu = false;
  const int first = rank == 3 ? 0 : 1;
  for (int a = first; a < 3; ++a) s.output_padding[static_cast<std::size_t>(a)] = 1;
  return s;
}

void ConvSpec::validate() const {
  require(rank == 2 || rank == 3, "conv rank must be 2 or 3");
  require(cin > 0 && cout > 0, "conv channel counts must be positive");
  require(!(transposed && bias), "transposed convolutions carry no bias");
  require(groups >= 1 && cin % groups == 0 && cout % groups == 0,
          "conv groups " + std::to_string(groups) + " must divide cin " + std::to_string(cin) +
              " and cout " + std::to_string(cout));
  for (int a = rank == 3 ? 0 : 1; a < 3; ++a) {
    const auto i = static_cast<std::size_t>(a);
    require(kernel[i] >= 1 && stride[i] >= 1 && dilation[i] >= 1 && padding[i] >= 0,
            "conv kernel, stride and dilation must be positive and padding nonnegative");
    require(!transposed || output_padding[i] < stride[i],
            "transposed conv output padding must be smaller than the stride");
  }
}

ConvOptions ConvSpec::options() const {
  ConvOptions o;
  o.spatial_rank = rank;
  o.stride = stride;
  o.padding = padding;
  o.dilation = dilation;
  o.output_padding = transposed ? output_padding : std::array<int, 3>{0, 0, 0};
  o.groups = groups;
  if (rank == 2) {
    o.stride[0] = 1;
    o.padding[0] = 0;
    o.dilation[0] = 1;
    o.output_padding[0] = 0;
  }
  return o;
}

Shape ConvSpec::weight_shape() const {
  Shape s = transposed ? Shape{cin, cout / groups} : Shape{cout, cin / groups};
  if (rank == 3) s.push_back(kernel[0]);
  s.push_back(kernel[1]);
  s.push_back(kernel[2]);
  return s;
}

std::int64_t ConvSpec::taps() const {
  return (rank == 3 ? kernel[0] : 1) * static_cast<std::int64_t>(kernel[1]) * kernel[2];
}

std::uint64_t ConvSpec::macs_per_position() const {
  return static_cast<std::uint64_t>(cin / groups * taps() * cout);
}

std::uint64_t ConvSpec::param_count() const {
  std::uint64_t n = static_cast<std::uint64_t>(cin / groups * cout * taps());
  if (bias) n += static_cast<std::uint64_t>(cout);
  if (batch_norm) n += static_cast<std::uint64_t>(2 * cout);
  return n;
}

Grid ConvSpec::output_grid(const Grid& in) const {
  const std::array<std::int64_t, 3> ext{in.d, in.h, in.w};
  std::array<std::int64_t, 3> out{1, 1, 1};
  for (int a = 0; a < 3; ++a) {
    const auto i = static_cast<std::size_t>(a);
    if (a == 0 && rank == 2) {
      out[i] = ext[i];
      continue;
    }
    const std::int64_t span = static_cast<std::int64_t>(dilation[i]) * (kernel[i] - 1) + 1;
    if (transposed) {
      out[i] = (ext[i] - 1) * stride[i] - 2 * padding[i] + span + output_padding[i];
    } else {
      const std::int64_t padded = ext[i] + 2 * padding[i];
      if (padded < span) throw ShapeError("kernel does not fit the input extent");
      out[i] = (padded - span) / stride[i] + 1;
    }
    if (out[i] < 1) throw ShapeError("convolution output extent is empty");
  }
  return {out[0], out[1], out[2]};
}

// ---------------------------------------------------------------------------
// Block kinds

std::string to_string(BlockKind kind) {
  switch (kind) {
    case BlockKind::std_conv: return "std";
    case BlockKind::v1: return "v1";
    case BlockKind::v2: return "v2";
    case BlockKind::residual_basic: return "residual_basic";
  }
  return "?";
}

BlockKind parse_block_kind(const std::string& text) {
  if (text == "std" || text == "std_conv") return BlockKind::std_conv;
  if (text == "v1") return BlockKind::v1;
  if (text == "v2") return BlockKind::v2;
  if (text == "residual_basic") return BlockKind::residual_basic;
  throw ConfigError("unknown block kind '" + text + "'");
}

void BlockSpec::validate() const {
  require(rank == 2 || rank == 3, "block rank must be 2 or 3");
  require(cin > 0 && cout > 0, "block channel counts must be positive");
  require(k >= 1 && k % 2 == 1, "block kernel size must be odd");
  require(stride >= 1 && dilation >= 1, "block stride and dilation must be positive");
  require(t >= 1, "expansion factor must be >= 1");
  require(kind != BlockKind::residual_basic || rank == 2, "residual_basic blocks are 2D only");
  require(inner != BlockKind::residual_basic, "residual_basic cannot nest itself");
}

Grid grid_of(const Shape& shape) {
  if (shape.size() == 4) return {1, shape[2], shape[3]};
  if (shape.size() == 5) return {shape[2], shape[3], shape[4]};
  throw ShapeError("expected a rank-4 or rank-5 feature tensor, got " + to_string(shape));
}

// ---------------------------------------------------------------------------
// ConvUnit

ConvUnit::ConvUnit(std::string name, ConvSpec spec) : Module(std::move(name)), spec_(spec) {
  spec_.validate();
}

LayerCost ConvUnit::cost(const Grid& in) const {
  const Grid out = spec_.output_grid(in);
  return LayerCost::leaf(name(), static_cast<std::uint64_t>(out.positions()) * spec_.macs_per_position(),
                         spec_.param_count());
}

void ConvUnit::declare(ad::ParamStore<float>& store, Rng& rng) const {
  store.add(name() + ".weight", kaiming_normal_fan_out(spec_.weight_shape(), rng));
  if (spec_.bias) store.add(name() + ".bias", Tensor({spec_.cout}, 0.0f));
  if (spec_.batch_norm) {
    store.add(name() + ".bn.weight", Tensor({spec_.cout}, 1.0f));
    store.add(name() + ".bn.bias", Tensor({spec_.cout}, 0.0f));
    store.add(name() + ".bn.running_mean", Tensor({spec_.cout}, 0.0f), false);
    store.add(name() + ".bn.running_var", Tensor({spec_.cout}, 1.0f), false);
  }
}

template <class T>
ad::Var<T> ConvUnit::forward_impl(ad::Tape<T>& tape, ad::ParamStore<T>& store, const ad::Var<T>& x,
                                  BnMode mode) const {
  check_input(x.shape(), spec_.rank, spec_.cin, name());
  ad::Var<T> w = param(tape, store, name() + ".weight");
  ad::Var<T> y;
  {
    instrument::LabelScope label(name());
    if (spec_.transposed) {
      y = ad::conv_transposed(x, w, spec_.options());
    } else {
      ad::Var<T> b = spec_.bias ? param(tape, store, name() + ".bias") : ad::Var<T>();
      y = ad::conv(x, w, b, spec_.options());
    }
  }
  if (spec_.batch_norm) {
    y = ad::batch_norm(y, param(tape, store, name() + ".bn.weight"),
                       param(tape, store, name() + ".bn.bias"),
                       store.get(name() + ".bn.running_mean"), store.get(name() + ".bn.running_var"),
                       mode);
  }
  if (spec_.relu) y = ad::relu(y);
  return y;
}

// ---------------------------------------------------------------------------
// V1

namespace {

ConvSpec with_relu(ConvSpec s, bool relu) {
  s.relu = relu;
  return s;
}

}  // namespace

V1Block::V1Block(std::string name, const BlockSpec& spec)
    : Module(name),
      depthwise_(name + ".dw", ConvSpec::make(spec.rank, spec.cin, spec.cin, spec.k, spec.stride,
                                              spec.dilation, static_cast<int>(spec.cin))),
      pointwise_(name + ".pw", with_relu(ConvSpec::make(spec.rank, spec.cin, spec.cout, 1), spec.final_relu)) {
  spec.validate();
}

Grid V1Block::output_grid(const Grid& in) const { return pointwise_.output_grid(depthwise_.output_grid(in)); }

LayerCost V1Block::cost(const Grid& in) const {
  const Grid mid = depthwise_.output_grid(in);
  return LayerCost::group(name(), {depthwise_.cost(in), pointwise_.cost(mid)});
}

void V1Block::declare(ad::ParamStore<float>& store, Rng& rng) const {
  depthwise_.declare(store, rng);
  pointwise_.declare(store, rng);
}

template <class T>
ad::Var<T> V1Block::forward_impl(ad::Tape<T>& tape, ad::ParamStore<T>& store, const ad::Var<T>& x,
                                 BnMode mode) const {
  return pointwise_.forward(tape, store, depthwise_.forward(tape, store, x, mode), mode);
}

// ---------------------------------------------------------------------------
// V2

V2Block::V2Block(std::string name, const BlockSpec& spec)
    : Module(name),
      expand_(name + ".expand", ConvSpec::make(spec.rank, spec.cin, spec.cin * spec.t, 1)),
      depthwise_(name + ".dw", ConvSpec::make(spec.rank, spec.cin * spec.t, spec.cin * spec.t, spec.k,
                                              spec.stride, spec.dilation,
                                              static_cast<int>(spec.cin * spec.t))),
      project_(name + ".project", with_relu(ConvSpec::make(spec.rank, spec.cin * spec.t, spec.cout, 1), false)),
      residual_(spec.v2_residual()) {
  spec.validate();
}

Grid V2Block::output_grid(const Grid& in) const { return depthwise_.output_grid(in); }

LayerCost V2Block::cost(const Grid& in) const {
  const Grid mid = depthwise_.output_grid(in);
  return LayerCost::group(name(), {expand_.cost(in), depthwise_.cost(in), project_.cost(mid)});
}

void V2Block::declare(ad::ParamStore<float>& store, Rng& rng) const {
  expand_.declare(store, rng);
  depthwise_.declare(store, rng);
  project_.declare(store, rng);
}

template <class T>
ad::Var<T> V2Block::forward_impl(ad::Tape<T>& tape, ad::ParamStore<T>& store, const ad::Var<T>& x,
                                 BnMode mode) const {
  ad::Var<T> y = expand_.forward(tape, store, x, mode);
  y = depthwise_.forward(tape, store, y, mode);
  y = project_.forward(tape, store, y, mode);
  return residual_ ? ad::add(y, x) : y;
}

// ---------------------------------------------------------------------------
// Residual basic block

namespace {

BlockSpec inner_spec(const BlockSpec& outer, std::int64_t cin, int stride, bool relu) {
  BlockSpec s;
  s.kind = outer.inner;
  s.rank = outer.rank;
  s.cin = cin;
  s.cout = outer.cout;
  s.k = 3;
  s.stride = stride;
  s.t = outer.inner_t;
  s.dilation = outer.dilation;
  s.final_relu = relu;
  return s;
}

}  // namespace

ResidualBasicBlock::ResidualBasicBlock(std::string name, const BlockSpec& spec) : Module(name) {
  spec.validate();
  first_ = make_block(name + ".conv1", inner_spec(spec, spec.cin, spec.stride, true));
  second_ = make_block(name + ".conv2", inner_spec(spec, spec.cout, 1, false));
  if (spec.stride != 1 || spec.cin != spec.cout) {
    skip_ = std::make_unique<ConvUnit>(
        name + ".skip", with_relu(ConvSpec::make(spec.rank, spec.cin, spec.cout, 1, spec.stride), false));
  }
}

Grid ResidualBasicBlock::output_grid(const Grid& in) const {
  return second_->output_grid(first_->output_grid(in));
}

LayerCost ResidualBasicBlock::cost(const Grid& in) const {
  const Grid mid = first_->output_grid(in);
  LayerCost c = LayerCost::group(name(), {first_->cost(in), second_->cost(mid)});
  if (skip_) c.add(skip_->cost(in));
  return c;
}

void ResidualBasicBlock::declare(ad::ParamStore<float>& store, Rng& rng) const {
  first_->declare(store, rng);
  second_->declare(store, rng);
  if (skip_) skip_->declare(store, rng);
}

template <class T>
ad::Var<T> ResidualBasicBlock::forward_impl(ad::Tape<T>& tape, ad::ParamStore<T>& store,
                                            const ad::Var<T>& x, BnMode mode) const {
  ad::Var<T> y = second_->forward(tape, store, first_->forward(tape, store, x, mode), mode);
  ad::Var<T> s = skip_ ? skip_->forward(tape, store, x, mode) : x;
  return ad::relu(ad::add(y, s));
}

std::unique_ptr<Module> make_block(const std::string& name, const BlockSpec& spec) {
  spec.validate();
  switch (spec.kind) {
    case BlockKind::std_conv:
      return std::make_unique<ConvUnit>(
          name, with_relu(ConvSpec::make(spec.rank, spec.cin, spec.cout, spec.k, spec.stride, spec.dilation),
                          spec.final_relu));
    case BlockKind::v1: return std::make_unique<V1Block>(name, spec);
    case BlockKind::v2: return std::make_unique<V2Block>(name, spec);
    case BlockKind::residual_basic: return std::make_unique<ResidualBasicBlock>(name, spec);
  }
  throw ConfigError("unknown block kind");
}

// ---------------------------------------------------------------------------
// Hourglass

void HourglassSpec::validate() const {
  require(rank == 2 || rank == 3, "hourglass rank must be 2 or 3");
  require(width > 0, "hourglass width must be positive");
  require(t >= 1, "hourglass expansion factor must be >= 1");
  require(kind != BlockKind::residual_basic, "hourglass blocks must be std, v1 or v2");
}

namespace {

BlockSpec unit_spec(const HourglassSpec& hg, std::int64_t cin, std::int64_t cout, int stride) {
  BlockSpec s;
  s.kind = hg.kind;
  s.rank = hg.rank;
  s.cin = cin;
  s.cout = cout;
  s.k = 3;
  s.stride = stride;
  s.t = hg.t;
  return s;
}

std::unique_ptr<Module> make_redir(const std::string& name, const HourglassSpec& hg, std::int64_t c) {
  if (hg.kind == BlockKind::std_conv) {
    return std::make_unique<ConvUnit>(name, with_relu(ConvSpec::make(hg.rank, c, c, 1), false));
  }
  BlockSpec s = unit_spec(hg, c, c, 1);
  s.final_relu = false;
  return make_block(name, s);
}

}  // namespace

Hourglass::Hourglass(std::string name, const HourglassSpec& spec)
    : Module(name),
      spec_(spec),
      up1_(name + ".conv5", ConvSpec::upsample(spec.rank, 4 * spec.width, 2 * spec.width)),
      up2_(name + ".conv6", ConvSpec::upsample(spec.rank, 2 * spec.width, spec.width)) {
  spec.validate();
  const std::int64_t w = spec.width;
  down_.push_back(make_block(name + ".conv1", unit_spec(spec, w, 2 * w, 2)));
  down_.push_back(make_block(name + ".conv2", unit_spec(spec, 2 * w, 2 * w, 1)));
  down_.push_back(make_block(name + ".conv3", unit_spec(spec, 2 * w, 4 * w, 2)));
  down_.push_back(make_block(name + ".conv4", unit_spec(spec, 4 * w, 4 * w, 1)));
  redir1_ = make_redir(name + ".redir1", spec, w);
  redir2_ = make_redir(name + ".redir2", spec, 2 * w);
}

Grid Hourglass::output_grid(const Grid& in) const {
  const char* axes[3] = {"depth", "height", "width"};
  const std::int64_t ext[3] = {in.d, in.h, in.w};
  for (int a = spec_.rank == 3 ? 0 : 1; a < 3; ++a) {
    if (ext[a] % 4 != 0) {
      throw ShapeError(name() + ": " + axes[a] + " extent " + std::to_string(ext[a]) +
                       " is not divisible by 4 and cannot round-trip two stride-2 stages");
    }
  }
  return in;
}

LayerCost Hourglass::cost(const Grid& in) const {
  output_grid(in);
  LayerCost c = LayerCost::group(name());
  Grid g = in;
  Grid after_conv2;
  for (std::size_t i = 0; i < down_.size(); ++i) {
    c.add(down_[i]->cost(g));
    g = down_[i]->output_grid(g);
    if (i == 1) after_conv2 = g;
  }
  c.add(up1_.cost(g));
  c.add(redir2_->cost(after_conv2));
  c.add(up2_.cost(after_conv2));
  c.add(redir1_->cost(in));
  return c;
}

void Hourglass::declare(ad::ParamStore<float>& store, Rng& rng) const {
  for (const auto& m : down_) m->declare(store, rng);
  up1_.declare(store, rng);
  redir2_->declare(store, rng);
  up2_.declare(store, rng);
  redir1_->declare(store, rng);
}

template <class T>
ad::Var<T> Hourglass::forward_impl(ad::Tape<T>& tape, ad::ParamStore<T>& store, const ad::Var<T>& x,
                                   BnMode mode) const {
  check_input(x.shape(), spec_.rank, spec_.width, name());
  output_grid(grid_of(x.shape()));
  ad::Var<T> c1 = down_[0]->forward(tape, store, x, mode);
  ad::Var<T> c2 = down_[1]->forward(tape, store, c1, mode);
  ad::Var<T> c3 = down_[2]->forward(tape, store, c2, mode);
  ad::Var<T> c4 = down_[3]->forward(tape, store, c3, mode);
  ad::Var<T> c5 = ad::relu(ad::add(up1_.forward(tape, store, c4, mode), redir2_->forward(tape, store, c2, mode)));
  return ad::relu(ad::add(up2_.forward(tape, store, c5, mode), redir1_->forward(tape, store, x, mode)));
}

#define MSNET_INSTANTIATE_FORWARD(Class, T)                                                    \
  template ad::Var<T> Class::forward_impl<T>(ad::Tape<T>&, ad::ParamStore<T>&, const ad::Var<T>&, \
                                             BnMode) const;
#define MSNET_INSTANTIATE_BOTH(Class)   \
  MSNET_INSTANTIATE_FORWARD(Class, float) \
  MSNET_INSTANTIATE_FORWARD(Class, double)

MSNET_INSTANTIATE_BOTH(ConvUnit)
MSNET_INSTANTIATE_BOTH(V1Block)
MSNET_INSTANTIATE_BOTH(V2Block)
MSNET_INSTANTIATE_BOTH(ResidualBasicBlock)
MSNET_INSTANTIATE_BOTH(Hourglass)

#undef MSNET_INSTANTIATE_BOTH
#undef MSNET_INSTANTIATE_FORWARD

}  // namespace msnet
