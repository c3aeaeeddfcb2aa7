#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "msnet/autodiff.hpp"
#include "msnet/layer_cost.hpp"
#include "msnet/rng.hpp"

namespace msnet {

/// One convolution with optional batch norm and ReLU. Per-axis arrays are
/// ordered (D, H, W); the D entries are ignored for rank 2.
struct ConvSpec {
  int rank = 2;
  std::int64_t cin = 0;
  std::int64_t cout = 0;
  std::array<int, 3> kernel{1, 3, 3};
  std::array<int, 3> stride{1, 1, 1};
  std::array<int, 3> padding{0, 1, 1};
  std::array<int, 3> dilation{1, 1, 1};
  std::array<int, 3> output_padding{0, 0, 0};
  int groups = 1;
  bool transposed = false;
  bool bias = false;
  bool batch_norm = true;
  bool relu = true;

  /// Cubic/square kernel k with padding dilation * (k - 1) / 2.
  static ConvSpec make(int rank, std::int64_t cin, std::int64_t cout, int k, int stride = 1,
                       int dilation = 1, int groups = 1);
  /// Transposed k x k (x k) convolution doubling every spatial extent.
  static ConvSpec upsample(int rank, std::int64_t cin, std::int64_t cout, int k = 3);

  void validate() const;
  ConvOptions options() const;
  Shape weight_shape() const;
  std::int64_t taps() const;
  /// Dense-equivalent MACs per output position.
  std::uint64_t macs_per_position() const;
  /// Weights, bias and batch norm affine pair.
  std::uint64_t param_count() const;
  Grid output_grid(const Grid& in) const;
};

enum class BlockKind { std_conv, v1, v2, residual_basic };

std::string to_string(BlockKind kind);
/// Accepts "std", "std_conv", "v1", "v2", "residual_basic".
BlockKind parse_block_kind(const std::string& text);

struct BlockSpec {
  BlockKind kind = BlockKind::std_conv;
  int rank = 2;
  std::int64_t cin = 0;
  std::int64_t cout = 0;
  int k = 3;
  int stride = 1;
  int t = 1;
  int dilation = 1;
  /// ReLU after the last batch norm (std_conv and v1; v2 never has one).
  bool final_relu = true;
  /// Realization of the two inner 3x3 convolutions of residual_basic.
  BlockKind inner = BlockKind::std_conv;
  /// Expansion factor of v2 inner convolutions of residual_basic.
  int inner_t = 1;

  void validate() const;
  /// v2 adds its input iff stride == 1 and cin == cout.
  bool v2_residual() const { return stride == 1 && cin == cout; }
};

/// Parameterized network piece. Parameters live in an external ParamStore
/// under "<name>.<...>"; the module only holds structure. The same module
/// serves f32 inference/training and f64 gradient checks.
class Module {
 public:
  explicit Module(std::string name) : name_(std::move(name)) {}
  virtual ~Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  const std::string& name() const { return name_; }
  virtual std::int64_t out_channels() const = 0;
  /// Throws ShapeError when the input extents are not supported.
  virtual Grid output_grid(const Grid& in) const = 0;
  virtual LayerCost cost(const Grid& in) const = 0;
  /// Registers parameters with Kaiming fan-out conv weights, BN gamma 1,
  /// beta 0, running mean 0 and running variance 1.
  virtual void declare(ad::ParamStore<float>& store, Rng& rng) const = 0;

  virtual ad::Var<float> forward(ad::Tape<float>& tape, ad::ParamStore<float>& store,
                                 const ad::Var<float>& x, BnMode mode) const = 0;
  virtual ad::Var<double> forward(ad::Tape<double>& tape, ad::ParamStore<double>& store,
                                  const ad::Var<double>& x, BnMode mode) const = 0;

 private:
  std::string name_;
};

#define MSNET_MODULE_FORWARD                                                                     \
  ad::Var<float> forward(ad::Tape<float>& tape, ad::ParamStore<float>& store,                   \
                         const ad::Var<float>& x, BnMode mode) const override {                 \
    return forward_impl(tape, store, x, mode);                                                   \
  }                                                                                              \
  ad::Var<double> forward(ad::Tape<double>& tape, ad::ParamStore<double>& store,                \
                          const ad::Var<double>& x, BnMode mode) const override {               \
    return forward_impl(tape, store, x, mode);                                                   \
  }

class ConvUnit final : public Module {
 public:
  ConvUnit(std::string name, ConvSpec spec);

  const ConvSpec& spec() const { return spec_; }
  std::int64_t out_channels() const override { return spec_.cout; }
  Grid output_grid(const Grid& in) const override { return spec_.output_grid(in); }
  LayerCost cost(const Grid& in) const override;
  void declare(ad::ParamStore<float>& store, Rng& rng) const override;
  MSNET_MODULE_FORWARD

 private:
  template <class T>
  ad::Var<T> forward_impl(ad::Tape<T>& tape, ad::ParamStore<T>& store, const ad::Var<T>& x,
                          BnMode mode) const;

  ConvSpec spec_;
};

/// Depthwise k-conv -> BN -> ReLU -> pointwise conv -> BN (-> ReLU).
class V1Block final : public Module {
 public:
  V1Block(std::string name, const BlockSpec& spec);

  std::int64_t out_channels() const override { return pointwise_.out_channels(); }
  Grid output_grid(const Grid& in) const override;
  LayerCost cost(const Grid& in) const override;
  void declare(ad::ParamStore<float>& store, Rng& rng) const override;
  MSNET_MODULE_FORWARD

 private:
  template <class T>
  ad::Var<T> forward_impl(ad::Tape<T>& tape, ad::ParamStore<T>& store, const ad::Var<T>& x,
                          BnMode mode) const;

  ConvUnit depthwise_;
  ConvUnit pointwise_;
};

/// Pointwise expansion to t * cin -> depthwise k-conv -> linear pointwise
/// projection, each followed by BN, ReLU after the first two; adds the input
/// when stride == 1 and cin == cout.
class V2Block final : public Module {
 public:
  V2Block(std::string name, const BlockSpec& spec);

  bool residual() const { return residual_; }
  std::int64_t out_channels() const override { return project_.out_channels(); }
  Grid output_grid(const Grid& in) const override;
  LayerCost cost(const Grid& in) const override;
  void declare(ad::ParamStore<float>& store, Rng& rng) const override;
  MSNET_MODULE_FORWARD

 private:
  template <class T>
  ad::Var<T> forward_impl(ad::Tape<T>& tape, ad::ParamStore<T>& store, const ad::Var<T>& x,
                          BnMode mode) const;

  ConvUnit expand_;
  ConvUnit depthwise_;
  ConvUnit project_;
  bool residual_;
};

/// Two 3x3 convolutions (BN after each, ReLU after the first) plus a skip
/// path, then ReLU. The skip is a 1x1 conv + BN when the stride or channel
/// count changes.
class ResidualBasicBlock final : public Module {
 public:
  ResidualBasicBlock(std::string name, const BlockSpec& spec);

  std::int64_t out_channels() const override { return second_->out_channels(); }
  Grid output_grid(const Grid& in) const override;
  LayerCost cost(const Grid& in) const override;
  void declare(ad::ParamStore<float>& store, Rng& rng) const override;
  MSNET_MODULE_FORWARD

 private:
  template <class T>
  ad::Var<T> forward_impl(ad::Tape<T>& tape, ad::ParamStore<T>& store, const ad::Var<T>& x,
                          BnMode mode) const;

  std::unique_ptr<Module> first_;
  std::unique_ptr<Module> second_;
  std::unique_ptr<ConvUnit> skip_;
};

/// std_conv -> ConvUnit (BN, ReLU per final_relu); v1, v2, residual_basic -> the blocks above.
std::unique_ptr<Module> make_block(const std::string& name, const BlockSpec& spec);

struct HourglassSpec {
  int rank = 3;
  std::int64_t width = 32;
  BlockKind kind = BlockKind::std_conv;
  int t = 1;

  void validate() const;
};

/// Encoder-decoder with two stride-2 stages and two transposed-conv stages:
///   conv1: width -> 2w (stride 2), conv2: 2w -> 2w,
///   conv3: 2w -> 4w (stride 2), conv4: 4w -> 4w,
///   conv5: up(4w -> 2w) + BN, + redir2(conv2), ReLU,
///   conv6: up(2w -> w) + BN, + redir1(input), ReLU.
/// conv1..conv4 and the redir paths use the spec's block kind (std redir is
/// a 1x1 conv + BN). Every hourglass spatial extent must be divisible by 4.
class Hourglass final : public Module {
 public:
  Hourglass(std::string name, const HourglassSpec& spec);

  const HourglassSpec& spec() const { return spec_; }
  std::int64_t out_channels() const override { return spec_.width; }
  Grid output_grid(const Grid& in) const override;
  LayerCost cost(const Grid& in) const override;
  void declare(ad::ParamStore<float>& store, Rng& rng) const override;
  MSNET_MODULE_FORWARD

 private:
  template <class T>
  ad::Var<T> forward_impl(ad::Tape<T>& tape, ad::ParamStore<T>& store, const ad::Var<T>& x,
                          BnMode mode) const;

  HourglassSpec spec_;
  std::vector<std::unique_ptr<Module>> down_;  // conv1..conv4
  ConvUnit up1_;                               // conv5
  ConvUnit up2_;                               // conv6
  std::unique_ptr<Module> redir1_;
  std::unique_ptr<Module> redir2_;
};

/// Spatial extents of a [N, C, (D,) H, W] tensor.
Grid grid_of(const Shape& shape);

}  // namespace msnet
