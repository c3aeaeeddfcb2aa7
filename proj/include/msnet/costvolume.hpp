#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msnet/blocks.hpp"

namespace msnet {

/// out(x) = f(x - d) for x >= d and 0 elsewhere, along the last axis of an
/// [N,C,H,W] tensor. Valid for 0 <= d <= W.
template <class T>
BasicTensor<T> shift_right(const BasicTensor<T>& f, std::int64_t d);

/// [N,D,H,W] mean over channels of left * shifted right. Levels d >= W
/// produce all-zero planes, as do positions x < d in every volume below.
template <class T>
BasicTensor<T> correlation_volume(const BasicTensor<T>& left, const BasicTensor<T>& right, std::int64_t levels);

/// [N,2C,D,H,W]; channels [0,C) hold left, [C,2C) the right view shifted by d.
template <class T>
BasicTensor<T> concat_volume(const BasicTensor<T>& left, const BasicTensor<T>& right, std::int64_t levels);

/// [N,Ng,D,H,W] group-wise correlation, each group averaged over its C/Ng channels.
template <class T>
BasicTensor<T> gwc_volume(const BasicTensor<T>& left, const BasicTensor<T>& right, std::int64_t levels,
                          std::int64_t groups);

/// [N,2C,H,W] with channel 2c = left c and 2c+1 = right c.
template <class T>
BasicTensor<T> interlace(const BasicTensor<T>& left, const BasicTensor<T>& right);

enum class InterlaceOrder { interlaced, concatenated };

namespace ad {

template <class T>
Var<T> concat_volume(const Var<T>& left, const Var<T>& right, std::int64_t levels);

template <class T>
Var<T> gwc_volume(const Var<T>& left, const Var<T>& right, std::int64_t levels, std::int64_t groups);

/// One [N*L, 1, 2C, H, W] batch, entry n*L + j holding the pair (left, right
/// shifted by levels[j]) merged along the depth axis in the given order.
template <class T>
Var<T> disparity_pairs(const Var<T>& left, const Var<T>& right, const std::vector<std::int64_t>& levels,
                       InterlaceOrder order);

}  // namespace ad

/// Layer schedule of the learnable interlacing subnetwork.
struct InterlaceSpec {
  struct Layer {
    std::int64_t channels = 0;
    int depth_stride = 1;  // kernel depth equals the stride
  };

  int group = 4;                   // channels taken from each view per kernel
  std::int64_t feature_channels = 32;
  std::vector<Layer> layers;       // 3D conv stack, BN + ReLU after each
  int final_kernel = 3;            // 2D conv to one channel

  /// Three layers with F2 = 2 F1, F3 = F1, first stride 2i and the remaining
  /// C/i depth split between the last two layers.
  static InterlaceSpec for_group(int group, std::int64_t feature_channels, std::int64_t first_channels = 16);

  /// Throws ConfigError unless the stack maps depth 2C to exactly 1.
  void validate() const;
  std::vector<ConvSpec> conv_specs() const;
  ConvSpec final_spec() const;
};

/// Learnable cost volume: the same small 3D network runs on every disparity
/// level and reduces each interlaced feature pair to one matching score.
class InterlacedCostVolume {
 public:
  InterlacedCostVolume(std::string name, InterlaceSpec spec, InterlaceOrder order = InterlaceOrder::interlaced);

  const std::string& name() const { return name_; }
  const InterlaceSpec& spec() const { return spec_; }
  InterlaceOrder order() const { return order_; }

  /// Cost of `levels` evaluations on an h x w feature grid.
  LayerCost cost(const Grid& features, std::int64_t levels) const;
  void declare(ad::ParamStore<float>& store, Rng& rng) const;

  /// [N,D,H,W] for disparities 0..levels-1.
  template <class T>
  ad::Var<T> forward(ad::Tape<T>& tape, ad::ParamStore<T>& store, const ad::Var<T>& left,
                     const ad::Var<T>& right, std::int64_t levels, BnMode mode) const;

  /// Output plane j holds the score for disparity levels[j].
  template <class T>
  ad::Var<T> forward_levels(ad::Tape<T>& tape, ad::ParamStore<T>& store, const ad::Var<T>& left,
                            const ad::Var<T>& right, const std::vector<std::int64_t>& levels,
                            BnMode mode) const;

 private:
  std::string name_;
  InterlaceSpec spec_;
  InterlaceOrder order_;
  std::vector<std::unique_ptr<ConvUnit>> stack_;
  std::unique_ptr<ConvUnit> final_;
};

}  // namespace msnet
