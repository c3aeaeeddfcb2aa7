#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "msnet/costvolume.hpp"

namespace msnet {

enum class VolumeKind { interlaced, concatenated, gwc };

std::string to_string(VolumeKind kind);
VolumeKind parse_volume_kind(const std::string& text);

/// Architecture description. Presets cover the two baselines, the two light
/// networks and a tiny 2D network used for gradient checks and toy training.
struct ModelConfig {
  std::string name = "mobile3d";
  int rank = 3;  // encoder-decoder convolution rank
  std::int64_t d_max = 192;
  int num_hourglasses = 3;
  std::int64_t hourglass_width = 32;

  BlockKind first_convs = BlockKind::v2;
  int first_t = 3;
  BlockKind backbone_blocks = BlockKind::v1;
  int backbone_t = 2;
  BlockKind pre_hourglass = BlockKind::v2;
  int pre_hourglass_t = 3;
  BlockKind hourglass = BlockKind::v2;
  int hourglass_t = 2;

  VolumeKind volume = VolumeKind::gwc;
  std::int64_t gwc_groups = 40;
  int interlace_group = 4;
  std::int64_t interlace_channels = 16;  // first interlace layer width

  std::int64_t first_channels = 32;
  std::array<std::int64_t, 4> stage_channels{32, 64, 128, 128};
  std::array<int, 4> stage_blocks{3, 16, 3, 3};
  std::vector<std::int64_t> reduction{256, 128, 64, 32};

  /// Per-hourglass loss weights; the last num_hourglasses entries are used.
  std::vector<double> loss_weights{0.5, 0.7, 1.0};

  /// "baseline2d", "baseline3d", "mobile2d", "mobile3d" or "micro"; "2d" and
  /// "3d" alias the light networks.
  static ModelConfig preset(const std::string& name);

  void validate() const;
  /// Disparity levels at quarter resolution.
  std::int64_t levels() const { return d_max / 4; }
  /// Channels of the concatenated backbone output.
  std::int64_t feature_channels() const;
  /// Channels entering the cost volume of the 2D path.
  std::int64_t reduced_channels() const { return reduction.empty() ? feature_channels() : reduction.back(); }
  /// Spatial extents of inputs must be multiples of this.
  std::int64_t input_multiple() const { return 16; }
};

template <class T>
struct StereoOutput {
  /// [N,H,W] disparity of the last head.
  ad::Var<T> disparity;
  /// Every head's disparity in train mode, only the last one in eval mode.
  std::vector<ad::Var<T>> heads;
};

/// Soft-argmin over axis 1 of [N,D,H,W] logits: sum_d d * softmax(logits)_d.
template <class T>
ad::Var<T> disparity_regression(const ad::Var<T>& logits);

/// Mean smooth-L1 over pixels with nonzero mask. Throws ShapeError on shape
/// mismatch and NumericError when no pixel is valid.
template <class T>
ad::Var<T> smooth_l1_loss(const ad::Var<T>& pred, const BasicTensor<T>& gt, const BasicTensor<T>& mask);

/// Weighted sum of smooth_l1_loss over the heads of a train-mode forward.
template <class T>
ad::Var<T> training_loss(const ModelConfig& config, const StereoOutput<T>& out, const BasicTensor<T>& gt,
                         const BasicTensor<T>& mask);

/// Stereo network assembled from a ModelConfig. Parameters live in an
/// external ParamStore under the module names below.
class StereoNet {
 public:
  explicit StereoNet(ModelConfig config);
  ~StereoNet();
  StereoNet(const StereoNet&) = delete;
  StereoNet& operator=(const StereoNet&) = delete;

  const ModelConfig& config() const { return config_; }

  void declare(ad::ParamStore<float>& store, Rng& rng) const;
  ad::ParamStore<float> init(std::uint64_t seed) const;

  /// Eval-mode cost for one H x W stereo pair: the backbone and channel
  /// reduction run once per view, the interlacing subnetwork once per
  /// disparity level, and only the last head is evaluated (the others
  /// contribute parameters only).
  LayerCost cost(std::int64_t height, std::int64_t width) const;

  /// Throws ShapeError unless both views are [N,3,H,W] with equal shapes and
  /// H, W multiples of input_multiple().
  void check_input(const Shape& left, const Shape& right) const;

  template <class T>
  StereoOutput<T> forward(ad::Tape<T>& tape, ad::ParamStore<T>& store, const ad::Var<T>& left,
                          const ad::Var<T>& right, BnMode mode) const;

  /// [N,C,H/4,W/4] unary features of one view.
  template <class T>
  ad::Var<T> extract_features(ad::Tape<T>& tape, ad::ParamStore<T>& store, const ad::Var<T>& image,
                              BnMode mode) const;

  /// 1x1 channel-reduction chain (2D path).
  template <class T>
  ad::Var<T> reduce_channels(ad::Tape<T>& tape, ad::ParamStore<T>& store, const ad::Var<T>& features,
                             BnMode mode) const;

 private:
  struct Head {
    std::unique_ptr<ConvUnit> conv;
    std::unique_ptr<ConvUnit> out;
  };

  LayerCost feature_cost(const Grid& image) const;

  ModelConfig config_;
  std::vector<std::unique_ptr<Module>> first_;
  std::array<std::vector<std::unique_ptr<Module>>, 4> stages_;
  std::vector<std::unique_ptr<ConvUnit>> reduce_;
  std::unique_ptr<InterlacedCostVolume> volume_;
  std::vector<std::unique_ptr<Module>> dres0_;
  std::vector<std::unique_ptr<Module>> dres1_;
  std::vector<std::unique_ptr<Hourglass>> hourglasses_;
  std::vector<Head> heads_;
};

}  // namespace msnet
