#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "msnet/tensor.hpp"

namespace msnet {

/// Geometry of a 2D or 3D convolution. Per-axis arrays are ordered (D, H, W);
/// the D entry is ignored when spatial_rank == 2.
struct ConvOptions {
  int spatial_rank = 2;
  std::array<int, 3> stride{1, 1, 1};
  std::array<int, 3> padding{0, 0, 0};
  std::array<int, 3> dilation{1, 1, 1};
  std::array<int, 3> output_padding{0, 0, 0};  // transposed convolution only
  int groups = 1;

  static ConvOptions make(int spatial_rank, int stride = 1, int padding = 0, int dilation = 1,
                          int groups = 1);
};

/// Weights are [Cout, Cin/groups, (kD,) kH, kW] for conv and
/// [Cin, Cout/groups, (kD,) kH, kW] for conv_transposed. Bias is null or [Cout].
template <class T>
struct ConvParams {
  BasicTensor<T> weight;
  BasicTensor<T> bias;
  ConvOptions options;
};

Shape conv_output_shape(const Shape& input, const Shape& weight, const ConvOptions& opt);
Shape conv_transposed_output_shape(const Shape& input, const Shape& weight,
                                   const ConvOptions& opt);

/// Cross-correlation (no kernel flip). Reductions accumulate in double.
/// Reports dense-equivalent MACs to the active instrument::MacRecorder.
template <class T>
BasicTensor<T> conv(const BasicTensor<T>& x, const ConvParams<T>& p);

/// Exact adjoint of conv with the same weights and geometry.
template <class T>
BasicTensor<T> conv_transposed(const BasicTensor<T>& x, const ConvParams<T>& p);

/// Gradient of conv with respect to its input.
template <class T>
BasicTensor<T> conv_backward_input(const BasicTensor<T>& grad_out, const BasicTensor<T>& weight,
                                   const Shape& input_shape, const ConvOptions& opt);

/// Gradient of conv with respect to its weight.
template <class T>
BasicTensor<T> conv_backward_weight(const BasicTensor<T>& x, const BasicTensor<T>& grad_out,
                                    const Shape& weight_shape, const ConvOptions& opt);

/// Sum over every axis except the channel axis (bias gradient).
template <class T>
BasicTensor<T> channel_sum(const BasicTensor<T>& x);

// ---------------------------------------------------------------------------
// Batch normalization

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

enum class BnMode { train, eval };

/// Per-channel statistics used by the forward pass, kept for backward.
struct BnSaved {
  std::vector<double> mean;
  std::vector<double> invstd;
};

/// Normalizes [N,C,...] per channel. Train mode uses batch statistics and
/// updates the running estimates (unbiased variance); eval mode uses the
/// running estimates.
template <class T>
BasicTensor<T> batch_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, BasicTensor<T>& running_mean,
                          BasicTensor<T>& running_var, BnMode mode,
                          double eps = kBatchNormEps, double momentum = kBatchNormMomentum,
                          BnSaved* saved = nullptr);

template <class T>
struct BnGrads {
  BasicTensor<T> input;
  BasicTensor<T> gamma;
  BasicTensor<T> beta;
};

template <class T>
BnGrads<T> batch_norm_backward(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                               const BnSaved& saved, const BasicTensor<T>& grad_out,
                               BnMode mode);

// ---------------------------------------------------------------------------
// Pointwise, softmax, interpolation

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x);

template <class T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out);

template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis);

template <class T>
BasicTensor<T> softmax_backward(const BasicTensor<T>& y, const BasicTensor<T>& grad_out,
                                std::size_t axis);

/// Source coordinates follow align_corners=false: src = (dst + 0.5) / scale - 0.5,
/// clamped to the valid range.
inline constexpr bool kAlignCorners = false;

enum class InterpMode { bilinear, trilinear };

/// Linear resampling of the trailing 2 (bilinear) or 3 (trilinear) axes.
/// Output extent per axis is floor(in * scale).
template <class T>
BasicTensor<T> interpolate(const BasicTensor<T>& x, const std::vector<double>& scales,
                           InterpMode mode);

template <class T>
BasicTensor<T> interpolate_backward(const Shape& input_shape, const BasicTensor<T>& grad_out,
                                    const std::vector<double>& scales, InterpMode mode);

}  // namespace msnet
