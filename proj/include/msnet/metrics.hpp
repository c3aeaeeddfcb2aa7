#pragma once

#include <cstdint>
#include <string>

#include "msnet/tensor.hpp"

namespace msnet {

/// Disparities in pixels plus a same-shaped validity mask (nonzero = valid).
struct DisparityMap {
  Tensor values;
  Tensor valid;

  /// Every pixel valid.
  static DisparityMap dense(Tensor values);
  /// Pixels with value 0 are invalid (sparse ground truth).
  static DisparityMap sparse(Tensor values);

  std::int64_t valid_count() const;
};

struct MetricReport {
  double epe = 0.0;
  double px3 = 0.0;  // percent
  double d1 = 0.0;   // percent
  std::int64_t valid_count = 0;

  std::string to_json() const;
};

/// Mean |pred - gt| over valid pixels. Throws ShapeError on mismatched
/// shapes and NumericError when no pixel is valid.
double epe(const Tensor& pred, const DisparityMap& gt);
/// Percent of valid pixels with |pred - gt| > k.
double px_k(const Tensor& pred, const DisparityMap& gt, double k = 3.0);
/// Percent of valid pixels with |pred - gt| > max(3, 0.05 * gt).
double d1(const Tensor& pred, const DisparityMap& gt);

MetricReport evaluate(const Tensor& pred, const DisparityMap& gt);

}  // namespace msnet
