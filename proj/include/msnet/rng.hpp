#pragma once

#include <cstdint>
#include <random>

#include "msnet/tensor.hpp"

namespace msnet {

/// Seedable generator used for weight init and synthetic data. The engine is
/// std::mt19937_64; normals come from an explicit Box-Muller transform and
/// uniforms from the top 53 bits, so sequences are identical on every
/// standard library (std:: distributions are implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  std::uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Kaiming normal init with fan-out: N(0, 2 / (shape[0] * receptive field)).
Tensor kaiming_normal_fan_out(const Shape& weight_shape, Rng& rng);

}  // namespace msnet
