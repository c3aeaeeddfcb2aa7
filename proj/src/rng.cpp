#include "msnet/rng.hpp"

#include <cmath>
#include <numbers>

namespace msnet {

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

Tensor kaiming_normal_fan_out(const Shape& weight_shape, Rng& rng) {
  std::int64_t receptive = 1;
  for (std::size_t i = 2; i < weight_shape.size(); ++i) receptive *= weight_shape[i];
  const double std_dev = std::sqrt(2.0 / static_cast<double>(weight_shape.at(0) * receptive));
  Tensor w(weight_shape);
  for (auto& v : w.values()) v = static_cast<float>(rng.normal() * std_dev);
  return w;
}

}  // namespace msnet
