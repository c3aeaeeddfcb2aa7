#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "msnet/network.hpp"

namespace msnet {

/// One synthetic rectified pair: a random texture seen with a constant
/// integer disparity, so left(x) = right(x - d).
struct SyntheticPair {
  Tensor left;   // [1,3,H,W]
  Tensor right;  // [1,3,H,W]
  Tensor gt;     // [1,H,W]
  Tensor mask;   // [1,H,W], 1 where x >= d
};

SyntheticPair make_synthetic_pair(std::int64_t height, std::int64_t width, std::int64_t disparity,
                                  std::uint64_t seed);

struct ToyOptions {
  int steps = 400;
  std::uint64_t seed = 1;
  ad::AdamOptions adam;
  std::int64_t height = 32;
  std::int64_t width = 64;
  std::int64_t disparity = 8;
};

struct ToyResult {
  /// Eval-mode EPE over valid pixels after each step.
  std::vector<double> epe;
  ad::ParamStore<float> weights;
};

/// Overfits the network to one synthetic pair with Adam on the weighted
/// smooth-L1 loss. Deterministic for a given seed and thread count.
ToyResult train_toy(const StereoNet& net, const ToyOptions& opt,
                    const std::function<void(int step, double loss, double epe)>& progress = {});

}  // namespace msnet
