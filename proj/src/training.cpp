#include "msnet/training.hpp"

#include "msnet/metrics.hpp"

namespace msnet {

SyntheticPair make_synthetic_pair(std::int64_t height, std::int64_t width, std::int64_t disparity,
                                  std::uint64_t seed) {
  if (disparity < 0 || disparity >= width) {
    throw ConfigError("synthetic disparity " + std::to_string(disparity) + " must lie in [0, width)");
  }
  Rng rng(seed);
  // The right view is a texture of width W + d; the left view sees it shifted by d.
  const std::int64_t wide = width + disparity;
  std::vector<float> texture(static_cast<std::size_t>(3 * height * wide));
  for (float& v : texture) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  SyntheticPair p{Tensor({1, 3, height, width}), Tensor({1, 3, height, width}), Tensor({1, height, width}),
                  Tensor({1, height, width})};
  for (std::int64_t c = 0; c < 3; ++c) {
    for (std::int64_t y = 0; y < height; ++y) {
      const float* row = texture.data() + (c * height + y) * wide;
      for (std::int64_t x = 0; x < width; ++x) {
        p.right.at({0, c, y, x}) = row[x];
        p.left.at({0, c, y, x}) = row[x >= disparity ? x - disparity : width + x];
      }
    }
  }
  for (std::int64_t y = 0; y < height; ++y) {
    for (std::int64_t x = 0; x < width; ++x) {
      p.gt.at({0, y, x}) = static_cast<float>(disparity);
      p.mask.at({0, y, x}) = x >= disparity ? 1.0f : 0.0f;
    }
  }
  return p;
}

ToyResult train_toy(const StereoNet& net, const ToyOptions& opt,
                    const std::function<void(int, double, double)>& progress) {
  const SyntheticPair pair = make_synthetic_pair(opt.height, opt.width, opt.disparity, opt.seed + 1);
  const DisparityMap gt{pair.gt, pair.mask};
  ToyResult result{{}, net.init(opt.seed)};
  ad::Adam<float> adam(result.weights, opt.adam);
  for (int step = 1; step <= opt.steps; ++step) {
    result.weights.zero_grad();
    ad::Tape<float> tape;
    StereoOutput<float> out =
        net.forward(tape, result.weights, tape.constant(pair.left), tape.constant(pair.right), BnMode::train);
    ad::Var<float> loss = training_loss(net.config(), out, pair.gt, pair.mask);
    tape.backward(loss);
    adam.step(0);

    ad::Tape<float> eval(false);
    const Tensor pred =
        net.forward(eval, result.weights, eval.constant(pair.left), eval.constant(pair.right), BnMode::eval)
            .disparity.value();
    const double e = epe(pred, gt);
    result.epe.push_back(e);
    if (progress) progress(step, static_cast<double>(loss.value()[0]), e);
  }
  return result;
}

}  // namespace msnet
