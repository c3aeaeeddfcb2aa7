#include "msnet/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

namespace msnet {

DisparityMap DisparityMap::dense(Tensor values) {
  Tensor valid(values.shape(), 1.0f);
  return {std::move(values), std::move(valid)};
}

DisparityMap DisparityMap::sparse(Tensor values) {
  Tensor valid(values.shape());
  for (std::size_t i = 0; i < values.size(); ++i) valid[i] = values[i] != 0.0f ? 1.0f : 0.0f;
  return {std::move(values), std::move(valid)};
}

std::int64_t DisparityMap::valid_count() const {
  return std::count_if(valid.values().begin(), valid.values().end(), [](float v) { return v != 0.0f; });
}

namespace {

/// Calls f(error, gt) for each valid pixel and returns the valid count.
template <class F>
std::int64_t for_valid(const Tensor& pred, const DisparityMap& gt, const char* what, F f) {
  require_same_shape(pred.shape(), gt.values.shape(), what);
  require_same_shape(gt.values.shape(), gt.valid.shape(), what);
  std::int64_t n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (gt.valid[i] == 0.0f) continue;
    f(std::abs(static_cast<double>(pred[i]) - static_cast<double>(gt.values[i])), static_cast<double>(gt.values[i]));
    ++n;
  }
  if (n == 0) throw NumericError(std::string(what) + ": no valid ground-truth pixels");
  return n;
}

}  // namespace

double epe(const Tensor& pred, const DisparityMap& gt) {
  double sum = 0.0;
  const std::int64_t n = for_valid(pred, gt, "epe", [&](double e, double) { sum += e; });
  return sum / static_cast<double>(n);
}

double px_k(const Tensor& pred, const DisparityMap& gt, double k) {
  std::int64_t bad = 0;
  const std::int64_t n = for_valid(pred, gt, "px_k", [&](double e, double) { bad += e > k; });
  return 100.0 * static_cast<double>(bad) / static_cast<double>(n);
}

double d1(const Tensor& pred, const DisparityMap& gt) {
  std::int64_t bad = 0;
  const std::int64_t n =
      for_valid(pred, gt, "d1", [&](double e, double g) { bad += e > std::max(3.0, 0.05 * g); });
  return 100.0 * static_cast<double>(bad) / static_cast<double>(n);
}

MetricReport evaluate(const Tensor& pred, const DisparityMap& gt) {
  return {epe(pred, gt), px_k(pred, gt, 3.0), d1(pred, gt), gt.valid_count()};
}

std::string MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["epe"] = epe;
  j["px3"] = px3;
  j["d1"] = d1;
  j["valid_count"] = valid_count;
  return j.dump(2);
}

}  // namespace msnet
