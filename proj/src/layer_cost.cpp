#include "msnet/layer_cost.hpp"

namespace msnet {

LayerCost LayerCost::leaf(std::string label, std::uint64_t macs, std::uint64_t params) {
  LayerCost c;
  c.label = std::move(label);
  c.macs = macs;
  c.params = params;
  return c;
}

LayerCost LayerCost::group(std::string label, std::vector<LayerCost> children) {
  LayerCost c;
  c.label = std::move(label);
  for (auto& ch : children) c.add(std::move(ch));
  return c;
}

LayerCost& LayerCost::add(LayerCost child) {
  macs += child.macs;
  params += child.params;
  children.push_back(std::move(child));
  return *this;
}

LayerCost LayerCost::repeated(std::uint64_t k) const {
  LayerCost c;
  c.label = label;
  c.params = params;
  if (children.empty()) {
    c.macs = macs * k;
    return c;
  }
  for (const auto& ch : children) {
    LayerCost r = ch.repeated(k);
    c.macs += r.macs;
    c.children.push_back(std::move(r));
  }
  return c;
}

namespace {

void collect(const LayerCost& c, std::map<std::string, std::uint64_t>& out) {
  if (c.is_leaf()) {
    if (c.macs != 0) out[c.label] += c.macs;
    return;
  }
  for (const auto& ch : c.children) collect(ch, out);
}

}  // namespace

std::map<std::string, std::uint64_t> LayerCost::leaf_macs() const {
  std::map<std::string, std::uint64_t> out;
  collect(*this, out);
  return out;
}

const LayerCost* LayerCost::find(const std::string& name) const {
  if (label == name) return this;
  for (const auto& ch : children)
    if (const auto* f = ch.find(name)) return f;
  return nullptr;
}

}  // namespace msnet
