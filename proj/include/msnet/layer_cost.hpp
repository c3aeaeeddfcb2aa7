#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace msnet {

/// MACs and learnable-parameter counts of one module. Leaves are convolution
/// units; a group's totals are the exact sums of its children. Labels are
/// full dotted module paths, the same strings the modules push onto the
/// instrumented counter, so the two trees can be compared leaf by leaf.
struct LayerCost {
  std::string label;
  std::uint64_t macs = 0;
  std::uint64_t params = 0;
  std::vector<LayerCost> children;

  static LayerCost leaf(std::string label, std::uint64_t macs, std::uint64_t params);
  static LayerCost group(std::string label, std::vector<LayerCost> children = {});

  /// Appends a child and adds its totals to this node.
  LayerCost& add(LayerCost child);

  /// Copy with every MAC count multiplied by k (parameters unchanged). Used
  /// for modules that run several times per forward pass.
  LayerCost repeated(std::uint64_t k) const;

  bool is_leaf() const { return children.empty(); }
  /// Leaf label -> MACs, summing leaves that share a label. Leaves without
  /// MACs (parameters that a pass does not evaluate) are omitted.
  std::map<std::string, std::uint64_t> leaf_macs() const;
  /// Depth-first search by label; nullptr when absent.
  const LayerCost* find(const std::string& label) const;
};

/// Output extents of a 2D (d == 1) or 3D feature map, batch and channels excluded.
struct Grid {
  std::int64_t d = 1;
  std::int64_t h = 1;
  std::int64_t w = 1;

  std::int64_t positions() const { return d * h * w; }
  friend bool operator==(const Grid&, const Grid&) = default;
};

}  // namespace msnet
