#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msnet/network.hpp"

namespace msnet {

/// Dense-equivalent MACs per output position of a stride-1 block:
///   std: k^r Cin Cout
///   v1:  k^r Cin + Cin Cout
///   v2:  t Cin^2 + k^r t Cin + t Cin Cout
/// residual_basic is two 3x3 inner blocks plus a pointwise skip when the
/// channel count changes.
std::uint64_t per_position_macs(const BlockSpec& spec);

/// Learnable scalars of a block: convolution weights plus BN affine pairs.
std::uint64_t block_params(const BlockSpec& spec);

/// per_position_macs times the number of output positions. For stride-1
/// blocks this equals the exact module count; strided v2 blocks run their
/// expansion at input resolution, which Module::cost accounts for.
LayerCost block_cost(const BlockSpec& spec, const Grid& out_extents);

/// Ratio of per-position MACs. Throws ConfigError unless both specs share
/// rank, kernel and channel counts.
double reduction_factor(const BlockSpec& standard, const BlockSpec& light);

struct SweepRow {
  std::int64_t channels;
  int t;
  double ratio;
};

/// Reduction factor of a k=3 v2 block against a standard conv with
/// Cin = Cout = C, for every C in `channels` and t in [1, t_max].
std::vector<SweepRow> expansion_sweep(const std::vector<std::int64_t>& channels, int t_max, int rank);

std::string sweep_csv(const std::vector<SweepRow>& rows);
std::string sweep_json(const std::vector<SweepRow>& rows);

struct Table1Row {
  std::string label;
  int rank;
  BlockKind kind;
  int t;
  std::uint64_t standard_macs;  // per position
  std::uint64_t light_macs;     // per position
  double ratio;
  double published;
};

/// The four reduction-factor examples for k=3, Cin=32, Cout=64.
std::vector<Table1Row> table1();
/// Published factors are printed to one decimal, some truncated rather than
/// rounded; a row matches when the exact ratio is within 0.1 of it.
bool table1_matches(const Table1Row& row);
std::string table1_text(const std::vector<Table1Row>& rows);

/// Eval-mode cost tree of a full network for one H x W pair.
LayerCost network_cost(const ModelConfig& config, std::int64_t height, std::int64_t width);

/// Runs an eval forward with MAC counting enabled and returns one leaf per
/// counted convolution label; params are the trainable scalars registered
/// under that label.
LayerCost instrumented_count(const StereoNet& net, ad::ParamStore<float>& store, std::int64_t height,
                             std::int64_t width);

enum class ReportFormat { table, csv, json };
ReportFormat parse_report_format(const std::string& text);

/// Flattened cost report down to `depth` levels below the root. Columns:
/// label, macs, params, share_percent (of the root's MACs).
std::string cost_report(const LayerCost& root, ReportFormat format, int depth = 2);

}  // namespace msnet
