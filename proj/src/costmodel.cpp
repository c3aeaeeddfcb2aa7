#include "msnet/costmodel.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "json.hpp"
#include "msnet/instrument.hpp"

namespace msnet {

namespace {

std::uint64_t taps(int rank, int k) {
  std::uint64_t n = 1;
  for (int i = 0; i < rank; ++i) n *= static_cast<std::uint64_t>(k);
  return n;
}

struct Counts {
  std::uint64_t macs = 0;
  std::uint64_t params = 0;
};

/// One non-residual-basic block with k x k (x k) spatial kernel.
Counts simple_block(BlockKind kind, int rank, std::uint64_t cin, std::uint64_t cout, int k, int t) {
  const std::uint64_t kr = taps(rank, k);
  switch (kind) {
    case BlockKind::std_conv:
      return {kr * cin * cout, kr * cin * cout + 2 * cout};
    case BlockKind::v1:
      return {kr * cin + cin * cout, kr * cin + cin * cout + 2 * cin + 2 * cout};
    case BlockKind::v2: {
      const std::uint64_t mid = static_cast<std::uint64_t>(t) * cin;
      const std::uint64_t macs = cin * mid + kr * mid + mid * cout;
      return {macs, macs + 4 * mid + 2 * cout};
    }
    case BlockKind::residual_basic:
      break;
  }
  throw ConfigError("residual_basic cannot be an inner block");
}

Counts block_counts(const BlockSpec& spec) {
  spec.validate();
  const auto cin = static_cast<std::uint64_t>(spec.cin);
  const auto cout = static_cast<std::uint64_t>(spec.cout);
  if (spec.kind != BlockKind::residual_basic) return simple_block(spec.kind, spec.rank, cin, cout, spec.k, spec.t);
  const Counts a = simple_block(spec.inner, spec.rank, cin, cout, 3, spec.inner_t);
  const Counts b = simple_block(spec.inner, spec.rank, cout, cout, 3, spec.inner_t);
  Counts c{a.macs + b.macs, a.params + b.params};
  if (spec.stride != 1 || cin != cout) {
    c.macs += cin * cout;
    c.params += cin * cout + 2 * cout;
  }
  return c;
}

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

struct ReportRow {
  std::string label;
  int depth;
  std::uint64_t macs;
  std::uint64_t params;
  double share;
};

void flatten(const LayerCost& node, int depth, int max_depth, double root_macs, std::vector<ReportRow>& rows) {
  const double share = root_macs > 0.0 ? 100.0 * static_cast<double>(node.macs) / root_macs : 0.0;
  rows.push_back({node.label, depth, node.macs, node.params, share});
  if (depth >= max_depth) return;
  for (const auto& ch : node.children) flatten(ch, depth + 1, max_depth, root_macs, rows);
}

}  // namespace

std::uint64_t per_position_macs(const BlockSpec& spec) { return block_counts(spec).macs; }

std::uint64_t block_params(const BlockSpec& spec) { return block_counts(spec).params; }

LayerCost block_cost(const BlockSpec& spec, const Grid& out_extents) {
  const Counts c = block_counts(spec);
  return LayerCost::leaf(to_string(spec.kind), c.macs * static_cast<std::uint64_t>(out_extents.positions()), c.params);
}

double reduction_factor(const BlockSpec& standard, const BlockSpec& light) {
  if (standard.rank != light.rank || standard.k != light.k || standard.cin != light.cin ||
      standard.cout != light.cout) {
    throw ConfigError("reduction_factor needs blocks with equal rank, kernel and channels");
  }
  return static_cast<double>(per_position_macs(standard)) / static_cast<double>(per_position_macs(light));
}

std::vector<SweepRow> expansion_sweep(const std::vector<std::int64_t>& channels, int t_max, int rank) {
  if (t_max < 1) throw ConfigError("t_max must be at least 1");
  if (rank != 2 && rank != 3) throw ConfigError("rank must be 2 or 3");
  std::vector<SweepRow> rows;
  for (std::int64_t c : channels) {
    if (c < 1) throw ConfigError("channel counts must be positive");
    BlockSpec standard;
    standard.rank = rank;
    standard.cin = standard.cout = c;
    for (int t = 1; t <= t_max; ++t) {
      BlockSpec light = standard;
      light.kind = BlockKind::v2;
      light.t = t;
      rows.push_back({c, t, reduction_factor(standard, light)});
    }
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "channels,t,ratio\n";
  for (const auto& r : rows) os << r.channels << ',' << r.t << ',' << fixed(r.ratio, 4) << '\n';
  return os.str();
}

std::string sweep_json(const std::vector<SweepRow>& rows) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& r : rows) j.push_back({{"channels", r.channels}, {"t", r.t}, {"ratio", r.ratio}});
  return j.dump(2);
}

std::vector<Table1Row> table1() {
  struct Case {
    const char* label;
    int rank;
    BlockKind kind;
    int t;
    double published;
  };
  const Case cases[] = {{"2D v1", 2, BlockKind::v1, 1, 7.9},
                        {"2D v2 (t=2)", 2, BlockKind::v2, 2, 2.7},
                        {"3D v1", 3, BlockKind::v1, 1, 18.9},
                        {"3D v2 (t=2)", 3, BlockKind::v2, 2, 7.0}};
  std::vector<Table1Row> rows;
  for (const auto& c : cases) {
    BlockSpec standard;
    standard.rank = c.rank;
    standard.cin = 32;
    standard.cout = 64;
    BlockSpec light = standard;
    light.kind = c.kind;
    light.t = c.t;
    rows.push_back({c.label, c.rank, c.kind, c.t, per_position_macs(standard), per_position_macs(light),
                    reduction_factor(standard, light), c.published});
  }
  return rows;
}

bool table1_matches(const Table1Row& row) { return std::fabs(row.ratio - row.published) < 0.1; }

std::string table1_text(const std::vector<Table1Row>& rows) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-12s %10s %10s %8s %6s %10s %6s\n", "block", "std MACs", "light MACs", "ratio",
                "x", "published", "match");
  os << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-12s %10llu %10llu %8.3f %6.1f %10.1f %6s\n", r.label.c_str(),
                  static_cast<unsigned long long>(r.standard_macs), static_cast<unsigned long long>(r.light_macs),
                  r.ratio, r.ratio, r.published, table1_matches(r) ? "yes" : "no");
    os << line;
  }
  os << "(k=3, Cin=32, Cout=64; MACs per output position; match: |ratio - published| < 0.1)\n";
  return os.str();
}

LayerCost network_cost(const ModelConfig& config, std::int64_t height, std::int64_t width) {
  return StereoNet(config).cost(height, width);
}

LayerCost instrumented_count(const StereoNet& net, ad::ParamStore<float>& store, std::int64_t height,
                             std::int64_t width) {
  const Tensor image({1, 3, height, width});
  net.check_input(image.shape(), image.shape());
  instrument::MacRecorder rec;
  {
    instrument::RecordingScope scope(rec);
    ad::Tape<float> tape(false);
    net.forward(tape, store, tape.constant(image), tape.constant(image), BnMode::eval);
  }
  LayerCost root = LayerCost::group(net.config().name);
  for (const auto& [label, macs] : rec.tallies()) {
    const std::string prefix = label + ".";
    std::uint64_t params = 0;
    for (std::size_t i = 0; i < store.size(); ++i) {
      const auto& p = store[i];
      if (p.trainable && p.name.compare(0, prefix.size(), prefix) == 0) params += p.value.size();
    }
    root.add(LayerCost::leaf(label, macs, params));
  }
  return root;
}

ReportFormat parse_report_format(const std::string& text) {
  if (text == "table") return ReportFormat::table;
  if (text == "csv") return ReportFormat::csv;
  if (text == "json") return ReportFormat::json;
  throw ConfigError("unknown report format '" + text + "' (expected table, csv or json)");
}

std::string cost_report(const LayerCost& root, ReportFormat format, int depth) {
  std::vector<ReportRow> rows;
  flatten(root, 0, depth, static_cast<double>(root.macs), rows);
  std::ostringstream os;
  switch (format) {
    case ReportFormat::csv:
      os << "label,macs,params,share_percent\n";
      for (const auto& r : rows) os << r.label << ',' << r.macs << ',' << r.params << ',' << fixed(r.share, 2) << '\n';
      break;
    case ReportFormat::json: {
      nlohmann::ordered_json j = nlohmann::ordered_json::array();
      for (const auto& r : rows) {
        j.push_back({{"label", r.label}, {"macs", r.macs}, {"params", r.params}, {"share_percent", r.share}});
      }
      os << j.dump(2) << '\n';
      break;
    }
    case ReportFormat::table: {
      char line[200];
      std::snprintf(line, sizeof line, "%-36s %10s %10s %8s\n", "module", "GMACs", "params(M)", "share%");
      os << line;
      for (const auto& r : rows) {
        const std::string label = std::string(static_cast<std::size_t>(2 * r.depth), ' ') + r.label;
        std::snprintf(line, sizeof line, "%-36s %10s %10s %8s\n", label.c_str(),
                      fixed(static_cast<double>(r.macs) / 1e9, 2).c_str(),
                      fixed(static_cast<double>(r.params) / 1e6, 4).c_str(), fixed(r.share, 1).c_str());
        os << line;
      }
      break;
    }
  }
  return os.str();
}

}  // namespace msnet
