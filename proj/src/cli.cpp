#include "msnet/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "CLI11.hpp"
#include "msnet/costmodel.hpp"
#include "msnet/io.hpp"
#include "msnet/metrics.hpp"
#include "msnet/parallel.hpp"
#include "msnet/training.hpp"

namespace msnet {

Tensor pad_reflect(const Tensor& image, std::int64_t multiple) {
  if (image.rank() != 4) throw ShapeError("pad_reflect expects [N,C,H,W], got " + to_string(image.shape()));
  if (multiple < 1) throw ConfigError("padding multiple must be positive");
  const std::int64_t n = image.dim(0), c = image.dim(1), h = image.dim(2), w = image.dim(3);
  const std::int64_t ph = (h + multiple - 1) / multiple * multiple;
  const std::int64_t pw = (w + multiple - 1) / multiple * multiple;
  if (ph - h >= h || pw - w >= w) {
    throw ShapeError("image " + std::to_string(h) + "x" + std::to_string(w) + " is too small to pad to a multiple of " +
                     std::to_string(multiple));
  }
  auto mirror = [](std::int64_t i, std::int64_t extent) { return i < extent ? i : 2 * (extent - 1) - i; };
  Tensor out({n, c, ph, pw});
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      for (std::int64_t y = 0; y < ph; ++y) {
        for (std::int64_t x = 0; x < pw; ++x) out.at({b, ch, y, x}) = image.at({b, ch, mirror(y, h), mirror(x, w)});
      }
    }
  }
  return out;
}

Tensor crop(const Tensor& map, std::int64_t height, std::int64_t width) {
  if (map.rank() != 3 || height > map.dim(1) || width > map.dim(2) || height < 1 || width < 1) {
    throw ShapeError("cannot crop " + to_string(map.shape()) + " to " + std::to_string(height) + "x" +
                     std::to_string(width));
  }
  Tensor out({map.dim(0), height, width});
  for (std::int64_t b = 0; b < map.dim(0); ++b) {
    for (std::int64_t y = 0; y < height; ++y) {
      for (std::int64_t x = 0; x < width; ++x) out.at({b, y, x}) = map.at({b, y, x});
    }
  }
  return out;
}

Tensor infer_disparity(const StereoNet& net, ad::ParamStore<float>& store, const Tensor& left, const Tensor& right,
                       bool pad) {
  require_same_shape(left.shape(), right.shape(), "infer");
  if (left.rank() != 4) throw ShapeError("infer expects [N,3,H,W] inputs, got " + to_string(left.shape()));
  const std::int64_t h = left.dim(2), w = left.dim(3);
  const Tensor l = pad ? pad_reflect(left, net.config().input_multiple()) : left;
  const Tensor r = pad ? pad_reflect(right, net.config().input_multiple()) : right;
  net.check_input(l.shape(), r.shape());
  ad::Tape<float> tape(false);
  Tensor disp = net.forward(tape, store, tape.constant(l), tape.constant(r), BnMode::eval).disparity.value();
  return pad ? crop(disp, h, w) : disp;
}

namespace {

const std::vector<std::string> kModels = {"2d", "3d", "baseline2d", "baseline3d", "mobile2d", "mobile3d", "micro"};

std::vector<std::int64_t> parse_channels(const std::string& text) {
  std::vector<std::int64_t> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = std::min(text.find(',', start), text.size());
    const std::string item = text.substr(start, comma - start);
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw ConfigError("invalid channel list '" + text + "'");
    out.push_back(v);
    start = comma + 1;
  }
  return out;
}

/// Disparity map from a PFM or KITTI PNG file; PFM pixels that are not
/// finite are invalid.
DisparityMap read_disparity(const std::string& path, bool kitti) {
  if (kitti) return kitti_disp_read(path);
  const Tensor t = pfm_read(path);
  if (t.dim(1) != 1) throw FormatError("'" + path + "' is not a single-channel PFM");
  Tensor values = t.reshaped({1, t.dim(2), t.dim(3)});
  Tensor valid(values.shape());
  for (std::size_t i = 0; i < values.size(); ++i) valid[i] = std::isfinite(values[i]) ? 1.0f : 0.0f;
  return {std::move(values), std::move(valid)};
}

bool has_suffix(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Light-weight stereo network toolkit: cost analysis, inference, toy training and evaluation.", "msnet"};
  app.require_subcommand(0, 1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker threads (default: MSNET_THREADS or all cores)")
      ->check(CLI::NonNegativeNumber);

  // analyze
  auto* analyze = app.add_subcommand("analyze", "MACs and parameters of a whole network");
  std::string a_model = "3d";
  std::int64_t a_height = 256, a_width = 512;
  std::string a_format = "table";
  int a_depth = 1;
  bool a_check = false;
  analyze->add_option("--model", a_model, "Network preset")->check(CLI::IsMember(kModels))->capture_default_str();
  analyze->add_option("--height", a_height, "Input height")->capture_default_str();
  analyze->add_option("--width", a_width, "Input width")->capture_default_str();
  analyze->add_option("--format", a_format, "table, csv or json")
      ->check(CLI::IsMember({"table", "csv", "json"}))
      ->capture_default_str();
  analyze->add_option("--depth", a_depth, "Tree levels below the total")->check(CLI::NonNegativeNumber)->capture_default_str();
  analyze->add_flag("--check", a_check, "Also run an instrumented forward pass and compare");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Reduction factor of v2 blocks over channels and expansion factor");
  std::string s_channels = "32,64,128";
  int s_tmax = 9;
  std::string s_rank = "2d";
  std::string s_out;
  std::string s_format = "csv";
  sweep->add_option("--channels", s_channels, "Comma-separated channel counts")->capture_default_str();
  sweep->add_option("--t-max", s_tmax, "Largest expansion factor")->check(CLI::PositiveNumber)->capture_default_str();
  sweep->add_option("--rank", s_rank, "2d or 3d")->check(CLI::IsMember({"2d", "3d"}))->capture_default_str();
  sweep->add_option("--out", s_out, "Output file (default: stdout)");
  sweep->add_option("--format", s_format, "csv or json")->check(CLI::IsMember({"csv", "json"}))->capture_default_str();

  // table1
  auto* table1_cmd = app.add_subcommand("table1", "Reduction factors for k=3, Cin=32, Cout=64");

  // infer
  auto* infer = app.add_subcommand("infer", "Disparity map for one stereo pair");
  std::string i_left, i_right, i_weights, i_model = "3d", i_out;
  bool i_pad = false;
  infer->add_option("--left", i_left, "Left image (PNG, PGM or PPM)")->required();
  infer->add_option("--right", i_right, "Right image")->required();
  infer->add_option("--weights", i_weights, "MSNW1 weights file")->required();
  infer->add_option("--model", i_model, "Network preset")->check(CLI::IsMember(kModels))->capture_default_str();
  infer->add_flag("--pad", i_pad, "Reflect-pad to a supported size and crop the result back");
  infer->add_option("--out", i_out, "Output disparity (PFM)")->required();

  // train-toy
  auto* train = app.add_subcommand("train-toy", "Overfit one synthetic constant-disparity pair");
  std::string t_model = "micro", t_out, t_config;
  int t_steps = 400;
  std::uint64_t t_seed = 1;
  double t_lr = 1e-3;
  int t_every = 10;
  auto* t_model_opt =
      train->add_option("--model", t_model, "Network preset")->check(CLI::IsMember(kModels))->capture_default_str();
  auto* t_steps_opt = train->add_option("--steps", t_steps, "Adam steps")->check(CLI::NonNegativeNumber)->capture_default_str();
  auto* t_seed_opt = train->add_option("--seed", t_seed, "Initialization and data seed")->capture_default_str();
  auto* t_lr_opt = train->add_option("--lr", t_lr, "Adam learning rate")->check(CLI::PositiveNumber)->capture_default_str();
  train->add_option("--config", t_config, "key = value run configuration; flags override it");
  train->add_option("--log-every", t_every, "Print every n-th step")->check(CLI::PositiveNumber)->capture_default_str();
  train->add_option("--out", t_out, "Write trained weights (MSNW1)");

  // eval
  auto* eval = app.add_subcommand("eval", "EPE, px-3 and D1 of a prediction");
  std::string e_pred, e_gt;
  bool e_kitti = false, e_pfm = false;
  eval->add_option("--pred", e_pred, "Predicted disparity")->required();
  eval->add_option("--gt", e_gt, "Ground-truth disparity")->required();
  auto* kitti_flag = eval->add_flag("--kitti", e_kitti, "Both files are KITTI 16-bit PNG");
  eval->add_flag("--pfm", e_pfm, "Both files are PFM")->excludes(kitti_flag);

  if (args.empty()) {
    out << app.help();
    return exit_usage;
  }
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return exit_ok;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return exit_usage;
  }
  if (app.get_subcommands().empty()) {
    out << app.help();
    return exit_usage;
  }

  try {
    if (threads > 0) set_num_threads(threads);

    if (*analyze) {
      const ModelConfig config = ModelConfig::preset(a_model);
      const StereoNet net(config);
      const LayerCost cost = net.cost(a_height, a_width);
      out << cost_report(cost, parse_report_format(a_format), a_depth);
      if (a_format == "table") {
        const std::size_t bytes = weights_encode(net.init(0)).size();
        out << "input " << a_height << "x" << a_width << ": " << fixed(cost.macs / 1e9, 2) << " GMACs, "
            << fixed(cost.params / 1e6, 2) << "M params, weights file " << fixed(bytes / 1e6, 2) << " MB\n";
      }
      if (a_check) {
        ad::ParamStore<float> store = net.init(0);
        const LayerCost counted = instrumented_count(net, store, a_height, a_width);
        const bool same = counted.leaf_macs() == cost.leaf_macs();
        out << "instrumented: " << counted.macs << " MACs, " << (same ? "equal" : "DIFFERENT") << '\n';
        if (!same) return exit_internal;
      }
    } else if (*sweep) {
      const auto rows = expansion_sweep(parse_channels(s_channels), s_tmax, s_rank == "2d" ? 2 : 3);
      const std::string text = s_format == "csv" ? sweep_csv(rows) : sweep_json(rows) + "\n";
      if (s_out.empty()) {
        out << text;
      } else {
        write_file(s_out, text);
        out << "wrote " << rows.size() << " rows to " << s_out << '\n';
      }
    } else if (*table1_cmd) {
      out << table1_text(table1());
    } else if (*infer) {
      const StereoNet net(ModelConfig::preset(i_model));
      ad::ParamStore<float> store = net.init(0);
      weights_assign(store, weights_load(i_weights));
      const Tensor left = image_to_tensor(image_read(i_left));
      const Tensor right = image_to_tensor(image_read(i_right));
      const Tensor disp = infer_disparity(net, store, left, right, i_pad);
      pfm_write(disp.reshaped({1, 1, disp.dim(1), disp.dim(2)}), i_out);
      out << "wrote " << disp.dim(1) << "x" << disp.dim(2) << " disparity to " << i_out << '\n';
    } else if (*train) {
      RunConfig run = t_config.empty() ? RunConfig::parse("model = " + t_model) : RunConfig::load(t_config);
      if (t_config.empty() || t_model_opt->count() > 0) run.model = ModelConfig::preset(t_model);
      if (t_config.empty() || t_steps_opt->count() > 0) run.steps = t_steps;
      if (t_config.empty() || t_seed_opt->count() > 0) run.seed = t_seed;
      if (t_config.empty() || t_lr_opt->count() > 0) run.adam.lr = t_lr;
      if (run.threads > 0 && threads == 0) set_num_threads(run.threads);
      const StereoNet net(run.model);
      ToyOptions opt;
      opt.steps = run.steps;
      opt.seed = run.seed;
      opt.adam = run.adam;
      const auto start = std::chrono::steady_clock::now();
      const ToyResult result = train_toy(net, opt, [&](int step, double loss, double e) {
        if (step % t_every == 0 || step == opt.steps) {
          out << "step " << step << " loss " << fixed(loss, 4) << " epe " << fixed(e, 4) << '\n';
        }
      });
      const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      if (!result.epe.empty()) {
        out << "final epe " << fixed(result.epe.back(), 4) << " px after " << opt.steps << " steps (" << fixed(seconds, 1)
            << " s)\n";
      }
      if (!t_out.empty()) {
        weights_save(result.weights, t_out);
        out << "wrote weights to " << t_out << '\n';
      }
    } else if (*eval) {
      const bool kitti = e_kitti || (!e_pfm && has_suffix(e_gt, ".png"));
      const DisparityMap gt = read_disparity(e_gt, kitti);
      const DisparityMap pred = read_disparity(e_pred, kitti);
      out << evaluate(pred.values, gt).to_json() << '\n';
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return exit_config;
  } catch (const ShapeError& e) {
    err << "shape error: " << e.what() << '\n';
    return exit_shape;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << '\n';
    return exit_format;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << '\n';
    return exit_io;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return exit_numeric;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return exit_internal;
  }
  return exit_ok;
}

}  // namespace msnet
