#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "msnet/network.hpp"

namespace msnet {

/// Exit codes of the command-line tool.
enum ExitCode : int {
  exit_ok = 0,
  exit_usage = 1,
  exit_config = 2,
  exit_shape = 3,
  exit_format = 4,
  exit_io = 5,
  exit_numeric = 6,
  exit_internal = 7,
};

/// Reflective padding of [N,C,H,W] at the bottom and right edge up to the
/// next multiple of `multiple` (mirror without repeating the edge sample).
/// Throws ShapeError when a pad would exceed the extent it mirrors.
Tensor pad_reflect(const Tensor& image, std::int64_t multiple);
/// Top-left [N,h,w] window of an [N,H,W] map.
Tensor crop(const Tensor& map, std::int64_t height, std::int64_t width);

/// Eval-mode disparity [1,H,W] for one pair of [1,3,H,W] inputs. With `pad`
/// set, inputs are padded to the network's input multiple and the result is
/// cropped back; otherwise unsupported extents raise ShapeError.
Tensor infer_disparity(const StereoNet& net, ad::ParamStore<float>& store, const Tensor& left, const Tensor& right,
                       bool pad);

/// Runs the tool with arguments excluding the program name. Errors print a
/// single line to `err` and map to an ExitCode.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace msnet
