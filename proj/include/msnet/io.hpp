#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msnet/autodiff.hpp"
#include "msnet/metrics.hpp"
#include "msnet/network.hpp"

namespace msnet {

// ---- PFM ---------------------------------------------------------------

/// Parses PFM bytes: "Pf" gives [1,1,H,W], "PF" gives [1,3,H,W]. A negative
/// scale marks little-endian samples. Rows are stored bottom-to-top and
/// returned top-to-bottom. Throws FormatError on a malformed header or a
/// truncated payload.
Tensor pfm_decode(const std::string& bytes);
/// Accepts [H,W], [1,H,W], [1,1,H,W] or [1,3,H,W]. Scale is -1 (little-endian)
/// unless big_endian is set.
std::string pfm_encode(const Tensor& image, bool big_endian = false);

Tensor pfm_read(const std::string& path);
void pfm_write(const Tensor& image, const std::string& path);

// ---- raster images -----------------------------------------------------

/// Interleaved 8- or 16-bit samples, row-major.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  int bit_depth = 8;
  std::vector<std::uint16_t> samples;

  std::uint16_t at(int y, int x, int c = 0) const {
    return samples[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

Image png_read(const std::string& path);
/// Gray or RGB, 8 or 16 bits.
void png_write(const Image& image, const std::string& path);
/// Binary PGM (P5) or PPM (P6) with maxval up to 65535.
Image pnm_read(const std::string& path);
/// Dispatches on the file's magic bytes (PNG, P5 or P6).
Image image_read(const std::string& path);

/// [1,3,H,W] network input: samples scaled to [0,1], then normalized with
/// the ImageNet channel mean and standard deviation. Gray images are
/// replicated to three channels.
Tensor image_to_tensor(const Image& image);

// ---- KITTI 16-bit disparity ------------------------------------------------

/// Disparity = stored / 256; stored 0 marks an invalid pixel. Returns a
/// [1,H,W] map. Throws FormatError unless the image is 16-bit gray.
DisparityMap kitti_disp_decode(const Image& png16);
/// Rounds disparity * 256 to nearest and clamps to [0, 65535]; invalid
/// pixels are stored as 0. Accepts [H,W] or [1,H,W] maps.
Image kitti_disp_encode(const DisparityMap& map);

DisparityMap kitti_disp_read(const std::string& path);
void kitti_disp_write(const DisparityMap& map, const std::string& path);

// ---- weights container -------------------------------------------------------

/// MSNW1 layout, all integers little-endian:
///   "MSNW1", u32 entry count,
///   per entry: u32 name length, utf-8 name, u8 dtype (0 = f32),
///              u8 flags (bit 0 = trainable), u8 rank, rank x i64 extents,
///              u64 payload offset,
///   u64 payload size, f32 payloads in entry order, u32 crc32 of the payload.
std::string weights_encode(const ad::ParamStore<float>& store);
/// Throws FormatError on bad magic, duplicate names, overlapping or
/// out-of-range offsets, truncation or a crc mismatch.
ad::ParamStore<float> weights_decode(const std::string& bytes);

void weights_save(const ad::ParamStore<float>& store, const std::string& path);
ad::ParamStore<float> weights_load(const std::string& path);

/// Copies every value of `source` into the same-named entry of `target`.
/// Throws FormatError unless both hold the same names with equal shapes.
void weights_assign(ad::ParamStore<float>& target, const ad::ParamStore<float>& source);

// ---- run configuration -------------------------------------------------------

/// Model configuration plus run settings, read from "key = value" lines.
/// Blank lines and lines starting with '#' are ignored. The key "model"
/// selects a preset (default mobile3d) that the remaining keys override;
/// every other key is a ModelConfig field name or one of the run fields
/// below. Lists are comma separated.
struct RunConfig {
  ModelConfig model = ModelConfig::preset("mobile3d");
  std::uint64_t seed = 1;
  int threads = 0;  // 0: MSNET_THREADS or hardware concurrency
  int steps = 400;
  ad::AdamOptions adam;

  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::string& path);
  /// Every key with its current value; parse(to_text()) reproduces the config.
  std::string to_text() const;
};

// ---- files ---------------------------------------------------------------------

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

}  // namespace msnet
