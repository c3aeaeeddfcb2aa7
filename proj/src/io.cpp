#include "msnet/io.hpp"

#include <png.h>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <csetjmp>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace msnet {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream os;
  os << in.rdbuf();
  if (in.bad()) throw IoError("error while reading '" + path + "'");
  return os.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("error while writing '" + path + "'");
}

namespace {

// ---- byte helpers ----

std::uint32_t byteswap32(std::uint32_t v) {
  return (v >> 24) | ((v >> 8) & 0xff00u) | ((v << 8) & 0xff0000u) | (v << 24);
}

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& bytes, const char* what) : bytes_(bytes), what_(what) {}

  template <class U>
  U le() {
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw FormatError(std::string(what_) + ": truncated data");
  }

  const std::string& bytes_;
  const char* what_;
  std::size_t pos_ = 0;
};

// ---- PFM ----

bool is_space(char c) { return c == ' ' || c == '\n' || c == '\r' || c == '\t'; }

std::string next_token(const std::string& bytes, std::size_t& pos) {
  while (pos < bytes.size() && is_space(bytes[pos])) ++pos;
  const std::size_t start = pos;
  while (pos < bytes.size() && !is_space(bytes[pos])) ++pos;
  if (start == pos) throw FormatError("pfm: truncated header");
  return bytes.substr(start, pos - start);
}

long parse_positive(const std::string& token, const char* what) {
  char* end = nullptr;
  const long v = std::strtol(token.c_str(), &end, 10);
  if (end != token.c_str() + token.size() || v <= 0 || v > (1L << 24)) {
    throw FormatError(std::string(what) + ": invalid size '" + token + "'");
  }
  return v;
}

// ---- PNG ----

struct PngReadState {
  const std::string* bytes;
  std::size_t pos;
};

void png_read_callback(png_structp png, png_bytep out, png_size_t n) {
  auto* s = static_cast<PngReadState*>(png_get_io_ptr(png));
  if (s->pos + n > s->bytes->size()) png_error(png, "truncated png data");
  std::memcpy(out, s->bytes->data() + s->pos, n);
  s->pos += n;
}

void png_write_callback(png_structp png, png_bytep data, png_size_t n) {
  static_cast<std::string*>(png_get_io_ptr(png))->append(reinterpret_cast<const char*>(data), n);
}

void png_flush_callback(png_structp) {}

struct PngError {
  char message[256] = "png error";
};

void png_error_callback(png_structp png, png_const_charp msg) {
  auto* e = static_cast<PngError*>(png_get_error_ptr(png));
  std::snprintf(e->message, sizeof e->message, "%s", msg);
  png_longjmp(png, 1);
}

void png_warning_callback(png_structp, png_const_charp) {}

/// Decodes into `out`; returns false with `err` filled on failure. Only
/// objects owned by the caller are touched after setjmp.
bool png_decode_into(const std::string& bytes, Image* out, PngError* err) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, err, png_error_callback, png_warning_callback);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    return false;
  }
  PngReadState state{&bytes, 0};
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  png_set_read_fn(png, &state, png_read_callback);
  png_read_png(png, info, PNG_TRANSFORM_EXPAND | PNG_TRANSFORM_STRIP_ALPHA, nullptr);
  out->width = static_cast<int>(png_get_image_width(png, info));
  out->height = static_cast<int>(png_get_image_height(png, info));
  out->channels = png_get_channels(png, info);
  out->bit_depth = png_get_bit_depth(png, info);
  png_bytepp rows = png_get_rows(png, info);
  out->samples.resize(static_cast<std::size_t>(out->width) * out->height * out->channels);
  const std::size_t per_row = static_cast<std::size_t>(out->width) * out->channels;
  for (int y = 0; y < out->height; ++y) {
    const png_bytep row = rows[y];
    for (std::size_t i = 0; i < per_row; ++i) {
      out->samples[y * per_row + i] =
          out->bit_depth == 16 ? static_cast<std::uint16_t>((row[2 * i] << 8) | row[2 * i + 1]) : row[i];
    }
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

bool png_encode_into(const Image& image, const std::vector<png_bytep>& rows, std::string* out, PngError* err) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, err, png_error_callback, png_warning_callback);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    return false;
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_set_write_fn(png, out, png_write_callback, png_flush_callback);
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height),
               image.bit_depth, image.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_rows(png, info, const_cast<png_bytepp>(rows.data()));
  png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

void check_image(const Image& image) {
  if (image.width <= 0 || image.height <= 0) throw FormatError("image: empty extents");
  if (image.channels != 1 && image.channels != 3) throw FormatError("image: expected 1 or 3 channels");
  if (image.bit_depth != 8 && image.bit_depth != 16) throw FormatError("image: expected bit depth 8 or 16");
  if (image.samples.size() != static_cast<std::size_t>(image.width) * image.height * image.channels) {
    throw FormatError("image: sample count does not match extents");
  }
}

std::string png_encode(const Image& image) {
  check_image(image);
  const int bytes_per_sample = image.bit_depth / 8;
  const std::size_t per_row = static_cast<std::size_t>(image.width) * image.channels;
  std::vector<unsigned char> buffer(per_row * image.height * bytes_per_sample);
  std::vector<png_bytep> rows(static_cast<std::size_t>(image.height));
  for (int y = 0; y < image.height; ++y) {
    unsigned char* row = buffer.data() + y * per_row * bytes_per_sample;
    rows[y] = row;
    for (std::size_t i = 0; i < per_row; ++i) {
      const std::uint16_t v = image.samples[y * per_row + i];
      if (bytes_per_sample == 2) {
        row[2 * i] = static_cast<unsigned char>(v >> 8);
        row[2 * i + 1] = static_cast<unsigned char>(v & 0xff);
      } else {
        if (v > 255) throw FormatError("image: 8-bit sample above 255");
        row[i] = static_cast<unsigned char>(v);
      }
    }
  }
  std::string out;
  PngError err;
  if (!png_encode_into(image, rows, &out, &err)) throw FormatError(std::string("png: ") + err.message);
  return out;
}

Image png_decode(const std::string& bytes) {
  if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0) {
    throw FormatError("png: bad signature");
  }
  Image image;
  PngError err;
  if (!png_decode_into(bytes, &image, &err)) throw FormatError(std::string("png: ") + err.message);
  return image;
}

Image pnm_decode(const std::string& bytes) {
  std::size_t pos = 0;
  auto token = [&]() {
    for (;;) {
      while (pos < bytes.size() && is_space(bytes[pos])) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !is_space(bytes[pos])) ++pos;
    if (start == pos) throw FormatError("pnm: truncated header");
    return bytes.substr(start, pos - start);
  };
  const std::string magic = token();
  if (magic != "P5" && magic != "P6") throw FormatError("pnm: expected binary P5 or P6");
  Image image;
  image.channels = magic == "P5" ? 1 : 3;
  image.width = static_cast<int>(parse_positive(token(), "pnm"));
  image.height = static_cast<int>(parse_positive(token(), "pnm"));
  const long maxval = parse_positive(token(), "pnm");
  if (maxval > 65535) throw FormatError("pnm: maxval above 65535");
  image.bit_depth = maxval > 255 ? 16 : 8;
  ++pos;  // single whitespace before the raster
  const std::size_t count = static_cast<std::size_t>(image.width) * image.height * image.channels;
  const std::size_t bps = image.bit_depth / 8;
  if (bytes.size() < pos || bytes.size() - pos < count * bps) throw FormatError("pnm: truncated raster");
  image.samples.resize(count);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
  for (std::size_t i = 0; i < count; ++i) {
    image.samples[i] = bps == 2 ? static_cast<std::uint16_t>((p[2 * i] << 8) | p[2 * i + 1]) : p[i];
  }
  if (maxval != 255 && maxval != 65535) {
    // Rescale to the full range of the chosen bit depth.
    const double full = image.bit_depth == 16 ? 65535.0 : 255.0;
    for (auto& v : image.samples) v = static_cast<std::uint16_t>(std::lround(std::min<double>(v, maxval) * full / maxval));
  }
  return image;
}

// ---- container ----

constexpr char kMagic[] = "MSNW1";
constexpr std::size_t kMagicSize = 5;

}  // namespace

// ---- PFM ----

Tensor pfm_decode(const std::string& bytes) {
  std::size_t pos = 0;
  const std::string magic = next_token(bytes, pos);
  int channels = 0;
  if (magic == "Pf") {
    channels = 1;
  } else if (magic == "PF") {
    channels = 3;
  } else {
    throw FormatError("pfm: expected header 'Pf' or 'PF'");
  }
  const long width = parse_positive(next_token(bytes, pos), "pfm");
  const long height = parse_positive(next_token(bytes, pos), "pfm");
  const std::string scale_text = next_token(bytes, pos);
  char* end = nullptr;
  const double scale = std::strtod(scale_text.c_str(), &end);
  if (end != scale_text.c_str() + scale_text.size() || scale == 0.0 || !std::isfinite(scale)) {
    throw FormatError("pfm: invalid scale '" + scale_text + "'");
  }
  if (pos >= bytes.size() || !is_space(bytes[pos])) throw FormatError("pfm: truncated header");
  ++pos;
  const bool little = scale < 0.0;
  const std::size_t count = static_cast<std::size_t>(width) * height * channels;
  if (bytes.size() - pos < count * 4) throw FormatError("pfm: truncated payload");
  Tensor out({1, channels, height, width});
  for (long y = 0; y < height; ++y) {
    const long src_row = height - 1 - y;
    for (long x = 0; x < width; ++x) {
      for (int c = 0; c < channels; ++c) {
        std::uint32_t u;
        std::memcpy(&u, bytes.data() + pos + ((src_row * width + x) * channels + c) * 4, 4);
        if (little != (std::endian::native == std::endian::little)) u = byteswap32(u);
        out.at({0, c, y, x}) = std::bit_cast<float>(u);
      }
    }
  }
  return out;
}

std::string pfm_encode(const Tensor& image, bool big_endian) {
  const Shape& s = image.shape();
  std::int64_t channels = 1, height = 0, width = 0;
  if (s.size() == 2) {
    height = s[0];
    width = s[1];
  } else if (s.size() == 3 && s[0] == 1) {
    height = s[1];
    width = s[2];
  } else if (s.size() == 4 && s[0] == 1 && (s[1] == 1 || s[1] == 3)) {
    channels = s[1];
    height = s[2];
    width = s[3];
  } else {
    throw ShapeError("pfm: cannot store tensor of shape " + to_string(s));
  }
  if (height == 0 || width == 0) throw ShapeError("pfm: empty image");
  std::string out = (channels == 1 ? "Pf\n" : "PF\n") + std::to_string(width) + " " + std::to_string(height) +
                    (big_endian ? "\n1\n" : "\n-1\n");
  const std::size_t header = out.size();
  out.resize(header + static_cast<std::size_t>(channels * height * width) * 4);
  const float* data = image.data();
  for (std::int64_t y = 0; y < height; ++y) {
    const std::int64_t dst_row = height - 1 - y;
    for (std::int64_t x = 0; x < width; ++x) {
      for (std::int64_t c = 0; c < channels; ++c) {
        std::uint32_t u = std::bit_cast<std::uint32_t>(data[(c * height + y) * width + x]);
        if (big_endian == (std::endian::native == std::endian::little)) u = byteswap32(u);
        std::memcpy(out.data() + header + ((dst_row * width + x) * channels + c) * 4, &u, 4);
      }
    }
  }
  return out;
}

Tensor pfm_read(const std::string& path) { return pfm_decode(read_file(path)); }

void pfm_write(const Tensor& image, const std::string& path) { write_file(path, pfm_encode(image)); }

// ---- raster images ----

Image png_read(const std::string& path) { return png_decode(read_file(path)); }

void png_write(const Image& image, const std::string& path) { write_file(path, png_encode(image)); }

Image pnm_read(const std::string& path) { return pnm_decode(read_file(path)); }

Image image_read(const std::string& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '5' || bytes[1] == '6')) return pnm_decode(bytes);
  return png_decode(bytes);
}

Tensor image_to_tensor(const Image& image) {
  check_image(image);
  static constexpr float mean[3] = {0.485f, 0.456f, 0.406f};
  static constexpr float stdev[3] = {0.229f, 0.224f, 0.225f};
  const float full = image.bit_depth == 16 ? 65535.0f : 255.0f;
  Tensor out({1, 3, image.height, image.width});
  for (int c = 0; c < 3; ++c) {
    const int src = image.channels == 1 ? 0 : c;
    for (int y = 0; y < image.height; ++y) {
      for (int x = 0; x < image.width; ++x) {
        out.at({0, c, y, x}) = (static_cast<float>(image.at(y, x, src)) / full - mean[c]) / stdev[c];
      }
    }
  }
  return out;
}

// ---- KITTI ----

DisparityMap kitti_disp_decode(const Image& png16) {
  if (png16.bit_depth != 16) throw FormatError("kitti: expected a 16-bit image, got " + std::to_string(png16.bit_depth) + "-bit");
  if (png16.channels != 1) throw FormatError("kitti: expected a single-channel image");
  check_image(png16);
  DisparityMap map{Tensor({1, png16.height, png16.width}), Tensor({1, png16.height, png16.width})};
  for (std::size_t i = 0; i < png16.samples.size(); ++i) {
    const std::uint16_t v = png16.samples[i];
    map.values[i] = static_cast<float>(v / 256.0);
    map.valid[i] = v != 0 ? 1.0f : 0.0f;
  }
  return map;
}

Image kitti_disp_encode(const DisparityMap& map) {
  const Shape& s = map.values.shape();
  require_same_shape(s, map.valid.shape(), "kitti_disp_encode");
  Image image;
  if (s.size() == 2) {
    image.height = static_cast<int>(s[0]);
    image.width = static_cast<int>(s[1]);
  } else if (s.size() == 3 && s[0] == 1) {
    image.height = static_cast<int>(s[1]);
    image.width = static_cast<int>(s[2]);
  } else {
    throw ShapeError("kitti: cannot store map of shape " + to_string(s));
  }
  image.channels = 1;
  image.bit_depth = 16;
  image.samples.resize(map.values.size());
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    const double v = static_cast<double>(map.values[i]);
    if (map.valid[i] == 0.0f) {
      image.samples[i] = 0;
    } else if (!std::isfinite(v)) {
      throw NumericError("kitti: non-finite disparity");
    } else {
      image.samples[i] = static_cast<std::uint16_t>(std::clamp(std::round(v * 256.0), 0.0, 65535.0));
    }
  }
  return image;
}

DisparityMap kitti_disp_read(const std::string& path) { return kitti_disp_decode(png_read(path)); }

void kitti_disp_write(const DisparityMap& map, const std::string& path) { png_write(kitti_disp_encode(map), path); }

// ---- weights container ----

std::string weights_encode(const ad::ParamStore<float>& store) {
  std::string out(kMagic, kMagicSize);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(store.size()));
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& p = store[i];
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    put_le<std::uint8_t>(out, 0);
    put_le<std::uint8_t>(out, p.trainable ? 1 : 0);
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(p.value.rank()));
    for (std::int64_t e : p.value.shape()) put_le<std::uint64_t>(out, static_cast<std::uint64_t>(e));
    put_le<std::uint64_t>(out, offset);
    offset += p.value.size() * 4;
  }
  put_le<std::uint64_t>(out, offset);
  const std::size_t payload_start = out.size();
  for (std::size_t i = 0; i < store.size(); ++i) {
    for (float v : store[i].value.values()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(out.data() + payload_start),
                         static_cast<uInt>(out.size() - payload_start));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(crc));
  return out;
}

ad::ParamStore<float> weights_decode(const std::string& bytes) {
  Reader r(bytes, "weights");
  if (r.take(kMagicSize) != std::string(kMagic, kMagicSize)) throw FormatError("weights: bad magic");
  const std::uint32_t count = r.le<std::uint32_t>();
  struct Entry {
    std::string name;
    bool trainable;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> entries;
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    const std::uint32_t len = r.le<std::uint32_t>();
    e.name = r.take(len);
    if (!names.insert(e.name).second) throw FormatError("weights: duplicate entry '" + e.name + "'");
    if (r.le<std::uint8_t>() != 0) throw FormatError("weights: unsupported dtype in '" + e.name + "'");
    const std::uint8_t flags = r.le<std::uint8_t>();
    if (flags > 1) throw FormatError("weights: unknown flags in '" + e.name + "'");
    e.trainable = flags == 1;
    const std::uint8_t rank = r.le<std::uint8_t>();
    if (rank > 8) throw FormatError("weights: rank too large in '" + e.name + "'");
    for (std::uint8_t k = 0; k < rank; ++k) {
      const auto extent = r.le<std::uint64_t>();
      if (extent > (1ull << 32)) throw FormatError("weights: extent too large in '" + e.name + "'");
      e.shape.push_back(static_cast<std::int64_t>(extent));
    }
    e.offset = r.le<std::uint64_t>();
    entries.push_back(std::move(e));
  }
  const std::uint64_t payload_size = r.le<std::uint64_t>();
  if (payload_size > r.remaining()) throw FormatError("weights: truncated payload");
  const std::size_t payload_start = r.pos();

  // Entries must tile [0, payload_size) without overlap.
  std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;
  for (const auto& e : entries) {
    std::uint64_t n = 1;
    for (std::int64_t d : e.shape) n *= static_cast<std::uint64_t>(d);
    if (e.offset > payload_size || n * 4 > payload_size - e.offset) {
      throw FormatError("weights: entry '" + e.name + "' lies outside the payload");
    }
    ranges.emplace_back(e.offset, e.offset + n * 4);
  }
  std::sort(ranges.begin(), ranges.end());
  for (std::size_t i = 1; i < ranges.size(); ++i) {
    if (ranges[i].first < ranges[i - 1].second) throw FormatError("weights: overlapping entries");
  }

  r.take(static_cast<std::size_t>(payload_size));
  const std::uint32_t stored_crc = r.le<std::uint32_t>();
  const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(bytes.data() + payload_start),
                         static_cast<uInt>(payload_size));
  if (static_cast<std::uint32_t>(crc) != stored_crc) throw FormatError("weights: crc32 mismatch");

  ad::ParamStore<float> store;
  for (const auto& e : entries) {
    Tensor value(e.shape);
    const char* src = bytes.data() + payload_start + e.offset;
    for (std::size_t i = 0; i < value.size(); ++i) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(src[4 * i + b])) << (8 * b);
      value[i] = std::bit_cast<float>(u);
    }
    store.add(e.name, std::move(value), e.trainable);
  }
  return store;
}

void weights_save(const ad::ParamStore<float>& store, const std::string& path) {
  write_file(path, weights_encode(store));
}

ad::ParamStore<float> weights_load(const std::string& path) { return weights_decode(read_file(path)); }

void weights_assign(ad::ParamStore<float>& target, const ad::ParamStore<float>& source) {
  if (target.size() != source.size()) {
    throw FormatError("weights: expected " + std::to_string(target.size()) + " entries, file has " +
                      std::to_string(source.size()));
  }
  for (std::size_t i = 0; i < target.size(); ++i) {
    auto& t = target[i];
    const auto* s = source.find(t.name);
    if (!s) throw FormatError("weights: missing entry '" + t.name + "'");
    if (s->value.shape() != t.value.shape()) {
      throw FormatError("weights: entry '" + t.name + "' has shape " + to_string(s->value.shape()) + ", expected " +
                        to_string(t.value.shape()));
    }
    t.value = s->value;
  }
}

// ---- run configuration ----

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  if (out.empty()) throw ConfigError("empty list");
  return out;
}

long long to_int(const std::string& s) {
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &used);
  } catch (const std::exception&) {
    throw ConfigError("expected an integer, got '" + s + "'");
  }
  if (used != s.size()) throw ConfigError("expected an integer, got '" + s + "'");
  return v;
}

double to_double(const std::string& s) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw ConfigError("expected a number, got '" + s + "'");
  }
  if (used != s.size()) throw ConfigError("expected a number, got '" + s + "'");
  return v;
}

template <class T>
std::string join(const T& values) {
  std::ostringstream os;
  bool first = true;
  for (const auto& v : values) {
    if (!first) os << ',';
    os << v;
    first = false;
  }
  return os.str();
}

template <class T, std::size_t N>
void set_array(std::array<T, N>& out, const std::string& value) {
  const auto items = split_list(value);
  if (items.size() != N) throw ConfigError("expected " + std::to_string(N) + " comma-separated values");
  for (std::size_t i = 0; i < N; ++i) out[i] = static_cast<T>(to_int(items[i]));
}

using Setter = void (*)(RunConfig&, const std::string&);

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"name", [](RunConfig& c, const std::string& v) { c.model.name = v; }},
      {"rank", [](RunConfig& c, const std::string& v) { c.model.rank = static_cast<int>(to_int(v)); }},
      {"d_max", [](RunConfig& c, const std::string& v) { c.model.d_max = to_int(v); }},
      {"num_hourglasses", [](RunConfig& c, const std::string& v) { c.model.num_hourglasses = static_cast<int>(to_int(v)); }},
      {"hourglass_width", [](RunConfig& c, const std::string& v) { c.model.hourglass_width = to_int(v); }},
      {"first_convs", [](RunConfig& c, const std::string& v) { c.model.first_convs = parse_block_kind(v); }},
      {"first_t", [](RunConfig& c, const std::string& v) { c.model.first_t = static_cast<int>(to_int(v)); }},
      {"backbone_blocks", [](RunConfig& c, const std::string& v) { c.model.backbone_blocks = parse_block_kind(v); }},
      {"backbone_t", [](RunConfig& c, const std::string& v) { c.model.backbone_t = static_cast<int>(to_int(v)); }},
      {"pre_hourglass", [](RunConfig& c, const std::string& v) { c.model.pre_hourglass = parse_block_kind(v); }},
      {"pre_hourglass_t", [](RunConfig& c, const std::string& v) { c.model.pre_hourglass_t = static_cast<int>(to_int(v)); }},
      {"hourglass", [](RunConfig& c, const std::string& v) { c.model.hourglass = parse_block_kind(v); }},
      {"hourglass_t", [](RunConfig& c, const std::string& v) { c.model.hourglass_t = static_cast<int>(to_int(v)); }},
      {"volume", [](RunConfig& c, const std::string& v) { c.model.volume = parse_volume_kind(v); }},
      {"gwc_groups", [](RunConfig& c, const std::string& v) { c.model.gwc_groups = to_int(v); }},
      {"interlace_group", [](RunConfig& c, const std::string& v) { c.model.interlace_group = static_cast<int>(to_int(v)); }},
      {"interlace_channels", [](RunConfig& c, const std::string& v) { c.model.interlace_channels = to_int(v); }},
      {"first_channels", [](RunConfig& c, const std::string& v) { c.model.first_channels = to_int(v); }},
      {"stage_channels", [](RunConfig& c, const std::string& v) { set_array(c.model.stage_channels, v); }},
      {"stage_blocks", [](RunConfig& c, const std::string& v) { set_array(c.model.stage_blocks, v); }},
      {"reduction",
       [](RunConfig& c, const std::string& v) {
         c.model.reduction.clear();
         if (v == "none") return;
         for (const auto& s : split_list(v)) c.model.reduction.push_back(to_int(s));
       }},
      {"loss_weights",
       [](RunConfig& c, const std::string& v) {
         c.model.loss_weights.clear();
         for (const auto& s : split_list(v)) c.model.loss_weights.push_back(to_double(s));
       }},
      {"seed", [](RunConfig& c, const std::string& v) { c.seed = static_cast<std::uint64_t>(to_int(v)); }},
      {"threads",
       [](RunConfig& c, const std::string& v) {
         c.threads = static_cast<int>(to_int(v));
         if (c.threads < 0) throw ConfigError("threads must be non-negative");
       }},
      {"steps",
       [](RunConfig& c, const std::string& v) {
         c.steps = static_cast<int>(to_int(v));
         if (c.steps < 0) throw ConfigError("steps must be non-negative");
       }},
      {"lr", [](RunConfig& c, const std::string& v) { c.adam.lr = to_double(v); }},
      {"beta1", [](RunConfig& c, const std::string& v) { c.adam.beta1 = to_double(v); }},
      {"beta2", [](RunConfig& c, const std::string& v) { c.adam.beta2 = to_double(v); }},
      {"eps", [](RunConfig& c, const std::string& v) { c.adam.eps = to_double(v); }},
      {"lr_halve_at",
       [](RunConfig& c, const std::string& v) {
         c.adam.halve_at.clear();
         if (v == "none") return;
         for (const auto& s : split_list(v)) c.adam.halve_at.push_back(static_cast<int>(to_int(s)));
       }},
  };
  return table;
}

}  // namespace

RunConfig RunConfig::parse(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> pairs;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(number) + ": expected key = value");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key != "model" && !setters().count(key)) {
      throw ConfigError("line " + std::to_string(number) + ": unknown key '" + key + "'");
    }
    if (!seen.insert(key).second) throw ConfigError("line " + std::to_string(number) + ": duplicate key '" + key + "'");
    pairs.emplace_back(key, value);
  }
  RunConfig c;
  for (const auto& [key, value] : pairs) {
    if (key == "model") c.model = ModelConfig::preset(value);
  }
  for (const auto& [key, value] : pairs) {
    if (key == "model") continue;
    try {
      setters().at(key)(c, value);
    } catch (const ConfigError& e) {
      throw ConfigError("key '" + key + "': " + e.what());
    }
  }
  c.model.validate();
  return c;
}

RunConfig RunConfig::load(const std::string& path) { return parse(read_file(path)); }

std::string RunConfig::to_text() const {
  std::ostringstream os;
  os.precision(17);
  const ModelConfig& m = model;
  os << "name = " << m.name << '\n'
     << "rank = " << m.rank << '\n'
     << "d_max = " << m.d_max << '\n'
     << "num_hourglasses = " << m.num_hourglasses << '\n'
     << "hourglass_width = " << m.hourglass_width << '\n'
     << "first_convs = " << to_string(m.first_convs) << '\n'
     << "first_t = " << m.first_t << '\n'
     << "backbone_blocks = " << to_string(m.backbone_blocks) << '\n'
     << "backbone_t = " << m.backbone_t << '\n'
     << "pre_hourglass = " << to_string(m.pre_hourglass) << '\n'
     << "pre_hourglass_t = " << m.pre_hourglass_t << '\n'
     << "hourglass = " << to_string(m.hourglass) << '\n'
     << "hourglass_t = " << m.hourglass_t << '\n'
     << "volume = " << to_string(m.volume) << '\n'
     << "gwc_groups = " << m.gwc_groups << '\n'
     << "interlace_group = " << m.interlace_group << '\n'
     << "interlace_channels = " << m.interlace_channels << '\n'
     << "first_channels = " << m.first_channels << '\n'
     << "stage_channels = " << join(m.stage_channels) << '\n'
     << "stage_blocks = " << join(m.stage_blocks) << '\n'
     << "reduction = " << (m.reduction.empty() ? "none" : join(m.reduction)) << '\n'
     << "loss_weights = " << join(m.loss_weights) << '\n'
     << "seed = " << seed << '\n'
     << "threads = " << threads << '\n'
     << "steps = " << steps << '\n'
     << "lr = " << adam.lr << '\n'
     << "beta1 = " << adam.beta1 << '\n'
     << "beta2 = " << adam.beta2 << '\n'
     << "eps = " << adam.eps << '\n'
     << "lr_halve_at = " << (adam.halve_at.empty() ? "none" : join(adam.halve_at)) << '\n';
  return os.str();
}

}  // namespace msnet
