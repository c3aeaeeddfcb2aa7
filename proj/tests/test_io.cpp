#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>

#include "doctest.h"
#include "msnet/error.hpp"
#include "msnet/io.hpp"
#include "support.hpp"

using namespace msnet;
using testsupport::random_tensor;

namespace {

std::string temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "msnet_test_io";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

std::string le_bytes(float v) {
  const auto u = std::bit_cast<std::uint32_t>(v);
  std::string s;
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
  return s;
}

std::string be_bytes(float v) {
  std::string s = le_bytes(v);
  return {s[3], s[2], s[1], s[0]};
}

bool bit_identical(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("pfm hand-built fixtures") {
  // Top row {1.5, -2}, bottom row {0.25, 1024}; the file stores the bottom row first.
  SUBCASE("little-endian grayscale") {
    const std::string bytes =
        std::string("Pf\n2 2\n-1.0\n") + le_bytes(0.25f) + le_bytes(1024.0f) + le_bytes(1.5f) + le_bytes(-2.0f);
    const Tensor t = pfm_decode(bytes);
    REQUIRE(t.shape() == Shape{1, 1, 2, 2});
    CHECK(t.at({0, 0, 0, 0}) == 1.5f);
    CHECK(t.at({0, 0, 0, 1}) == -2.0f);
    CHECK(t.at({0, 0, 1, 0}) == 0.25f);
    CHECK(t.at({0, 0, 1, 1}) == 1024.0f);
    CHECK(pfm_encode(t) == "Pf\n2 2\n-1\n" + bytes.substr(12));
  }
  SUBCASE("big-endian grayscale gives the same values") {
    const std::string bytes =
        std::string("Pf\n2 2\n1.0\n") + be_bytes(0.25f) + be_bytes(1024.0f) + be_bytes(1.5f) + be_bytes(-2.0f);
    const Tensor t = pfm_decode(bytes);
    CHECK(t.at({0, 0, 0, 0}) == 1.5f);
    CHECK(t.at({0, 0, 0, 1}) == -2.0f);
    CHECK(t.at({0, 0, 1, 0}) == 0.25f);
    CHECK(t.at({0, 0, 1, 1}) == 1024.0f);
    CHECK(pfm_encode(t, true) == "Pf\n2 2\n1\n" + bytes.substr(11));
  }
  SUBCASE("color pixels are interleaved") {
    const std::string bytes = std::string("PF\n1 1\n-1\n") + le_bytes(1.0f) + le_bytes(2.0f) + le_bytes(3.0f);
    const Tensor t = pfm_decode(bytes);
    REQUIRE(t.shape() == Shape{1, 3, 1, 1});
    CHECK(t[0] == 1.0f);
    CHECK(t[1] == 2.0f);
    CHECK(t[2] == 3.0f);
  }
}

TEST_CASE("pfm round-trip is bit-exact") {
  Tensor t = random_tensor<float>({1, 1, 8, 8}, 11, -300.0, 300.0);
  t[0] = -0.0f;
  t[1] = std::numeric_limits<float>::denorm_min();
  t[2] = std::numeric_limits<float>::infinity();
  t[3] = std::numeric_limits<float>::quiet_NaN();
  CHECK(bit_identical(pfm_decode(pfm_encode(t)), t));
  CHECK(bit_identical(pfm_decode(pfm_encode(t, true)), t));

  const Tensor color = random_tensor<float>({1, 3, 5, 7}, 12);
  CHECK(bit_identical(pfm_decode(pfm_encode(color)), color));

  const std::string path = temp_path("rt.pfm");
  pfm_write(t, path);
  CHECK(bit_identical(pfm_read(path), t));

  Tensor flat = random_tensor<float>({4, 6}, 13);
  const Tensor back = pfm_decode(pfm_encode(flat));
  CHECK(back.shape() == Shape{1, 1, 4, 6});
  CHECK(std::memcmp(back.data(), flat.data(), flat.size() * 4) == 0);
}

TEST_CASE("pfm errors") {
  const std::string good = std::string("Pf\n1 1\n-1\n") + le_bytes(1.0f);
  CHECK_NOTHROW(pfm_decode(good));
  CHECK_THROWS_AS(pfm_decode("P5\n1 1\n-1\n" + le_bytes(1.0f)), FormatError);
  CHECK_THROWS_AS(pfm_decode("Pf\n1 x\n-1\n" + le_bytes(1.0f)), FormatError);
  CHECK_THROWS_AS(pfm_decode("Pf\n0 1\n-1\n"), FormatError);
  CHECK_THROWS_AS(pfm_decode("Pf\n1 1\n0\n" + le_bytes(1.0f)), FormatError);
  CHECK_THROWS_AS(pfm_decode("Pf\n1 1\nabc\n" + le_bytes(1.0f)), FormatError);
  CHECK_THROWS_AS(pfm_decode(good.substr(0, good.size() - 1)), FormatError);
  CHECK_THROWS_AS(pfm_decode("Pf\n2"), FormatError);
  CHECK_THROWS_AS(pfm_decode(""), FormatError);
  CHECK_THROWS_AS(pfm_encode(Tensor({2, 1, 2, 2})), ShapeError);
  CHECK_THROWS_AS(pfm_read(temp_path("missing.pfm")), IoError);
}

TEST_CASE("kitti 16-bit disparity") {
  Image img;
  img.width = 3;
  img.height = 1;
  img.channels = 1;
  img.bit_depth = 16;
  img.samples = {256, 0, 3159};

  SUBCASE("decode") {
    const DisparityMap m = kitti_disp_decode(img);
    REQUIRE(m.values.shape() == Shape{1, 1, 3});
    CHECK(m.values[0] == 1.0f);
    CHECK(m.valid[0] == 1.0f);
    CHECK(m.valid[1] == 0.0f);
    CHECK(m.values[2] == doctest::Approx(12.33984375));
    CHECK(std::fabs(m.values[2] - 12.34f) < 1.0f / 256.0f);
    CHECK(m.valid_count() == 2);
  }
  SUBCASE("encode rounds to nearest and clamps") {
    DisparityMap m{Tensor({1, 1, 5}, std::vector<float>{12.34f, 1.0f, 300.0f, -1.0f, 7.0f}),
                   Tensor({1, 1, 5}, std::vector<float>{1, 1, 1, 1, 0})};
    const Image e = kitti_disp_encode(m);
    CHECK(e.bit_depth == 16);
    CHECK(e.samples == std::vector<std::uint16_t>{3159, 256, 65535, 0, 0});
  }
  SUBCASE("wrong bit depth") {
    Image eight = img;
    eight.bit_depth = 8;
    eight.samples = {1, 0, 2};
    CHECK_THROWS_AS(kitti_disp_decode(eight), FormatError);
    Image rgb = img;
    rgb.channels = 3;
    rgb.width = 1;
    CHECK_THROWS_AS(kitti_disp_decode(rgb), FormatError);
  }
  SUBCASE("png file round-trip within 1/256") {
    const Tensor values = random_tensor<float>({1, 9, 13}, 21, 0.01, 255.0);
    Tensor valid({1, 9, 13}, 1.0f);
    valid[5] = 0.0f;
    const std::string path = temp_path("disp.png");
    kitti_disp_write({values, valid}, path);
    const DisparityMap back = kitti_disp_read(path);
    CHECK(back.valid[5] == 0.0f);
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (i == 5) continue;
      CHECK(back.valid[i] == 1.0f);
      CHECK(std::fabs(back.values[i] - values[i]) <= 0.5f / 256.0f + 1e-6f);
    }
  }
}

TEST_CASE("png and pnm images") {
  Image rgb;
  rgb.width = 4;
  rgb.height = 3;
  rgb.channels = 3;
  rgb.bit_depth = 8;
  for (int i = 0; i < 36; ++i) rgb.samples.push_back(static_cast<std::uint16_t>(i * 7));
  const std::string png = temp_path("rgb.png");
  png_write(rgb, png);
  const Image back = image_read(png);
  CHECK(back.width == 4);
  CHECK(back.height == 3);
  CHECK(back.channels == 3);
  CHECK(back.bit_depth == 8);
  CHECK(back.samples == rgb.samples);

  Image gray16;
  gray16.width = 2;
  gray16.height = 2;
  gray16.channels = 1;
  gray16.bit_depth = 16;
  gray16.samples = {0, 1, 65535, 40000};
  png_write(gray16, temp_path("g16.png"));
  CHECK(png_read(temp_path("g16.png")).samples == gray16.samples);

  SUBCASE("binary pnm") {
    write_file(temp_path("a.pgm"), std::string("P5\n# comment\n2 1\n255\n") + '\x10' + '\xff');
    const Image pgm = image_read(temp_path("a.pgm"));
    CHECK(pgm.channels == 1);
    CHECK(pgm.samples == std::vector<std::uint16_t>{16, 255});

    write_file(temp_path("a.ppm"), std::string("P6 1 1 65535\n") + "\x01\x02\x03\x04\x05\x06");
    const Image ppm = pnm_read(temp_path("a.ppm"));
    CHECK(ppm.bit_depth == 16);
    CHECK(ppm.samples == std::vector<std::uint16_t>{0x0102, 0x0304, 0x0506});

    CHECK_THROWS_AS(pnm_read(temp_path("a.pgm.missing")), IoError);
    write_file(temp_path("short.pgm"), "P5\n4 4\n255\n\x01");
    CHECK_THROWS_AS(pnm_read(temp_path("short.pgm")), FormatError);
    write_file(temp_path("ascii.pgm"), "P2\n1 1\n255\n7\n");
    CHECK_THROWS_AS(pnm_read(temp_path("ascii.pgm")), FormatError);
  }
  SUBCASE("malformed png") {
    write_file(temp_path("bad.png"), "\x89PNG\r\n\x1a\nnot really");
    CHECK_THROWS_AS(png_read(temp_path("bad.png")), FormatError);
    write_file(temp_path("junk.png"), "hello");
    CHECK_THROWS_AS(image_read(temp_path("junk.png")), FormatError);
  }
  SUBCASE("tensor conversion") {
    const Tensor t = image_to_tensor(gray16);
    REQUIRE(t.shape() == Shape{1, 3, 2, 2});
    CHECK(t.at({0, 0, 0, 0}) == doctest::Approx(-0.485 / 0.229));
    CHECK(t.at({0, 2, 1, 0}) == doctest::Approx((1.0 - 0.406) / 0.225));
  }
}

TEST_CASE("weights container") {
  ad::ParamStore<float> store;
  store.add("a.weight", random_tensor<float>({3, 2, 3, 3}, 31));
  store.add("a.bn.running_mean", random_tensor<float>({3}, 32), false);
  store.add("b", Tensor({1}, std::vector<float>{std::numeric_limits<float>::quiet_NaN()}));
  store.add("scalar", Tensor({1, 1}, 2.5f));

  const std::string bytes = weights_encode(store);
  CHECK(bytes.substr(0, 5) == "MSNW1");

  SUBCASE("round-trip keeps names, order, flags and bits") {
    const auto back = weights_decode(bytes);
    REQUIRE(back.size() == store.size());
    for (std::size_t i = 0; i < store.size(); ++i) {
      CHECK(back[i].name == store[i].name);
      CHECK(back[i].trainable == store[i].trainable);
      CHECK(bit_identical(back[i].value, store[i].value));
    }
    CHECK(weights_encode(back) == bytes);
    const std::string path = temp_path("w.msnw");
    weights_save(store, path);
    CHECK(weights_encode(weights_load(path)) == bytes);
  }
  SUBCASE("size is the f32 payload plus the entry table") {
    std::size_t table = 5 + 4 + 8 + 4;
    for (std::size_t i = 0; i < store.size(); ++i) table += 4 + store[i].name.size() + 3 + 8 * store[i].value.rank() + 8;
    CHECK(bytes.size() == table + 4 * static_cast<std::size_t>(store.total_count()));
  }
  SUBCASE("corruption is detected") {
    std::string bad = bytes;
    bad[bad.size() - 10] ^= 0x01;
    CHECK_THROWS_AS(weights_decode(bad), FormatError);
    CHECK_THROWS_AS(weights_decode("MSNW2" + bytes.substr(5)), FormatError);
    for (std::size_t cut : {std::size_t{3}, std::size_t{20}, bytes.size() - 1}) {
      CHECK_THROWS_AS(weights_decode(bytes.substr(0, cut)), FormatError);
    }
    ad::ParamStore<float> twins;
    twins.add("x", Tensor({1}, 1.0f));
    twins.add("y", Tensor({1}, 2.0f));
    std::string twin_bytes = weights_encode(twins);
    twin_bytes[twin_bytes.find('y')] = 'x';
    CHECK_THROWS_AS(weights_decode(twin_bytes), FormatError);
    // Point y's offset at x's payload.
    std::string overlap = weights_encode(twins);
    const std::size_t y_entry = overlap.find('y');
    overlap[y_entry + 1 + 3 + 8] = 0;
    CHECK_THROWS_AS(weights_decode(overlap), FormatError);
  }
  SUBCASE("assign checks names and shapes") {
    ad::ParamStore<float> target;
    target.add("a.weight", Tensor({3, 2, 3, 3}));
    target.add("a.bn.running_mean", Tensor({3}), false);
    target.add("b", Tensor({1}));
    target.add("scalar", Tensor({1, 1}));
    weights_assign(target, store);
    CHECK(bit_identical(target.get("a.weight").value, store.get("a.weight").value));
    target.add("extra", Tensor({1}));
    CHECK_THROWS_AS(weights_assign(target, store), FormatError);
    ad::ParamStore<float> wrong;
    wrong.add("a.weight", Tensor({3, 2, 3, 1}));
    ad::ParamStore<float> one;
    one.add("a.weight", Tensor({3, 2, 3, 3}));
    CHECK_THROWS_AS(weights_assign(wrong, one), FormatError);
  }
}

TEST_CASE("run config") {
  SUBCASE("defaults") {
    const RunConfig c = RunConfig::parse("");
    CHECK(c.model.name == "mobile3d");
    CHECK(c.seed == 1);
    CHECK(c.adam.lr == 1e-3);
  }
  SUBCASE("preset then overrides, in any order") {
    const RunConfig c = RunConfig::parse("# toy\nseed = 7\nmodel = micro\n\nlr=0.002\nhourglass_width = 8\n");
    CHECK(c.model.name == "micro");
    CHECK(c.model.hourglass_width == 8);
    CHECK(c.seed == 7);
    CHECK(c.adam.lr == 0.002);
  }
  SUBCASE("round-trip through text") {
    RunConfig c = RunConfig::parse("model = mobile2d\nthreads = 3\nlr_halve_at = none\n");
    const RunConfig d = RunConfig::parse(c.to_text());
    CHECK(d.to_text() == c.to_text());
    CHECK(d.model.volume == VolumeKind::interlaced);
    CHECK(d.adam.halve_at.empty());
    CHECK(d.threads == 3);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(RunConfig::parse("colour = red\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("seed = 1\nseed = 2\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("seed\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("seed = x\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("lr = 1e-3x\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("model = tiny\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("stage_blocks = 1,2\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("threads = -1\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("hourglass_width = 0\n"), ConfigError);
  }
}
