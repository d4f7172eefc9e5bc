#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>
#include <zlib.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "pi3d/formats.h"

using namespace pi3d;
namespace fs = std::filesystem;

namespace {

std::string tmp_dir() {
  static std::string dir = [] {
    std::string d = "fmt_test_tmp";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string tmp(const std::string& name) { return tmp_dir() + "/" + name; }

void corrupt_byte(const std::string& path, size_t offset) {
  std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
  f.seekg(std::streamoff(offset));
  char c = 0;
  f.read(&c, 1);
  c = char(c ^ 0x40);
  f.seekp(std::streamoff(offset));
  f.write(&c, 1);
}

}  // namespace

TEST_CASE("triplane file roundtrip is bitwise lossless") {
  triplane_grid<float> tp = random_triplane<float>(10, 12, 5, 0.7f);
  tp.data[0] = 0.0f;
  tp.data[1] = -0.0f;
  tp.data[2] = 1e-38f;
  save_triplane(tmp("a.tpln"), tp);
  triplane_grid<float> back = load_triplane(tmp("a.tpln"));
  CHECK(back.C == tp.C);
  CHECK(back.H == 10);
  CHECK(back.W == 12);
  REQUIRE(back.data.size() == tp.data.size());
  CHECK(std::memcmp(back.data.data(), tp.data.data(),
                    tp.data.size() * 4) == 0);

  corrupt_byte(tmp("a.tpln"), 0);  // magic
  CHECK_THROWS(load_triplane(tmp("a.tpln")));

  save_triplane(tmp("b.tpln"), tp);
  std::ofstream trunc(tmp("b.tpln"), std::ios::binary | std::ios::app);
  trunc << "xx";  // payload length mismatch
  trunc.close();
  CHECK_THROWS(load_triplane(tmp("b.tpln")));
}

TEST_CASE("checkpoint roundtrip is bitwise lossless") {
  std::vector<named_tensor> ts;
  ts.push_back({"decoder.w1", {18, 32}, std::vector<float>(18 * 32)});
  ts.push_back({"scalar", {}, {3.25f}});
  ts.push_back({"emb", {6, 4, 2}, std::vector<float>(48)});
  rng_stream rng(7);
  for (auto& t : ts)
    for (auto& v : t.data) v = float(rng.next_normal());
  save_checkpoint(tmp("c.ckpt"), ts);
  auto back = load_checkpoint(tmp("c.ckpt"));
  REQUIRE(back.size() == ts.size());
  for (size_t i = 0; i < ts.size(); ++i) {
    CHECK(back[i].name == ts[i].name);
    CHECK(back[i].shape == ts[i].shape);
    REQUIRE(back[i].data.size() == ts[i].data.size());
    CHECK(std::memcmp(back[i].data.data(), ts[i].data.data(),
                      ts[i].data.size() * 4) == 0);
  }
  CHECK(find_tensor(back, "emb").shape.size() == 3);
  CHECK_THROWS(find_tensor(back, "nope"));

  std::ofstream trail(tmp("c.ckpt"), std::ios::binary | std::ios::app);
  trail << "z";
  trail.close();
  CHECK_THROWS(load_checkpoint(tmp("c.ckpt")));
}

TEST_CASE("png rgb8 roundtrip") {
  image2d<uint8_t> img(13, 7, 3);
  rng_stream rng(9);
  for (auto& v : img.data) v = uint8_t(rng.uniform_int(0, 255));
  write_png_rgb8(tmp("i.png"), img);
  image2d<uint8_t> back = read_png_rgb8(tmp("i.png"));
  CHECK(back.h == 13);
  CHECK(back.w == 7);
  CHECK(back.data == img.data);

  corrupt_byte(tmp("i.png"), 40);  // inside IDAT
  CHECK_THROWS(read_png_rgb8(tmp("i.png")));
}

TEST_CASE("png gray1 roundtrip") {
  image2d<uint8_t> mask(9, 21, 1);  // width not divisible by 8
  rng_stream rng(11);
  for (auto& v : mask.data) v = uint8_t(rng.uniform_int(0, 1));
  write_png_gray1(tmp("m.png"), mask);
  image2d<uint8_t> back = read_png_gray1(tmp("m.png"));
  CHECK(back.h == 9);
  CHECK(back.w == 21);
  CHECK(back.data == mask.data);

  image2d<uint8_t> bad(2, 2, 1);
  bad.at(0, 0) = 2;
  CHECK_THROWS(write_png_gray1(tmp("bad.png"), bad));
}

TEST_CASE("png reader handles all five scanline filters") {
  // craft a 4-row RGB PNG using one filter per row
  const int w = 5, h = 5;
  image2d<uint8_t> img(h, w, 3);
  rng_stream rng(13);
  for (auto& v : img.data) v = uint8_t(rng.uniform_int(0, 255));

  auto paeth = [](int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
  };
  const size_t stride = size_t(w) * 3, bpp = 3;
  std::string scan;
  for (int y = 0; y < h; ++y) {
    int filter = y % 5;
    scan.push_back(char(filter));
    for (size_t x = 0; x < stride; ++x) {
      int cur = img.data[size_t(y) * stride + x];
      int a = x >= bpp ? img.data[size_t(y) * stride + x - bpp] : 0;
      int b = y > 0 ? img.data[size_t(y - 1) * stride + x] : 0;
      int c = (y > 0 && x >= bpp) ? img.data[size_t(y - 1) * stride + x - bpp]
                                  : 0;
      int enc = cur;
      if (filter == 1) enc = cur - a;
      if (filter == 2) enc = cur - b;
      if (filter == 3) enc = cur - (a + b) / 2;
      if (filter == 4) enc = cur - paeth(a, b, c);
      scan.push_back(char(enc & 0xff));
    }
  }

  auto be32 = [](std::string& s, uint32_t v) {
    for (int i = 3; i >= 0; --i) s.push_back(char((v >> (8 * i)) & 0xff));
  };
  auto chunk = [&](std::string& s, const char* type, const std::string& d) {
    be32(s, uint32_t(d.size()));
    std::string td = std::string(type, 4) + d;
    s += td;
    be32(s, buffer_crc32(td.data(), td.size()));
  };
  std::string ihdr;
  be32(ihdr, w);
  be32(ihdr, h);
  ihdr += std::string("\x08\x02\x00\x00\x00", 5);
  uLongf bound = compressBound(uLong(scan.size()));
  std::string idat(bound, '\0');
  REQUIRE(compress2(reinterpret_cast<Bytef*>(idat.data()), &bound,
                    reinterpret_cast<const Bytef*>(scan.data()),
                    uLong(scan.size()), 6) == Z_OK);
  idat.resize(bound);
  std::string png("\x89PNG\r\n\x1a\n", 8);
  chunk(png, "IHDR", ihdr);
  chunk(png, "IDAT", idat);
  chunk(png, "IEND", "");
  std::ofstream out(tmp("filters.png"), std::ios::binary);
  out << png;
  out.close();

  image2d<uint8_t> back = read_png_rgb8(tmp("filters.png"));
  CHECK(back.data == img.data);
}

TEST_CASE("raw depth roundtrip") {
  image2d<float> d(6, 5, 1);
  rng_stream rng(15);
  for (auto& v : d.data) v = float(rng.uniform(0.0, 3.0));
  d.at(0, 0) = 1.25f;
  write_depth_raw(tmp("d.raw"), d);
  image2d<float> back = read_depth_raw(tmp("d.raw"));
  CHECK(back.h == 6);
  CHECK(back.w == 5);
  CHECK(std::memcmp(back.data.data(), d.data.data(), d.data.size() * 4) == 0);
}

TEST_CASE("rgb quantization is idempotent after one pass") {
  image2d<float> rgb(1, 256, 3);
  for (int j = 0; j < 256; ++j)
    for (int c = 0; c < 3; ++c) rgb.at(0, j, c) = float(j) / 255.0f;
  auto q = quantize_rgb8(rgb);
  for (int j = 0; j < 256; ++j) CHECK(q.at(0, j, 0) == uint8_t(j));
  auto deq = dequantize_rgb8(q);
  auto q2 = quantize_rgb8(deq);
  CHECK(q2.data == q.data);
  for (float v : deq.data) CHECK((v >= 0.0f && v <= 1.0f));
  // clamping out-of-range inputs
  image2d<float> wild(1, 2, 3);
  wild.at(0, 0, 0) = -0.5f;
  wild.at(0, 1, 0) = 1.5f;
  auto qq = quantize_rgb8(wild);
  CHECK(qq.at(0, 0, 0) == 0);
  CHECK(qq.at(0, 1, 0) == 255);
}

TEST_CASE("config parsing") {
  {
    std::ofstream f(tmp("run.cfg"));
    f << "# a comment\n"
      << "steps = 2000\n"
      << "  caption = red sphere on green cube  \n"
      << "lr=2e-2\n"
      << "flag = true\n"
      << "\n";
  }
  config_map cfg = config_map::from_file(tmp("run.cfg"));
  CHECK(cfg.geti("steps", 0) == 2000);
  CHECK(cfg.str("caption", "") == "red sphere on green cube");
  CHECK(cfg.getd("lr", 0) == doctest::Approx(0.02));
  CHECK(cfg.getb("flag", false));
  CHECK(cfg.geti("missing", 7) == 7);
  CHECK(!cfg.has("missing"));

  {
    std::ofstream f(tmp("bad.cfg"));
    f << "steps = ten\n";
  }
  config_map bad = config_map::from_file(tmp("bad.cfg"));
  CHECK_THROWS(bad.geti("steps", 0));
  {
    std::ofstream f(tmp("noeq.cfg"));
    f << "just words\n";
  }
  CHECK_THROWS(config_map::from_file(tmp("noeq.cfg")));
  CHECK_THROWS(config_map::from_file(tmp("absent.cfg")));
}

TEST_CASE("dataset container roundtrip") {
  std::vector<object_views> objs;
  for (int i = 0; i < 2; ++i) {
    rng_stream rng(uint64_t(40 + i));
    scene_spec s = sample_scene(rng);
    objs.push_back(make_object_views(s, 3, 1, 16, 16, 8, uint64_t(40 + i)));
  }
  save_dataset(tmp("ds"), objs, 8, 123);
  auto back = load_dataset(tmp("ds"));
  REQUIRE(back.size() == 2);
  for (size_t i = 0; i < 2; ++i) {
    const object_views& a = objs[i];
    const object_views& b = back[i];
    CHECK(b.caption == a.caption);
    CHECK(b.img_h == 16);
    REQUIRE(b.scene.primitives.size() == a.scene.primitives.size());
    for (size_t p = 0; p < a.scene.primitives.size(); ++p) {
      CHECK(b.scene.primitives[p].kind == a.scene.primitives[p].kind);
      CHECK(b.scene.primitives[p].color == a.scene.primitives[p].color);
      CHECK(b.scene.primitives[p].center.x == a.scene.primitives[p].center.x);
      CHECK(b.scene.primitives[p].center.y == a.scene.primitives[p].center.y);
      CHECK(b.scene.primitives[p].center.z == a.scene.primitives[p].center.z);
      CHECK(b.scene.primitives[p].size.x == a.scene.primitives[p].size.x);
    }
    REQUIRE(b.train.size() == 3);
    REQUIRE(b.heldout.size() == 1);
    for (size_t v = 0; v < 3; ++v) {
      CHECK(b.train[v].camera.position.x == a.train[v].camera.position.x);
      CHECK(b.train[v].camera.position.y == a.train[v].camera.position.y);
      CHECK(b.train[v].camera.fov_y == a.train[v].camera.fov_y);
      CHECK(b.train[v].mask.data == a.train[v].mask.data);
      CHECK(std::memcmp(b.train[v].depth.data.data(),
                        a.train[v].depth.data.data(),
                        a.train[v].depth.data.size() * 4) == 0);
      // rgb passed through 8-bit quantization exactly once
      auto expect = dequantize_rgb8(quantize_rgb8(a.train[v].rgb));
      CHECK(b.train[v].rgb.data == expect.data);
    }
    CHECK(b.hulls.o_xy.data == a.hulls.o_xy.data);
    CHECK(b.hulls.o_yz.data == a.hulls.o_yz.data);
  }

  corrupt_byte(tmp("ds/views/s0000_v01_mask.png"), 45);
  CHECK_THROWS(load_dataset(tmp("ds")));
}

TEST_CASE("directory lock is exclusive and released") {
  std::string dir = tmp("locked");
  {
    dir_lock lk(dir);
    CHECK(fs::exists(dir + "/.lock"));
    CHECK_THROWS(dir_lock(dir));
  }
  CHECK(!fs::exists(dir + "/.lock"));
  dir_lock again(dir);  // re-acquire after release
}
