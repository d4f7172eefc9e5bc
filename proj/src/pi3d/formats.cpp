#include "formats.h"

#include <unistd.h>
#include <zlib.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace pi3d {

using nlohmann::json;

// --------------------------------------------------------------------------
// Little-endian byte plumbing

namespace {

void put_u16(std::string& b, uint16_t v) {
  b.push_back(char(v & 0xff));
  b.push_back(char((v >> 8) & 0xff));
}

void put_u32(std::string& b, uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(char((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& b, float v) {
  put_u32(b, std::bit_cast<uint32_t>(v));
}

struct byte_reader {
  const uint8_t* p;
  size_t n, off = 0;

  byte_reader(const void* data, size_t len)
      : p(static_cast<const uint8_t*>(data)), n(len) {}

  void need(size_t k) const { check(off + k <= n, "truncated file"); }
  uint8_t u8() {
    need(1);
    return p[off++];
  }
  uint16_t u16() {
    need(2);
    uint16_t v = uint16_t(p[off]) | uint16_t(p[off + 1]) << 8;
    off += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(p[off + i]) << (8 * i);
    off += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string bytes(size_t k) {
    need(k);
    std::string s(reinterpret_cast<const char*>(p + off), k);
    off += k;
    return s;
  }
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(bool(in), "cannot open for reading: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  check(bool(out), "cannot open for writing: " + path);
  out.write(bytes.data(), std::streamsize(bytes.size()));
  check(bool(out), "short write: " + path);
}

}  // namespace

uint32_t buffer_crc32(const void* data, size_t n) {
  return uint32_t(crc32(0u, static_cast<const Bytef*>(data), uInt(n)));
}

uint32_t file_crc32(const std::string& path) {
  std::string b = read_file(path);
  return buffer_crc32(b.data(), b.size());
}

// --------------------------------------------------------------------------
// Triplane file

static constexpr char kTriplaneMagic[4] = {'T', 'P', 'L', 'N'};
static constexpr uint16_t kTriplaneVersion = 1;
static constexpr char kPlaneOrderTag[8] = {'x', 'y', 'x', 'z', 'y', 'z', 0, 0};

void save_triplane(const std::string& path, const triplane_grid<float>& tp) {
  std::string b;
  b.append(kTriplaneMagic, 4);
  put_u16(b, kTriplaneVersion);
  put_u32(b, uint32_t(tp.H));
  put_u32(b, uint32_t(tp.W));
  put_u32(b, uint32_t(tp.C));
  b.append(kPlaneOrderTag, 8);
  for (float v : tp.data) put_f32(b, v);
  write_file(path, b);
}

triplane_grid<float> load_triplane(const std::string& path) {
  std::string b = read_file(path);
  byte_reader r(b.data(), b.size());
  check(r.bytes(4) == std::string(kTriplaneMagic, 4),
        "not a triplane file: " + path);
  check(r.u16() == kTriplaneVersion, "unsupported triplane version");
  uint32_t h = r.u32(), w = r.u32(), c = r.u32();
  check(h >= 2 && w >= 2 && c >= 1 && h <= 4096 && w <= 4096 && c <= 64,
        "implausible triplane dimensions");
  check(r.bytes(8) == std::string(kPlaneOrderTag, 8),
        "unknown plane order tag");
  size_t count = size_t(3) * c * h * w;
  check(b.size() - r.off == count * 4, "triplane payload length mismatch");
  triplane_grid<float> tp{int(c), int(h), int(w)};
  for (size_t i = 0; i < count; ++i) tp.data[i] = r.f32();
  return tp;
}

// --------------------------------------------------------------------------
// Checkpoints

static constexpr char kCheckpointMagic[4] = {'P', 'C', 'K', 'P'};
static constexpr uint16_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path,
                     const std::vector<named_tensor>& tensors) {
  std::string b;
  b.append(kCheckpointMagic, 4);
  put_u16(b, kCheckpointVersion);
  put_u32(b, uint32_t(tensors.size()));
  for (const named_tensor& t : tensors) {
    check(t.name.size() < 65536, "tensor name too long");
    size_t count = 1;
    for (uint32_t d : t.shape) count *= d;
    check(count == t.data.size(), "tensor shape/data mismatch: " + t.name);
    put_u16(b, uint16_t(t.name.size()));
    b.append(t.name);
    check(t.shape.size() < 256, "tensor rank too large");
    b.push_back(char(t.shape.size()));
    for (uint32_t d : t.shape) put_u32(b, d);
    for (float v : t.data) put_f32(b, v);
  }
  write_file(path, b);
}

std::vector<named_tensor> load_checkpoint(const std::string& path) {
  std::string b = read_file(path);
  byte_reader r(b.data(), b.size());
  check(r.bytes(4) == std::string(kCheckpointMagic, 4),
        "not a checkpoint file: " + path);
  check(r.u16() == kCheckpointVersion, "unsupported checkpoint version");
  uint32_t n = r.u32();
  std::vector<named_tensor> out;
  out.reserve(n);
  for (uint32_t i = 0; i < n; ++i) {
    named_tensor t;
    t.name = r.bytes(r.u16());
    uint8_t rank = r.u8();
    size_t count = 1;
    for (int d = 0; d < rank; ++d) {
      t.shape.push_back(r.u32());
      count *= t.shape.back();
    }
    check(count <= (size_t(1) << 31), "implausible tensor size");
    t.data.resize(count);
    for (size_t k = 0; k < count; ++k) t.data[k] = r.f32();
    out.push_back(std::move(t));
  }
  check(r.off == b.size(), "trailing bytes in checkpoint");
  return out;
}

const named_tensor& find_tensor(const std::vector<named_tensor>& tensors,
                                const std::string& name) {
  for (const named_tensor& t : tensors)
    if (t.name == name) return t;
  throw std::runtime_error("missing tensor in checkpoint: " + name);
}

// --------------------------------------------------------------------------
// PNG. Writer emits non-interlaced images with filter 0 on every scanline;
// reader handles all five standard filters and verifies chunk CRCs.

namespace {

void put_u32be(std::string& b, uint32_t v) {
  for (int i = 3; i >= 0; --i) b.push_back(char((v >> (8 * i)) & 0xff));
}

void png_chunk(std::string& out, const char type[4], const std::string& data) {
  put_u32be(out, uint32_t(data.size()));
  size_t start = out.size();
  out.append(type, 4);
  out.append(data);
  uint32_t crc = buffer_crc32(out.data() + start, out.size() - start);
  put_u32be(out, crc);
}

const unsigned char kPngSig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};

std::string png_encode(int h, int w, int bit_depth, int color_type,
                       const std::string& scanlines) {
  std::string ihdr;
  put_u32be(ihdr, uint32_t(w));
  put_u32be(ihdr, uint32_t(h));
  ihdr.push_back(char(bit_depth));
  ihdr.push_back(char(color_type));
  ihdr.push_back(0);  // compression
  ihdr.push_back(0);  // filter method
  ihdr.push_back(0);  // no interlace

  uLongf bound = compressBound(uLong(scanlines.size()));
  std::string idat(bound, '\0');
  int rc = compress2(reinterpret_cast<Bytef*>(idat.data()), &bound,
                     reinterpret_cast<const Bytef*>(scanlines.data()),
                     uLong(scanlines.size()), 6);
  check(rc == Z_OK, "deflate failed");
  idat.resize(bound);

  std::string out(reinterpret_cast<const char*>(kPngSig), 8);
  png_chunk(out, "IHDR", ihdr);
  png_chunk(out, "IDAT", idat);
  png_chunk(out, "IEND", "");
  return out;
}

int paeth(int a, int b, int c) {
  int p = a + b - c;
  int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

// Decodes to unfiltered scanline bytes; checks type and dimensions.
std::string png_decode(const std::string& file, const std::string& path,
                       int expect_depth, int expect_color, int* h, int* w) {
  check(file.size() > 8 && std::memcmp(file.data(), kPngSig, 8) == 0,
        "not a PNG file: " + path);
  size_t off = 8;
  bool seen_ihdr = false, seen_iend = false;
  int bit_depth = 0, color_type = 0;
  std::string idat;
  while (off + 12 <= file.size() && !seen_iend) {
    byte_reader r(file.data() + off, file.size() - off);
    uint32_t len = __builtin_bswap32(r.u32());
    check(off + 12 + len <= file.size(), "truncated PNG chunk");
    std::string type = file.substr(off + 4, 4);
    uint32_t crc = buffer_crc32(file.data() + off + 4, size_t(len) + 4);
    byte_reader cr(file.data() + off + 8 + len, 4);
    check(crc == __builtin_bswap32(cr.u32()), "PNG chunk CRC mismatch");
    const char* data = file.data() + off + 8;
    if (type == "IHDR") {
      check(len == 13, "bad IHDR");
      byte_reader ir(data, len);
      *w = int(__builtin_bswap32(ir.u32()));
      *h = int(__builtin_bswap32(ir.u32()));
      bit_depth = ir.u8();
      color_type = ir.u8();
      check(ir.u8() == 0 && ir.u8() == 0 && ir.u8() == 0,
            "unsupported PNG encoding (compression/filter/interlace)");
      seen_ihdr = true;
    } else if (type == "IDAT") {
      idat.append(data, len);
    } else if (type == "IEND") {
      seen_iend = true;
    }  // ancillary chunks are skipped
    off += 12 + len;
  }
  check(seen_ihdr && seen_iend, "missing PNG chunks");
  check(bit_depth == expect_depth && color_type == expect_color,
        "unexpected PNG pixel format: " + path);
  check(*h > 0 && *w > 0 && *h <= 1 << 16 && *w <= 1 << 16,
        "implausible PNG dimensions");

  size_t bits_pp = size_t(expect_color == 2 ? 24 : expect_depth);
  size_t stride = (size_t(*w) * bits_pp + 7) / 8;
  size_t raw_size = size_t(*h) * (stride + 1);
  std::string raw(raw_size, '\0');
  uLongf dest_len = uLongf(raw_size);
  int rc = uncompress(reinterpret_cast<Bytef*>(raw.data()), &dest_len,
                      reinterpret_cast<const Bytef*>(idat.data()),
                      uLong(idat.size()));
  check(rc == Z_OK && dest_len == raw_size, "inflate failed: " + path);

  // undo per-scanline filters in place
  size_t bpp = std::max<size_t>(1, bits_pp / 8);
  std::string out(size_t(*h) * stride, '\0');
  for (int y = 0; y < *h; ++y) {
    uint8_t filter = uint8_t(raw[size_t(y) * (stride + 1)]);
    uint8_t* cur = reinterpret_cast<uint8_t*>(out.data()) + size_t(y) * stride;
    const uint8_t* src =
        reinterpret_cast<const uint8_t*>(raw.data()) + size_t(y) * (stride + 1) + 1;
    const uint8_t* prev =
        y > 0 ? reinterpret_cast<const uint8_t*>(out.data()) + size_t(y - 1) * stride
              : nullptr;
    check(filter <= 4, "unknown PNG filter");
    for (size_t x = 0; x < stride; ++x) {
      int a = x >= bpp ? cur[x - bpp] : 0;
      int b = prev ? prev[x] : 0;
      int c = (prev && x >= bpp) ? prev[x - bpp] : 0;
      int v = src[x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += paeth(a, b, c); break;
      }
      cur[x] = uint8_t(v & 0xff);
    }
  }
  return out;
}

}  // namespace

void write_png_rgb8(const std::string& path, const image2d<uint8_t>& img) {
  check(img.ch == 3, "write_png_rgb8 wants 3 channels");
  std::string scan;
  scan.reserve(size_t(img.h) * (size_t(img.w) * 3 + 1));
  for (int y = 0; y < img.h; ++y) {
    scan.push_back(0);  // filter: none
    scan.append(reinterpret_cast<const char*>(&img.at(y, 0, 0)),
                size_t(img.w) * 3);
  }
  write_file(path, png_encode(img.h, img.w, 8, 2, scan));
}

image2d<uint8_t> read_png_rgb8(const std::string& path) {
  int h = 0, w = 0;
  std::string bytes = png_decode(read_file(path), path, 8, 2, &h, &w);
  image2d<uint8_t> img(h, w, 3);
  std::memcpy(img.data.data(), bytes.data(), bytes.size());
  return img;
}

void write_png_gray1(const std::string& path, const image2d<uint8_t>& mask) {
  check(mask.ch == 1, "write_png_gray1 wants 1 channel");
  size_t stride = (size_t(mask.w) + 7) / 8;
  std::string scan;
  scan.reserve(size_t(mask.h) * (stride + 1));
  for (int y = 0; y < mask.h; ++y) {
    scan.push_back(0);
    std::string row(stride, '\0');
    for (int x = 0; x < mask.w; ++x) {
      check(mask.at(y, x) <= 1, "mask must be binary");
      if (mask.at(y, x)) row[size_t(x) / 8] |= char(0x80 >> (x % 8));
    }
    scan.append(row);
  }
  write_file(path, png_encode(mask.h, mask.w, 1, 0, scan));
}

image2d<uint8_t> read_png_gray1(const std::string& path) {
  int h = 0, w = 0;
  std::string bytes = png_decode(read_file(path), path, 1, 0, &h, &w);
  size_t stride = (size_t(w) + 7) / 8;
  image2d<uint8_t> mask(h, w, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      mask.at(y, x) =
          (uint8_t(bytes[size_t(y) * stride + size_t(x) / 8]) >> (7 - x % 8)) &
          1;
  return mask;
}

// --------------------------------------------------------------------------
// Raw depth

static constexpr char kDepthMagic[4] = {'D', 'P', 'T', 'H'};

void write_depth_raw(const std::string& path, const image2d<float>& depth) {
  check(depth.ch == 1, "depth image must have 1 channel");
  std::string b;
  b.append(kDepthMagic, 4);
  put_u32(b, uint32_t(depth.h));
  put_u32(b, uint32_t(depth.w));
  for (float v : depth.data) put_f32(b, v);
  write_file(path, b);
}

image2d<float> read_depth_raw(const std::string& path) {
  std::string b = read_file(path);
  byte_reader r(b.data(), b.size());
  check(r.bytes(4) == std::string(kDepthMagic, 4),
        "not a depth file: " + path);
  uint32_t h = r.u32(), w = r.u32();
  check(h > 0 && w > 0 && h <= 1 << 16 && w <= 1 << 16,
        "implausible depth dimensions");
  check(b.size() - r.off == size_t(h) * w * 4, "depth payload mismatch");
  image2d<float> img(int(h), int(w), 1);
  for (float& v : img.data) v = r.f32();
  return img;
}

image2d<uint8_t> quantize_rgb8(const image2d<float>& rgb) {
  image2d<uint8_t> out(rgb.h, rgb.w, rgb.ch);
  for (size_t i = 0; i < rgb.data.size(); ++i)
    out.data[i] = uint8_t(std::lround(clamp(rgb.data[i], 0.0f, 1.0f) * 255));
  return out;
}

image2d<float> dequantize_rgb8(const image2d<uint8_t>& rgb) {
  image2d<float> out(rgb.h, rgb.w, rgb.ch);
  for (size_t i = 0; i < rgb.data.size(); ++i)
    out.data[i] = float(rgb.data[i]) / 255.0f;
  return out;
}

// --------------------------------------------------------------------------
// Config files

config_map config_map::from_file(const std::string& path) {
  std::ifstream in(path);
  check(bool(in), "cannot open config: " + path);
  config_map out;
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    check(eq != std::string::npos,
          "config line " + std::to_string(lineno) + " has no '='");
    std::string key = trim(t.substr(0, eq));
    check(!key.empty(), "config line " + std::to_string(lineno) + ": empty key");
    out.kv[key] = trim(t.substr(eq + 1));
  }
  return out;
}

std::string config_map::str(const std::string& key,
                            const std::string& fallback) const {
  auto it = kv.find(key);
  return it == kv.end() ? fallback : it->second;
}

int64_t config_map::geti(const std::string& key, int64_t fallback) const {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  size_t pos = 0;
  int64_t v = std::stoll(it->second, &pos);
  check(pos == it->second.size(), "bad integer for config key " + key);
  return v;
}

uint64_t config_map::getu(const std::string& key, uint64_t fallback) const {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  size_t pos = 0;
  uint64_t v = std::stoull(it->second, &pos);
  check(pos == it->second.size(), "bad integer for config key " + key);
  return v;
}

double config_map::getd(const std::string& key, double fallback) const {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  size_t pos = 0;
  double v = std::stod(it->second, &pos);
  check(pos == it->second.size(), "bad number for config key " + key);
  return v;
}

bool config_map::getb(const std::string& key, bool fallback) const {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  const std::string& s = it->second;
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw std::runtime_error("bad boolean for config key " + key);
}

// --------------------------------------------------------------------------
// Dataset container

namespace {

json vec3_json(const vec3& v) { return json::array({v.x, v.y, v.z}); }

vec3 vec3_from(const json& j) {
  check(j.is_array() && j.size() == 3, "bad vec3 in manifest");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

json camera_json(const camera_pose& c) {
  return json{{"position", vec3_json(c.position)},
              {"look_at", vec3_json(c.look_at)},
              {"up", vec3_json(c.up)},
              {"projection",
               c.projection == camera_pose::projection_kind::perspective
                   ? "perspective"
                   : "orthographic"},
              {"fov_y", c.fov_y},
              {"half_extent", c.half_extent}};
}

camera_pose camera_from(const json& j) {
  camera_pose c;
  c.position = vec3_from(j.at("position"));
  c.look_at = vec3_from(j.at("look_at"));
  c.up = vec3_from(j.at("up"));
  std::string proj = j.at("projection").get<std::string>();
  check(proj == "perspective" || proj == "orthographic",
        "bad projection in manifest");
  c.projection = proj == "perspective"
                     ? camera_pose::projection_kind::perspective
                     : camera_pose::projection_kind::orthographic;
  c.fov_y = j.at("fov_y").get<double>();
  c.half_extent = j.at("half_extent").get<double>();
  return c;
}

primitive_kind kind_from(const std::string& word) {
  for (int k = 0; k < kNumShapes; ++k)
    if (word == shape_word(primitive_kind(k))) return primitive_kind(k);
  throw std::runtime_error("unknown primitive kind: " + word);
}

palette_color color_from(const std::string& word) {
  for (int c = 0; c < kNumColors; ++c)
    if (word == color_word(palette_color(c))) return palette_color(c);
  throw std::runtime_error("unknown color: " + word);
}

std::string view_stem(size_t scene, size_t view) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "views/s%04zu_v%02zu", scene, view);
  return buf;
}

}  // namespace

void save_dataset(const std::string& dir,
                  const std::vector<object_views>& objects, int tp_res,
                  uint64_t seed) {
  check(!objects.empty(), "empty dataset");
  check(objects[0].hulls.o_xy.h == tp_res,
        "tp_res does not match the objects' hull resolution");
  std::filesystem::create_directories(dir + "/views");
  json scenes = json::array();
  for (size_t s = 0; s < objects.size(); ++s) {
    const object_views& o = objects[s];
    json prims = json::array();
    for (const primitive_spec& p : o.scene.primitives)
      prims.push_back(json{{"kind", shape_word(p.kind)},
                           {"color", color_word(p.color)},
                           {"center", vec3_json(p.center)},
                           {"size", vec3_json(p.size)}});
    json views = json::array();
    size_t vi = 0;
    auto emit = [&](const view_record& v, bool heldout) {
      std::string stem = view_stem(s, vi++);
      std::string rgb_path = dir + "/" + stem + "_rgb.png";
      std::string mask_path = dir + "/" + stem + "_mask.png";
      std::string depth_path = dir + "/" + stem + "_depth.raw";
      write_png_rgb8(rgb_path, quantize_rgb8(v.rgb));
      write_png_gray1(mask_path, v.mask);
      write_depth_raw(depth_path, v.depth);
      views.push_back(json{{"rgb", stem + "_rgb.png"},
                           {"rgb_crc", file_crc32(rgb_path)},
                           {"mask", stem + "_mask.png"},
                           {"mask_crc", file_crc32(mask_path)},
                           {"depth", stem + "_depth.raw"},
                           {"depth_crc", file_crc32(depth_path)},
                           {"heldout", heldout},
                           {"camera", camera_json(v.camera)}});
    };
    for (const view_record& v : o.train) emit(v, false);
    for (const view_record& v : o.heldout) emit(v, true);
    scenes.push_back(json{{"caption", o.caption},
                          {"seed", o.scene.seed},
                          {"primitives", prims},
                          {"views", views}});
  }
  json manifest{{"format", "pi3d-dataset"}, {"version", 1},
                {"seed", seed},            {"img_h", objects[0].img_h},
                {"img_w", objects[0].img_w}, {"tp_res", tp_res},
                {"scenes", scenes}};
  write_file(dir + "/manifest.json", manifest.dump(2) + "\n");
}

std::vector<object_views> load_dataset(const std::string& dir) {
  json manifest = json::parse(read_file(dir + "/manifest.json"));
  check(manifest.at("format").get<std::string>() == "pi3d-dataset",
        "not a dataset manifest");
  check(manifest.at("version").get<int>() == 1, "unsupported dataset version");
  int img_h = manifest.at("img_h").get<int>();
  int img_w = manifest.at("img_w").get<int>();
  int tp_res = manifest.at("tp_res").get<int>();
  std::vector<object_views> out;
  for (const json& js : manifest.at("scenes")) {
    object_views o;
    o.img_h = img_h;
    o.img_w = img_w;
    o.scene.seed = js.at("seed").get<uint64_t>();
    for (const json& jp : js.at("primitives")) {
      primitive_spec p;
      p.kind = kind_from(jp.at("kind").get<std::string>());
      p.color = color_from(jp.at("color").get<std::string>());
      p.center = vec3_from(jp.at("center"));
      p.size = vec3_from(jp.at("size"));
      o.scene.primitives.push_back(p);
    }
    validate_scene(o.scene);
    o.caption = js.at("caption").get<std::string>();
    check(o.caption == caption_for(o.scene),
          "manifest caption does not match the scene");
    o.hulls = make_hull_masks(o.scene, tp_res, tp_res, 1);
    for (const json& jv : js.at("views")) {
      view_record v;
      v.camera = camera_from(jv.at("camera"));
      std::string rgb_path = dir + "/" + jv.at("rgb").get<std::string>();
      std::string mask_path = dir + "/" + jv.at("mask").get<std::string>();
      std::string depth_path = dir + "/" + jv.at("depth").get<std::string>();
      check(file_crc32(rgb_path) == jv.at("rgb_crc").get<uint32_t>(),
            "checksum mismatch: " + rgb_path);
      check(file_crc32(mask_path) == jv.at("mask_crc").get<uint32_t>(),
            "checksum mismatch: " + mask_path);
      check(file_crc32(depth_path) == jv.at("depth_crc").get<uint32_t>(),
            "checksum mismatch: " + depth_path);
      v.rgb = dequantize_rgb8(read_png_rgb8(rgb_path));
      v.mask = read_png_gray1(mask_path);
      v.depth = read_depth_raw(depth_path);
      check(v.rgb.h == img_h && v.rgb.w == img_w && v.mask.h == img_h &&
                v.depth.h == img_h,
            "view resolution mismatch");
      (jv.at("heldout").get<bool>() ? o.heldout : o.train)
          .push_back(std::move(v));
    }
    out.push_back(std::move(o));
  }
  check(!out.empty(), "dataset has no scenes");
  return out;
}

// --------------------------------------------------------------------------
// Directory lock

dir_lock::dir_lock(const std::string& dir) {
  std::filesystem::create_directories(dir);
  path = dir + "/.lock";
  std::FILE* f = std::fopen(path.c_str(), "wx");
  check(f != nullptr,
        "output directory is locked (remove stale " + path + " if no other "
        "run is active)");
  std::fprintf(f, "%ld\n", long(::getpid()));
  std::fclose(f);
}

dir_lock::~dir_lock() { std::remove(path.c_str()); }

}  // namespace pi3d
