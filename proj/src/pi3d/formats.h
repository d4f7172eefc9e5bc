#pragma once

// On-disk formats: triplane files, checkpoint containers, PNG images (written
// and read without an image library, deflate via zlib), raw float depth maps,
// flat key-value config files, the dataset container, and a directory lock.

#include <map>
#include <string>
#include <vector>

#include "dataset.h"
#include "triplane.h"

namespace pi3d {

// --------------------------------------------------------------------------
// Triplane file: "TPLN" magic, version, dims, plane-order tag, then
// 3*C*H*W little-endian f32 in (xy, xz, yz) plane order, row-major
// (channel, row, col) within a plane. Loader rejects any mismatch.

void save_triplane(const std::string& path, const triplane_grid<float>& tp);
triplane_grid<float> load_triplane(const std::string& path);

// --------------------------------------------------------------------------
// Checkpoint container: named tensors with shape headers, little-endian f32.

struct named_tensor {
  std::string name;
  std::vector<uint32_t> shape;
  std::vector<float> data;
};

void save_checkpoint(const std::string& path,
                     const std::vector<named_tensor>& tensors);
std::vector<named_tensor> load_checkpoint(const std::string& path);
const named_tensor& find_tensor(const std::vector<named_tensor>& tensors,
                                const std::string& name);

// --------------------------------------------------------------------------
// Images. RGB goes to 8-bit truecolor PNG, masks to 1-bit grayscale PNG,
// depth to a raw little-endian f32 container ("DPTH" magic + dims).

void write_png_rgb8(const std::string& path, const image2d<uint8_t>& img);
image2d<uint8_t> read_png_rgb8(const std::string& path);
void write_png_gray1(const std::string& path, const image2d<uint8_t>& mask);
image2d<uint8_t> read_png_gray1(const std::string& path);
void write_depth_raw(const std::string& path, const image2d<float>& depth);
image2d<float> read_depth_raw(const std::string& path);

image2d<uint8_t> quantize_rgb8(const image2d<float>& rgb);
image2d<float> dequantize_rgb8(const image2d<uint8_t>& rgb);

uint32_t buffer_crc32(const void* data, size_t n);
uint32_t file_crc32(const std::string& path);

// --------------------------------------------------------------------------
// Flat key-value config text: `key = value` lines, '#' comments. Lookup
// precedence (CLI > file > defaults) is handled by the CLI layer.

struct config_map {
  std::map<std::string, std::string> kv;

  static config_map from_file(const std::string& path);

  bool has(const std::string& key) const { return kv.count(key) != 0; }
  void set(const std::string& key, const std::string& value) {
    kv[key] = value;
  }
  std::string str(const std::string& key, const std::string& fallback) const;
  int64_t geti(const std::string& key, int64_t fallback) const;
  uint64_t getu(const std::string& key, uint64_t fallback) const;
  double getd(const std::string& key, double fallback) const;
  bool getb(const std::string& key, bool fallback) const;
};

// --------------------------------------------------------------------------
// Dataset container: manifest.json plus per-view binaries under views/.
// Hull masks are analytic and rebuilt from the scene specs on load; every
// binary's CRC32 is recorded in the manifest and verified by the loader.

void save_dataset(const std::string& dir,
                  const std::vector<object_views>& objects, int tp_res,
                  uint64_t seed);
std::vector<object_views> load_dataset(const std::string& dir);

// --------------------------------------------------------------------------
// Exclusive lock on an output directory (single writer).

struct dir_lock {
  std::string path;

  explicit dir_lock(const std::string& dir);
  ~dir_lock();
  dir_lock(const dir_lock&) = delete;
  dir_lock& operator=(const dir_lock&) = delete;
};

}  // namespace pi3d
