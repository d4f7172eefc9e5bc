#pragma once

// Procedural scene oracle: parametric primitives with closed-form inside
// tests and exact ray intersections, a closed caption grammar, analytic
// silhouette (hull) masks, and camera/view generation.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "common.h"

namespace pi3d {

// Canonical scene bounds and rendering constants.
inline constexpr double kSceneMin = -0.5;
inline constexpr double kSceneMax = 0.5;
inline constexpr double kSigmaSolid = 40.0;   // density inside solids
inline constexpr double kCamDistance = 1.5;   // camera orbit radius
inline constexpr double kFovY = 0.8;          // radians
inline constexpr double kMaxElevation = 60.0 * 3.14159265358979323846 / 180.0;

enum class primitive_kind : uint8_t { sphere, box, cylinder, torus };

// Palette of the caption grammar.
enum class palette_color : uint8_t { red, green, blue, yellow, white };
inline constexpr int kNumColors = 5;
inline constexpr int kNumShapes = 4;

vec3f palette_rgb(palette_color c);
const char* color_word(palette_color c);
const char* shape_word(primitive_kind k);

struct primitive_spec {
  primitive_kind kind = primitive_kind::sphere;
  vec3 center;
  // size.x/.y meaning per kind:
  //   sphere:   x = radius
  //   box:      (x, y, z) = half extents
  //   cylinder: x = radius, y = half height (axis +y)
  //   torus:    x = major radius, y = minor radius (axis +y)
  vec3 size{0.1, 0.1, 0.1};
  palette_color color = palette_color::red;
};

struct scene_spec {
  std::vector<primitive_spec> primitives;  // 1..3, later entries win on overlap
  uint64_t seed = 0;
};

// Throws if a primitive pokes outside the canonical box or has a bad size.
void validate_scene(const scene_spec& s);

bool inside(const primitive_spec& prim, const vec3& p);

// Density and color at a point. Color of the last containing primitive wins.
struct point_sample {
  double density = 0;
  vec3f color{0, 0, 0};
};
point_sample query_scene(const scene_spec& s, const vec3& p);

// ---------------------------------------------------------------------------
// Cameras

struct camera_pose {
  vec3 position{0, 0, kCamDistance};
  vec3 look_at{0, 0, 0};
  vec3 up{0, 1, 0};
  enum class projection_kind : uint8_t { perspective, orthographic };
  projection_kind projection = projection_kind::perspective;
  double fov_y = kFovY;      // perspective only
  double half_extent = 0.5;  // orthographic half height
};

struct ray3 {
  vec3 origin;
  vec3 dir;  // unit length
};

// Ray through the center of pixel (row, col); fractional coordinates allowed.
ray3 camera_ray(const camera_pose& cam, int h, int w, double row, double col);

// Uniform on the orbit sphere with the elevation clamp; up is +y.
camera_pose sample_camera(rng_stream& rng, double radius = kCamDistance);

// Orbit camera from spherical angles (radians), looking at the origin.
camera_pose orbit_camera(double azimuth, double elevation,
                         double radius = kCamDistance,
                         bool orthographic = false);

// ---------------------------------------------------------------------------
// Images and views

template <typename T>
struct image2d {
  int h = 0, w = 0, ch = 1;
  std::vector<T> data;

  image2d() = default;
  image2d(int h_, int w_, int ch_)
      : h(h_), w(w_), ch(ch_), data(size_t(h_) * w_ * ch_, T(0)) {}

  T& at(int i, int j, int c = 0) { return data[(size_t(i) * w + j) * ch + c]; }
  const T& at(int i, int j, int c = 0) const {
    return data[(size_t(i) * w + j) * ch + c];
  }
  size_t size() const { return data.size(); }
};

struct view_record {
  camera_pose camera;
  image2d<float> rgb;      // h*w*3 in [0,1], black where mask = 0
  image2d<uint8_t> mask;   // h*w in {0,1}
  image2d<float> depth;    // h*w, valid where mask = 1, else 0
};

// First-hit ray tracing against the primitive list.
struct hit_record {
  bool hit = false;
  double t = 0;
  int prim = -1;
};
hit_record intersect_scene(const scene_spec& s, const ray3& r);

view_record render_oracle_view(const scene_spec& s, const camera_pose& cam,
                               int h, int w);

// ---------------------------------------------------------------------------
// Hull masks: orthographic silhouettes on the three planes at triplane
// resolution, dilated by d_hull texels (square structuring element).
// Plane axes follow the triplane convention: first coordinate -> columns,
// second -> rows; texel centers at integer coordinates.

struct hull_masks {
  image2d<uint8_t> o_xy, o_xz, o_yz;
};

hull_masks make_hull_masks(const scene_spec& s, int h, int w, int d_hull = 1);

// ---------------------------------------------------------------------------
// Caption grammar:
//   caption  := <color> <shape> | <color> <shape> "on" <color> <shape>
//   color    := red | green | blue | yellow | white
//   shape    := sphere | cube | cylinder | torus
// Two-primitive captions list the higher (by center y) primitive first.

std::string caption_for(const scene_spec& s);

// Token vocabulary for the diffusion model: 0 = PAD, 1 = NULL, then colors,
// shapes, "on". Captions are padded to kMaxCaptionTokens.
inline constexpr int kPadToken = 0;
inline constexpr int kNullToken = 1;
inline constexpr int kVocabSize = 2 + kNumColors + kNumShapes + 1;
inline constexpr int kMaxCaptionTokens = 8;

using caption_tokens = std::array<int, kMaxCaptionTokens>;
caption_tokens tokenize_caption(const std::string& caption);
caption_tokens null_caption();

// All 420 grammar sentences (20 single + 400 stacked), in a fixed order.
std::vector<std::string> enumerate_captions();

// Canonical scene for a grammar sentence (used by the retrieval oracle).
// Throws on strings outside the grammar.
scene_spec canonical_scene(const std::string& caption);

// Random scene for dataset generation; p_single is the probability of a
// one-primitive scene.
scene_spec sample_scene(rng_stream& rng, double p_single = 0.5);

}  // namespace pi3d
