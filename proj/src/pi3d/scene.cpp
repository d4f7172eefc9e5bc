#include "scene.h"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace pi3d {

namespace {
constexpr double kHitEps = 1e-9;
}

vec3f palette_rgb(palette_color c) {
  switch (c) {
    case palette_color::red: return {1, 0, 0};
    case palette_color::green: return {0, 1, 0};
    case palette_color::blue: return {0, 0, 1};
    case palette_color::yellow: return {1, 1, 0};
    case palette_color::white: return {1, 1, 1};
  }
  return {0, 0, 0};
}

const char* color_word(palette_color c) {
  switch (c) {
    case palette_color::red: return "red";
    case palette_color::green: return "green";
    case palette_color::blue: return "blue";
    case palette_color::yellow: return "yellow";
    case palette_color::white: return "white";
  }
  return "?";
}

const char* shape_word(primitive_kind k) {
  switch (k) {
    case primitive_kind::sphere: return "sphere";
    case primitive_kind::box: return "cube";
    case primitive_kind::cylinder: return "cylinder";
    case primitive_kind::torus: return "torus";
  }
  return "?";
}

// Axis-aligned extent of a primitive, for containment checks.
static vec3 primitive_extent(const primitive_spec& p) {
  switch (p.kind) {
    case primitive_kind::sphere: return {p.size.x, p.size.x, p.size.x};
    case primitive_kind::box: return p.size;
    case primitive_kind::cylinder: return {p.size.x, p.size.y, p.size.x};
    case primitive_kind::torus: {
      double rr = p.size.x + p.size.y;
      return {rr, p.size.y, rr};
    }
  }
  return {0, 0, 0};
}

void validate_scene(const scene_spec& s) {
  check(!s.primitives.empty() && s.primitives.size() <= 3,
        "scene must have 1..3 primitives");
  for (const auto& p : s.primitives) {
    check(p.size.x > 0 && p.size.y > 0 && p.size.z > 0,
          "primitive size components must be positive");
    if (p.kind == primitive_kind::torus)
      check(p.size.y < p.size.x, "torus minor radius must be below major");
    vec3 e = primitive_extent(p);
    for (int a = 0; a < 3; ++a) {
      check(p.center[a] - e[a] >= kSceneMin - 1e-12 &&
                p.center[a] + e[a] <= kSceneMax + 1e-12,
            "primitive exceeds the canonical bounding box");
    }
  }
}

bool inside(const primitive_spec& prim, const vec3& p) {
  vec3 q = p - prim.center;
  switch (prim.kind) {
    case primitive_kind::sphere:
      return dot(q, q) < prim.size.x * prim.size.x;
    case primitive_kind::box:
      return std::abs(q.x) < prim.size.x && std::abs(q.y) < prim.size.y &&
             std::abs(q.z) < prim.size.z;
    case primitive_kind::cylinder:
      return q.x * q.x + q.z * q.z < prim.size.x * prim.size.x &&
             std::abs(q.y) < prim.size.y;
    case primitive_kind::torus: {
      double rho = std::sqrt(q.x * q.x + q.z * q.z) - prim.size.x;
      return rho * rho + q.y * q.y < prim.size.y * prim.size.y;
    }
  }
  return false;
}

point_sample query_scene(const scene_spec& s, const vec3& p) {
  point_sample out;
  for (const auto& prim : s.primitives) {
    if (inside(prim, p)) {
      out.density = kSigmaSolid;
      out.color = palette_rgb(prim.color);  // later primitives overwrite
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ray intersections. All return the smallest boundary crossing t > kHitEps.

static std::optional<double> hit_sphere(const primitive_spec& prim,
                                        const ray3& r) {
  vec3 q = r.origin - prim.center;
  double b = dot(q, r.dir);
  double c = dot(q, q) - prim.size.x * prim.size.x;
  double disc = b * b - c;
  if (disc < 0) return std::nullopt;
  double sq = std::sqrt(disc);
  double t0 = -b - sq, t1 = -b + sq;
  if (t0 > kHitEps) return t0;
  if (t1 > kHitEps) return t1;
  return std::nullopt;
}

static std::optional<double> hit_box(const primitive_spec& prim,
                                     const ray3& r) {
  double tmin = -1e30, tmax = 1e30;
  for (int a = 0; a < 3; ++a) {
    double o = r.origin[a] - prim.center[a];
    double d = r.dir[a];
    double h = (a == 0) ? prim.size.x : (a == 1) ? prim.size.y : prim.size.z;
    if (std::abs(d) < 1e-15) {
      if (std::abs(o) > h) return std::nullopt;
      continue;
    }
    double t0 = (-h - o) / d, t1 = (h - o) / d;
    if (t0 > t1) std::swap(t0, t1);
    tmin = std::max(tmin, t0);
    tmax = std::min(tmax, t1);
    if (tmin > tmax) return std::nullopt;
  }
  if (tmin > kHitEps) return tmin;
  if (tmax > kHitEps) return tmax;
  return std::nullopt;
}

static std::optional<double> hit_cylinder(const primitive_spec& prim,
                                          const ray3& r) {
  vec3 q = r.origin - prim.center;
  double rc = prim.size.x, hh = prim.size.y;
  double best = 1e30;
  // lateral surface
  double a = r.dir.x * r.dir.x + r.dir.z * r.dir.z;
  double b = q.x * r.dir.x + q.z * r.dir.z;
  double c = q.x * q.x + q.z * q.z - rc * rc;
  if (a > 1e-15) {
    double disc = b * b - a * c;
    if (disc >= 0) {
      double sq = std::sqrt(disc);
      for (double t : {(-b - sq) / a, (-b + sq) / a}) {
        if (t > kHitEps && t < best && std::abs(q.y + t * r.dir.y) <= hh)
          best = t;
      }
    }
  }
  // caps
  if (std::abs(r.dir.y) > 1e-15) {
    for (double ycap : {-hh, hh}) {
      double t = (ycap - q.y) / r.dir.y;
      if (t > kHitEps && t < best) {
        double x = q.x + t * r.dir.x, z = q.z + t * r.dir.z;
        if (x * x + z * z <= rc * rc) best = t;
      }
    }
  }
  if (best < 1e30) return best;
  return std::nullopt;
}

// Quartic for the torus, solved by splitting into monotone intervals at the
// derivative's roots and bisecting sign changes. Robust over closed-form
// resolvents for grazing rays.
namespace {

struct quartic {
  double c4, c3, c2, c1, c0;
  double eval(double t) const {
    return (((c4 * t + c3) * t + c2) * t + c1) * t + c0;
  }
};

// Real roots of a*t^3 + b*t^2 + c*t + d, appended to out.
void cubic_roots(double a, double b, double c, double d,
                 std::vector<double>& out) {
  if (std::abs(a) < 1e-14) {  // quadratic fallback
    if (std::abs(b) < 1e-14) {
      if (std::abs(c) > 1e-14) out.push_back(-d / c);
      return;
    }
    double disc = c * c - 4 * b * d;
    if (disc < 0) return;
    double sq = std::sqrt(disc);
    out.push_back((-c - sq) / (2 * b));
    out.push_back((-c + sq) / (2 * b));
    return;
  }
  double p = b / a, q = c / a, r = d / a;
  double A = q - p * p / 3;
  double B = 2 * p * p * p / 27 - p * q / 3 + r;
  double disc = B * B / 4 + A * A * A / 27;
  if (disc > 0) {
    double sq = std::sqrt(disc);
    double u = std::cbrt(-B / 2 + sq), v = std::cbrt(-B / 2 - sq);
    out.push_back(u + v - p / 3);
  } else {
    double rho = std::sqrt(std::max(0.0, -A * A * A / 27));
    double theta = std::acos(clamp(-B / (2 * rho + 1e-300), -1.0, 1.0));
    double m = 2 * std::sqrt(std::max(0.0, -A / 3));
    for (int k = 0; k < 3; ++k)
      out.push_back(m * std::cos((theta + 2 * 3.14159265358979323846 * k) / 3) -
                    p / 3);
  }
}

// Smallest root of f in (lo, hi], or nullopt. f is monotone between
// consecutive critical points, so a sign change per interval pins one root.
std::optional<double> first_quartic_root(const quartic& f, double lo,
                                         double hi) {
  std::vector<double> knots;
  cubic_roots(4 * f.c4, 3 * f.c3, 2 * f.c2, f.c1, knots);
  knots.push_back(lo);
  knots.push_back(hi);
  std::sort(knots.begin(), knots.end());
  double prev = lo;
  double fprev = f.eval(prev);
  for (double k : knots) {
    if (k <= prev || k > hi) continue;
    double fk = f.eval(k);
    if ((fprev <= 0) != (fk <= 0)) {
      double a = prev, b = k;
      for (int it = 0; it < 200; ++it) {
        double m = 0.5 * (a + b);
        if ((f.eval(a) <= 0) != (f.eval(m) <= 0))
          b = m;
        else
          a = m;
        if (b - a < 1e-14) break;
      }
      return 0.5 * (a + b);
    }
    prev = k;
    fprev = fk;
  }
  return std::nullopt;
}

}  // namespace

static std::optional<double> hit_torus(const primitive_spec& prim,
                                       const ray3& r) {
  vec3 q = r.origin - prim.center;
  double R = prim.size.x, rr = prim.size.y;
  double B = 2 * dot(q, r.dir);
  double C = dot(q, q);
  double E = C + R * R - rr * rr;
  double a2 = r.dir.x * r.dir.x + r.dir.z * r.dir.z;
  double a1 = 2 * (q.x * r.dir.x + q.z * r.dir.z);
  double a0 = q.x * q.x + q.z * q.z;
  quartic f{1.0, 2 * B, B * B + 2 * E - 4 * R * R * a2,
            2 * B * E - 4 * R * R * a1, E * E - 4 * R * R * a0};
  // bracket by the bounding sphere to keep the search tight
  double bb = dot(q, r.dir);
  double cc = dot(q, q) - (R + rr) * (R + rr);
  double disc = bb * bb - cc;
  if (disc < 0) return std::nullopt;
  double sq = std::sqrt(disc);
  double lo = std::max(kHitEps, -bb - sq - 1e-6);
  double hi = -bb + sq + 1e-6;
  if (hi <= lo) return std::nullopt;
  return first_quartic_root(f, lo, hi);
}

static std::optional<double> hit_primitive(const primitive_spec& prim,
                                           const ray3& r) {
  switch (prim.kind) {
    case primitive_kind::sphere: return hit_sphere(prim, r);
    case primitive_kind::box: return hit_box(prim, r);
    case primitive_kind::cylinder: return hit_cylinder(prim, r);
    case primitive_kind::torus: return hit_torus(prim, r);
  }
  return std::nullopt;
}

hit_record intersect_scene(const scene_spec& s, const ray3& r) {
  hit_record out;
  double best = 1e30;
  for (int i = 0; i < int(s.primitives.size()); ++i) {
    auto t = hit_primitive(s.primitives[i], r);
    if (t && *t <= best + 1e-12) {  // ties go to the later primitive
      best = std::min(best, *t);
      out = {true, best, i};
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cameras

ray3 camera_ray(const camera_pose& cam, int h, int w, double row, double col) {
  vec3 forward = normalize(cam.look_at - cam.position);
  vec3 right = normalize(cross(forward, cam.up));
  vec3 upv = cross(right, forward);
  double u = (col + 0.5) / w * 2.0 - 1.0;
  double v = 1.0 - 2.0 * (row + 0.5) / h;
  double aspect = double(w) / double(h);
  if (cam.projection == camera_pose::projection_kind::perspective) {
    double tf = std::tan(cam.fov_y * 0.5);
    vec3 d = forward + right * (u * tf * aspect) + upv * (v * tf);
    return {cam.position, normalize(d)};
  }
  vec3 o = cam.position + right * (u * cam.half_extent * aspect) +
           upv * (v * cam.half_extent);
  return {o, forward};
}

camera_pose sample_camera(rng_stream& rng, double radius) {
  double az = rng.uniform(0, 2 * 3.14159265358979323846);
  double smax = std::sin(kMaxElevation);
  double sel = rng.uniform(-smax, smax);  // uniform area on the zone
  double el = std::asin(sel);
  return orbit_camera(az, el, radius, false);
}

camera_pose orbit_camera(double azimuth, double elevation, double radius,
                         bool orthographic) {
  camera_pose cam;
  double ce = std::cos(elevation);
  cam.position = {radius * ce * std::sin(azimuth), radius * std::sin(elevation),
                  radius * ce * std::cos(azimuth)};
  cam.look_at = {0, 0, 0};
  cam.up = {0, 1, 0};
  cam.projection = orthographic ? camera_pose::projection_kind::orthographic
                                : camera_pose::projection_kind::perspective;
  return cam;
}

view_record render_oracle_view(const scene_spec& s, const camera_pose& cam,
                               int h, int w) {
  view_record out;
  out.camera = cam;
  out.rgb = image2d<float>(h, w, 3);
  out.mask = image2d<uint8_t>(h, w, 1);
  out.depth = image2d<float>(h, w, 1);
#pragma omp parallel for schedule(static) if (run_parallel())
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      ray3 r = camera_ray(cam, h, w, i, j);
      hit_record hit = intersect_scene(s, r);
      if (hit.hit) {
        vec3f c = palette_rgb(s.primitives[hit.prim].color);
        out.rgb.at(i, j, 0) = c.r;
        out.rgb.at(i, j, 1) = c.g;
        out.rgb.at(i, j, 2) = c.b;
        out.mask.at(i, j) = 1;
        out.depth.at(i, j) = float(hit.t);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Hull masks. Each primitive projects to a closed 2D region per plane; a
// texel is covered when its cell rectangle intersects any region.

namespace {

struct rect2 {
  double x0, y0, x1, y1;  // x = column axis, y = row axis
};

struct region2 {
  enum class kind { disc, rect, annulus, stadium } k;
  double ax = 0, ay = 0;  // disc/annulus center, rect center, stadium end A
  double bx = 0, by = 0;  // rect half extents, stadium end B
  double r0 = 0, r1 = 0;  // disc: r0; annulus: inner r0, outer r1; stadium: r0
};

double dist2_point_rect(double px, double py, const rect2& c) {
  double dx = px - clamp(px, c.x0, c.x1);
  double dy = py - clamp(py, c.y0, c.y1);
  return dx * dx + dy * dy;
}

double far_dist2_point_rect(double px, double py, const rect2& c) {
  double dx = std::max(std::abs(px - c.x0), std::abs(px - c.x1));
  double dy = std::max(std::abs(py - c.y0), std::abs(py - c.y1));
  return dx * dx + dy * dy;
}

double dist2_point_seg(double px, double py, double ax, double ay, double bx,
                       double by) {
  double vx = bx - ax, vy = by - ay;
  double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? clamp(((px - ax) * vx + (py - ay) * vy) / len2, 0.0, 1.0)
                      : 0.0;
  double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
  return dx * dx + dy * dy;
}

// Distance between segment AB and a rectangle (0 when they intersect).
double dist2_seg_rect(double ax, double ay, double bx, double by,
                      const rect2& c) {
  if (dist2_point_rect(ax, ay, c) == 0 || dist2_point_rect(bx, by, c) == 0)
    return 0;
  double corners[4][2] = {
      {c.x0, c.y0}, {c.x1, c.y0}, {c.x1, c.y1}, {c.x0, c.y1}};
  double best = 1e30;
  for (int e = 0; e < 4; ++e) {
    double* p = corners[e];
    double* q = corners[(e + 1) % 4];
    // segment-segment distance via mutual point-to-segment checks plus a
    // proper crossing test
    double d1x = bx - ax, d1y = by - ay;
    double d2x = q[0] - p[0], d2y = q[1] - p[1];
    double denom = d1x * d2y - d1y * d2x;
    if (std::abs(denom) > 1e-15) {
      double s = ((p[0] - ax) * d2y - (p[1] - ay) * d2x) / denom;
      double t = ((p[0] - ax) * d1y - (p[1] - ay) * d1x) / denom;
      if (s >= 0 && s <= 1 && t >= 0 && t <= 1) return 0;
    }
    best = std::min(best, dist2_point_seg(ax, ay, p[0], p[1], q[0], q[1]));
    best = std::min(best, dist2_point_seg(bx, by, p[0], p[1], q[0], q[1]));
    best = std::min(best, dist2_point_seg(p[0], p[1], ax, ay, bx, by));
    best = std::min(best, dist2_point_seg(q[0], q[1], ax, ay, bx, by));
  }
  return best;
}

bool region_hits_cell(const region2& g, const rect2& c) {
  switch (g.k) {
    case region2::kind::disc:
      return dist2_point_rect(g.ax, g.ay, c) <= g.r0 * g.r0;
    case region2::kind::rect:
      return std::abs(g.ax - 0.5 * (c.x0 + c.x1)) <=
                 g.bx + 0.5 * (c.x1 - c.x0) &&
             std::abs(g.ay - 0.5 * (c.y0 + c.y1)) <=
                 g.by + 0.5 * (c.y1 - c.y0);
    case region2::kind::annulus:
      return dist2_point_rect(g.ax, g.ay, c) <= g.r1 * g.r1 &&
             far_dist2_point_rect(g.ax, g.ay, c) >= g.r0 * g.r0;
    case region2::kind::stadium:
      return dist2_seg_rect(g.ax, g.ay, g.bx, g.by, c) <= g.r0 * g.r0;
  }
  return false;
}

// Projection of a primitive to plane coordinates (cx = column axis value,
// cy = row axis value). plane: 0 = xy, 1 = xz, 2 = yz.
region2 project_primitive(const primitive_spec& p, int plane) {
  auto pick = [&](int axis) { return p.center[axis]; };
  int a0 = plane == 2 ? 1 : 0;            // column axis: x, x, y
  int a1 = plane == 0 ? 1 : 2;            // row axis:    y, z, z
  double cx = pick(a0), cy = pick(a1);
  region2 g;
  switch (p.kind) {
    case primitive_kind::sphere:
      g.k = region2::kind::disc;
      g.ax = cx; g.ay = cy; g.r0 = p.size.x;
      return g;
    case primitive_kind::box: {
      g.k = region2::kind::rect;
      auto half = [&](int axis) {
        return axis == 0 ? p.size.x : (axis == 1 ? p.size.y : p.size.z);
      };
      g.ax = cx; g.ay = cy; g.bx = half(a0); g.by = half(a1);
      return g;
    }
    case primitive_kind::cylinder: {
      if (plane == 1) {  // along the axis: a disc
        g.k = region2::kind::disc;
        g.ax = cx; g.ay = cy; g.r0 = p.size.x;
      } else {  // side view: a rectangle
        g.k = region2::kind::rect;
        g.ax = cx; g.ay = cy;
        g.bx = (a0 == 1) ? p.size.y : p.size.x;
        g.by = (a1 == 1) ? p.size.y : p.size.x;
      }
      return g;
    }
    case primitive_kind::torus: {
      double R = p.size.x, rr = p.size.y;
      if (plane == 1) {  // along the axis: an annulus
        g.k = region2::kind::annulus;
        g.ax = cx; g.ay = cy; g.r0 = R - rr; g.r1 = R + rr;
      } else {  // side view: a stadium across the non-axis coordinate
        g.k = region2::kind::stadium;
        g.r0 = rr;
        if (a0 == 1) {  // column axis is y (yz plane)
          g.ax = cx; g.ay = cy - R; g.bx = cx; g.by = cy + R;
        } else {
          g.ax = cx - R; g.ay = cy; g.bx = cx + R; g.by = cy;
        }
      }
      return g;
    }
  }
  return g;
}

void dilate_chebyshev(image2d<uint8_t>& m, int d) {
  for (int it = 0; it < d; ++it) {
    image2d<uint8_t> src = m;
    for (int i = 0; i < m.h; ++i)
      for (int j = 0; j < m.w; ++j) {
        if (src.at(i, j)) continue;
        uint8_t v = 0;
        for (int di = -1; di <= 1 && !v; ++di)
          for (int dj = -1; dj <= 1 && !v; ++dj) {
            int ii = i + di, jj = j + dj;
            if (ii >= 0 && ii < m.h && jj >= 0 && jj < m.w && src.at(ii, jj))
              v = 1;
          }
        m.at(i, j) = v;
      }
  }
}

image2d<uint8_t> silhouette(const scene_spec& s, int plane, int h, int w) {
  std::vector<region2> regions;
  regions.reserve(s.primitives.size());
  for (const auto& p : s.primitives) regions.push_back(project_primitive(p, plane));
  image2d<uint8_t> m(h, w, 1);
  const double step_c = 1.0 / (w - 1), step_r = 1.0 / (h - 1);
#pragma omp parallel for schedule(static) if (run_parallel())
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      double ccx = kSceneMin + j * step_c;
      double ccy = kSceneMin + i * step_r;
      rect2 cell{ccx - step_c / 2, ccy - step_r / 2, ccx + step_c / 2,
                 ccy + step_r / 2};
      for (const auto& g : regions) {
        if (region_hits_cell(g, cell)) {
          m.at(i, j) = 1;
          break;
        }
      }
    }
  }
  return m;
}

}  // namespace

hull_masks make_hull_masks(const scene_spec& s, int h, int w, int d_hull) {
  hull_masks out;
  out.o_xy = silhouette(s, 0, h, w);
  out.o_xz = silhouette(s, 1, h, w);
  out.o_yz = silhouette(s, 2, h, w);
  if (d_hull > 0) {
    dilate_chebyshev(out.o_xy, d_hull);
    dilate_chebyshev(out.o_xz, d_hull);
    dilate_chebyshev(out.o_yz, d_hull);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Captions

std::string caption_for(const scene_spec& s) {
  std::vector<int> order(s.primitives.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
  // higher primitives first; stable on ties so the list order decides
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return s.primitives[a].center.y > s.primitives[b].center.y;
  });
  if (order.size() > 2) order.resize(2);  // grammar covers at most two
  std::string out;
  for (size_t i = 0; i < order.size(); ++i) {
    const auto& p = s.primitives[order[i]];
    if (i) out += " on ";
    out += color_word(p.color);
    out += " ";
    out += shape_word(p.kind);
  }
  return out;
}

static int token_id(const std::string& word) {
  for (int c = 0; c < kNumColors; ++c)
    if (word == color_word(palette_color(c))) return 2 + c;
  for (int k = 0; k < kNumShapes; ++k)
    if (word == shape_word(primitive_kind(k))) return 2 + kNumColors + k;
  if (word == "on") return 2 + kNumColors + kNumShapes;
  throw std::runtime_error("caption word outside the grammar: " + word);
}

caption_tokens tokenize_caption(const std::string& caption) {
  caption_tokens out;
  out.fill(kPadToken);
  std::istringstream ss(caption);
  std::string word;
  int n = 0;
  while (ss >> word) {
    check(n < kMaxCaptionTokens, "caption too long");
    out[n++] = token_id(word);
  }
  check(n > 0, "empty caption");
  return out;
}

caption_tokens null_caption() {
  caption_tokens out;
  out.fill(kPadToken);
  out[0] = kNullToken;
  return out;
}

std::vector<std::string> enumerate_captions() {
  std::vector<std::string> singles;
  for (int c = 0; c < kNumColors; ++c)
    for (int k = 0; k < kNumShapes; ++k)
      singles.push_back(std::string(color_word(palette_color(c))) + " " +
                        shape_word(primitive_kind(k)));
  std::vector<std::string> out = singles;
  for (const auto& top : singles)
    for (const auto& bot : singles) out.push_back(top + " on " + bot);
  return out;
}

// Canonical primitive sizes, scaled for stacking.
static primitive_spec canonical_primitive(primitive_kind k, palette_color c,
                                          double cy, double scale) {
  primitive_spec p;
  p.kind = k;
  p.color = c;
  p.center = {0, cy, 0};
  switch (k) {
    case primitive_kind::sphere: p.size = {0.30 * scale, 0.1, 0.1}; break;
    case primitive_kind::box:
      p.size = {0.26 * scale, 0.26 * scale, 0.26 * scale};
      break;
    case primitive_kind::cylinder:
      p.size = {0.24 * scale, 0.30 * scale, 0.1};
      break;
    case primitive_kind::torus:
      p.size = {0.28 * scale, 0.11 * scale, 0.1};
      break;
  }
  return p;
}

static std::pair<palette_color, primitive_kind> parse_color_shape(
    const std::string& cw, const std::string& sw) {
  std::optional<palette_color> col;
  std::optional<primitive_kind> kind;
  for (int c = 0; c < kNumColors; ++c)
    if (cw == color_word(palette_color(c))) col = palette_color(c);
  for (int k = 0; k < kNumShapes; ++k)
    if (sw == shape_word(primitive_kind(k))) kind = primitive_kind(k);
  check(col.has_value() && kind.has_value(),
        "caption outside the grammar: " + cw + " " + sw);
  return {*col, *kind};
}

scene_spec canonical_scene(const std::string& caption) {
  std::istringstream ss(caption);
  std::vector<std::string> words;
  std::string word;
  while (ss >> word) words.push_back(word);
  scene_spec s;
  if (words.size() == 2) {
    auto [col, kind] = parse_color_shape(words[0], words[1]);
    s.primitives.push_back(canonical_primitive(kind, col, 0.0, 1.0));
  } else if (words.size() == 5 && words[2] == "on") {
    auto [ctop, ktop] = parse_color_shape(words[0], words[1]);
    auto [cbot, kbot] = parse_color_shape(words[3], words[4]);
    // bottom listed first, so the top primitive wins any overlap
    s.primitives.push_back(canonical_primitive(kbot, cbot, -0.24, 0.80));
    s.primitives.push_back(canonical_primitive(ktop, ctop, 0.22, 0.70));
  } else {
    throw std::runtime_error("caption outside the grammar: " + caption);
  }
  validate_scene(s);
  return s;
}

scene_spec sample_scene(rng_stream& rng, double p_single) {
  scene_spec s;
  s.seed = rng.next_u64();
  auto rand_kind = [&] { return primitive_kind(rng.uniform_int(0, 3)); };
  auto rand_color = [&] { return palette_color(rng.uniform_int(0, 4)); };
  auto jitter = [&](primitive_spec& p, double pos_amp) {
    double grow = rng.uniform(0.85, 1.1);
    p.size.x *= grow;
    p.size.y *= grow;
    p.size.z *= grow;
    p.center.x += rng.uniform(-pos_amp, pos_amp);
    p.center.z += rng.uniform(-pos_amp, pos_amp);
    p.center.y += rng.uniform(-pos_amp, pos_amp) * 0.5;
    // pull back inside the canonical box
    vec3 e = primitive_extent(p);
    for (int a = 0; a < 3; ++a) {
      double lo = kSceneMin + e[a], hi = kSceneMax - e[a];
      double v = clamp(p.center[a], lo, hi);
      if (a == 0) p.center.x = v;
      if (a == 1) p.center.y = v;
      if (a == 2) p.center.z = v;
    }
  };
  if (rng.next_u01() < p_single) {
    auto p = canonical_primitive(rand_kind(), rand_color(), 0.0, 1.0);
    jitter(p, 0.05);
    s.primitives.push_back(p);
  } else {
    auto bot = canonical_primitive(rand_kind(), rand_color(), -0.24, 0.80);
    auto top = canonical_primitive(rand_kind(), rand_color(), 0.22, 0.70);
    jitter(bot, 0.03);
    jitter(top, 0.03);
    if (top.center.y <= bot.center.y) top.center.y = bot.center.y + 0.3;
    vec3 e = primitive_extent(top);
    top.center.y = std::min(top.center.y, kSceneMax - e.y);
    s.primitives.push_back(bot);
    s.primitives.push_back(top);
  }
  validate_scene(s);
  return s;
}

}  // namespace pi3d
