#pragma once

// Iso-surface extraction from the decoded density field and ASCII PLY export.
// Marching cubes over the lattice; the 256-case loop table is generated once
// from a per-face marching-squares rule (solid corners separated on ambiguous
// faces), which makes adjacent cells agree on their shared face and the
// output mesh crack-free by construction. Loops longer than a triangle are
// starred from a per-cell centroid so interior edges never coincide across
// cells. Vertices on shared lattice edges are welded through an edge-key map,
// so the result is indexed.

#include <array>
#include <cstdio>
#include <string>
#include <unordered_map>
#include <vector>

#include "triplane.h"

namespace pi3d {

// Density level whose single-step opacity over the reference step length
// (box diagonal / 128) is one half.
inline double mesh_iso_level() {
  const double diag = (kSceneMax - kSceneMin) * std::sqrt(3.0);
  return std::log(2.0) / (diag / 128.0);
}

template <scalar T>
struct tri_mesh {
  std::vector<std::array<T, 3>> vertices;
  std::vector<std::array<uint8_t, 3>> colors;  // empty or one per vertex
  std::vector<std::array<int, 3>> faces;

  bool empty() const { return faces.empty(); }
};

namespace detail {

// Cube corners are indexed by bits (x, y, z); edges pair corners that differ
// in one bit.
struct mc_tables {
  std::array<std::array<int, 2>, 12> edge_corner;
  std::array<std::vector<std::vector<int8_t>>, 256> loops;
};

inline mc_tables build_mc_tables() {
  mc_tables t;
  // x-edges, then y-edges, then z-edges
  int e = 0;
  int lookup[8][8];
  for (auto& row : lookup)
    for (int& v : row) v = -1;
  auto add_edge = [&](int a, int b) {
    t.edge_corner[size_t(e)] = {a, b};
    lookup[a][b] = lookup[b][a] = e;
    ++e;
  };
  for (int axis = 0; axis < 3; ++axis)
    for (int c = 0; c < 8; ++c)
      if (!(c & (1 << axis))) add_edge(c, c | (1 << axis));

  // faces as corner cycles, counterclockwise seen from outside the cube
  constexpr int faces[6][4] = {{0, 4, 6, 2}, {1, 3, 7, 5}, {0, 1, 5, 4},
                               {3, 2, 6, 7}, {1, 0, 2, 3}, {4, 5, 7, 6}};

  for (int mask = 0; mask < 256; ++mask) {
    // directed segments between crossing cube edges: succ[exit] = enter
    int succ[12];
    for (int& v : succ) v = -1;
    for (const auto& f : faces) {
      const bool s[4] = {bool(mask >> f[0] & 1), bool(mask >> f[1] & 1),
                         bool(mask >> f[2] & 1), bool(mask >> f[3] & 1)};
      int exits[2], enters[2], nx = 0, ne = 0;
      int exit_corner[2];
      for (int k = 0; k < 4; ++k) {
        const int kn = (k + 1) & 3;
        if (s[k] == s[kn]) continue;
        const int edge = lookup[f[k]][f[kn]];
        if (s[k]) {
          exit_corner[nx] = k;
          exits[nx++] = edge;
        } else {
          enters[ne++] = edge;
        }
      }
      if (nx == 0) continue;
      if (nx == 1) {
        succ[exits[0]] = enters[0];
      } else {
        // ambiguous face: cut off each solid corner separately, pairing the
        // exit at corner k with the enter on the preceding cycle edge
        for (int i = 0; i < 2; ++i) {
          const int k = exit_corner[i];
          const int prev_edge = lookup[f[(k + 3) & 3]][f[k]];
          succ[exits[i]] = prev_edge;
        }
      }
    }
    // chain segments into closed loops of crossing edges
    bool used[12] = {};
    for (int start = 0; start < 12; ++start) {
      if (succ[start] < 0 || used[start]) continue;
      std::vector<int8_t> loop;
      for (int cur = start; loop.empty() || cur != start; cur = succ[cur]) {
        loop.push_back(int8_t(cur));
        used[cur] = true;
      }
      t.loops[size_t(mask)].push_back(std::move(loop));
    }
  }
  return t;
}

inline const mc_tables& mc() {
  static const mc_tables t = build_mc_tables();
  return t;
}

}  // namespace detail

// Marching cubes over a density grid given as field(ix, iy, iz) on a
// grid_res^3 lattice spanning the scene box. Solid means density >= iso. The
// lattice is padded with one empty virtual layer so that solid regions
// touching the box wall are capped there and every output mesh is closed.
template <scalar T, typename Field>
tri_mesh<T> extract_isosurface(int grid_res, T iso, Field&& field) {
  check(grid_res >= 2, "iso-surface extraction needs at least a 2^3 grid");
  const auto& tab = detail::mc();
  tri_mesh<T> mesh;
  const int n = grid_res;
  const int m = n + 2;  // padded side; index i covers lattice point i - 1
  const double step = (kSceneMax - kSceneMin) / double(n - 1);
  auto coord = [&](int i) { return T(kSceneMin + step * i); };

  const T pad = iso - T(1e9);
  std::vector<T> grid(size_t(m) * m * m, pad);
  for (int iz = 0; iz < n; ++iz)
    for (int iy = 0; iy < n; ++iy)
      for (int ix = 0; ix < n; ++ix) {
        const T v = field(ix, iy, iz);
        check(std::isfinite(double(v)), "non-finite density in the grid");
        grid[(size_t(iz + 1) * m + iy + 1) * m + ix + 1] = v;
      }

  // welded vertex per lattice edge keyed by axis and padded lower corner
  std::unordered_map<int64_t, int> edge_vertex;
  auto vertex_on = [&](int axis, int ix, int iy, int iz, T d0, T d1) {
    const int64_t key = ((int64_t(axis) * m + iz + 1) * m + iy + 1) * m +
                        ix + 1;
    auto it = edge_vertex.find(key);
    if (it != edge_vertex.end()) return it->second;
    const T denom = d1 - d0;
    T u = std::abs(double(denom)) < 1e-30 ? T(0.5) : (iso - d0) / denom;
    u = clamp(u, T(0), T(1));
    std::array<T, 3> p = {coord(ix), coord(iy), coord(iz)};
    p[size_t(axis)] += T(step) * u;
    const int idx = int(mesh.vertices.size());
    mesh.vertices.push_back(p);
    edge_vertex.emplace(key, idx);
    return idx;
  };

  for (int iz = -1; iz < n; ++iz)
    for (int iy = -1; iy < n; ++iy)
      for (int ix = -1; ix < n; ++ix) {
        T d[8];
        int mask = 0;
        for (int c = 0; c < 8; ++c) {
          const int cx = ix + (c & 1) + 1, cy = iy + (c >> 1 & 1) + 1,
                    cz = iz + (c >> 2 & 1) + 1;
          d[c] = grid[(size_t(cz) * m + cy) * m + cx];
          mask |= int(d[c] >= iso) << c;
        }
        if (mask == 0 || mask == 255) continue;
        for (const auto& loop : tab.loops[size_t(mask)]) {
          const int k = int(loop.size());
          std::vector<int> v(static_cast<size_t>(k));
          for (int j = 0; j < k; ++j) {
            const auto [a, b] = tab.edge_corner[size_t(loop[size_t(j)])];
            const int axis = (a ^ b) == 1 ? 0 : ((a ^ b) == 2 ? 1 : 2);
            v[size_t(j)] = vertex_on(axis, ix + (a & 1), iy + (a >> 1 & 1),
                                     iz + (a >> 2 & 1), d[a], d[b]);
          }
          if (k == 3) {
            if (v[0] != v[1] && v[1] != v[2] && v[0] != v[2])
              mesh.faces.push_back({v[0], v[2], v[1]});
            continue;
          }
          // Larger loops are starred from their centroid: a chord between two
          // loop vertices can lie inside a cube face, and the matching cell
          // would then emit the same chord again. The centroid vertex is
          // private to this cell, so no interior edge is ever shared.
          std::array<T, 3> c = {0, 0, 0};
          for (int j = 0; j < k; ++j)
            for (int a = 0; a < 3; ++a)
              c[size_t(a)] += mesh.vertices[size_t(v[size_t(j)])][size_t(a)];
          for (int a = 0; a < 3; ++a) c[size_t(a)] /= T(k);
          const int mid = int(mesh.vertices.size());
          mesh.vertices.push_back(c);
          for (int j = 0; j < k; ++j)
            mesh.faces.push_back({mid, v[size_t((j + 1) % k)], v[size_t(j)]});
        }
      }
  return mesh;
}

// Decoded density/color field over the triplane, evaluated one z-slab per
// decoder batch. Returns the indexed mesh with per-vertex colors.
template <scalar T>
tri_mesh<T> export_mesh(const triplane_grid<T>& tp,
                        const decoder_params<T>& dec, int grid_res) {
  check(grid_res >= 2, "mesh grid resolution too small");
  const int n = grid_res;
  const double step = (kSceneMax - kSceneMin) / double(n - 1);
  auto coord = [&](int i) { return T(kSceneMin + step * i); };

  // precompute all densities slab by slab
  std::vector<T> sigma(size_t(n) * n * n);
  decoder_batch<T> batch;
  for (int iz = 0; iz < n; ++iz) {
    batch.resize(n * n);
#pragma omp parallel for schedule(static) if (run_parallel())
    for (int64_t q = 0; q < int64_t(n) * n; ++q) {
      const int iy = int(q / n), ix = int(q % n);
      sample_features(tp, coord(ix), coord(iy), coord(iz),
                      batch.x.data() + size_t(q) * kFeatDim);
    }
    decoder_forward(dec, batch);
    std::copy(batch.sigma.begin(), batch.sigma.end(),
              sigma.begin() + size_t(iz) * n * n);
  }

  const T iso = T(mesh_iso_level());
  auto mesh = extract_isosurface<T>(n, iso, [&](int ix, int iy, int iz) {
    return sigma[(size_t(iz) * n + iy) * n + ix];
  });

  // vertex colors decoded at the welded positions
  mesh.colors.resize(mesh.vertices.size());
#pragma omp parallel for schedule(static) if (run_parallel())
  for (int64_t i = 0; i < int64_t(mesh.vertices.size()); ++i) {
    T feat[kFeatDim], rgb[3], s;
    const auto& p = mesh.vertices[size_t(i)];
    sample_features(tp, p[0], p[1], p[2], feat);
    decode_point(dec, feat, rgb, s);
    for (int c = 0; c < 3; ++c)
      mesh.colors[size_t(i)][size_t(c)] =
          uint8_t(clamp(double(rgb[c]), 0.0, 1.0) * 255.0 + 0.5);
  }
  return mesh;
}

// ASCII PLY with optional per-vertex uchar colors.
template <scalar T>
void write_ply(const std::string& path, const tri_mesh<T>& mesh) {
  check(mesh.colors.empty() || mesh.colors.size() == mesh.vertices.size(),
        "color count must match vertices");
  FILE* f = std::fopen(path.c_str(), "wb");
  check(f != nullptr, "cannot open " + path + " for writing");
  const bool colored = !mesh.colors.empty();
  std::fprintf(f, "ply\nformat ascii 1.0\n");
  std::fprintf(f, "element vertex %zu\n", mesh.vertices.size());
  std::fprintf(f, "property float x\nproperty float y\nproperty float z\n");
  if (colored)
    std::fprintf(f,
                 "property uchar red\nproperty uchar green\n"
                 "property uchar blue\n");
  std::fprintf(f, "element face %zu\n", mesh.faces.size());
  std::fprintf(f, "property list uchar int vertex_indices\nend_header\n");
  for (size_t i = 0; i < mesh.vertices.size(); ++i) {
    const auto& v = mesh.vertices[i];
    std::fprintf(f, "%g %g %g", double(v[0]), double(v[1]), double(v[2]));
    if (colored) {
      const auto& c = mesh.colors[i];
      std::fprintf(f, " %d %d %d", int(c[0]), int(c[1]), int(c[2]));
    }
    std::fputc('\n', f);
  }
  for (const auto& face : mesh.faces)
    std::fprintf(f, "3 %d %d %d\n", face[0], face[1], face[2]);
  const bool ok = std::fclose(f) == 0;
  check(ok, "failed to finish writing " + path);
}

}  // namespace pi3d
