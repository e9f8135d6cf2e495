#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "isoray/field.hpp"
#include "isoray/geometry.hpp"
#include "isoray/rng.hpp"

namespace isoray {

struct TriangleMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<std::uint32_t, 3>> faces;
  std::vector<Vec3> colors;  // optional; empty or one RGB in [0,1] per vertex

  bool empty() const { return faces.empty(); }
};

struct GridBounds {
  Vec3 lo{-1, -1, -1};
  Vec3 hi{1, 1, 1};
};

// Marching cubes over an R^3 lattice of occupancy values with per-edge
// linear interpolation at level tau. `occ_batch` evaluates a (M,3) batch of
// points. An empty isosurface yields an empty mesh.
TriangleMesh extract_iso_mesh(
    const std::function<std::vector<double>(const Tensor&)>& occ_batch,
    std::size_t resolution, double tau, const GridBounds& bounds);

// Same, from a precomputed value lattice (nx*ny*nz, x fastest).
TriangleMesh extract_iso_mesh_grid(const std::vector<double>& values,
                                   std::size_t nx, std::size_t ny, std::size_t nz,
                                   const Vec3& origin, double spacing, double tau);

// Field isosurface with vertex colors from the texture head.
TriangleMesh extract_mesh(const MlpField& field, std::size_t resolution,
                          double tau, const GridBounds& bounds,
                          bool with_colors = true);

// Every undirected edge borders exactly two faces (closed 2-manifold test
// used by the watertightness checks).
bool is_watertight(const TriangleMesh& mesh);

struct EvalReport {
  double chamfer_l1 = 0;   // (accuracy + completeness) / 2
  double accuracy = 0;     // mean over A of nearest-neighbor distance to B
  double completeness = 0; // mean over B of nearest-neighbor distance to A
};

// Symmetric mean nearest-neighbor Euclidean distance (kd-tree accelerated).
EvalReport chamfer_l1(const std::vector<Vec3>& a, const std::vector<Vec3>& b);

// Area-weighted uniform samples on the mesh surface.
std::vector<Vec3> sample_surface(const TriangleMesh& mesh, std::size_t count,
                                 CounterRng& rng);

double surface_area(const TriangleMesh& mesh);

// --- export / import ---------------------------------------------------------
// OBJ: `v x y z` + `f` lines; vertex colors, when present, as a trailing
// comment block of `# vc <r> <g> <b>` lines (one per vertex, in order).
// PLY: binary little-endian, with per-vertex uchar red/green/blue.

void save_obj(const std::string& path, const TriangleMesh& mesh);
void save_ply(const std::string& path, const TriangleMesh& mesh);
TriangleMesh load_obj(const std::string& path);
TriangleMesh load_ply(const std::string& path);
TriangleMesh load_mesh(const std::string& path);  // dispatch on extension

}  // namespace isoray
