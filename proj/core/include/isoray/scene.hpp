#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "isoray/camera.hpp"
#include "isoray/image.hpp"
#include "isoray/mesh.hpp"
#include "isoray/rng.hpp"

namespace isoray {

// --- signed distance primitives (Lipschitz <= 1) -----------------------------

namespace sdf {
double sphere(const Vec3& p, double r);
double box(const Vec3& p, const Vec3& half_extent);
double torus_x(const Vec3& p, double major, double minor);  // hole along x
double torus_z(const Vec3& p, double major, double minor);  // hole along z
inline double op_union(double a, double b) { return a < b ? a : b; }
inline double op_subtract(double a, double b) { return a > -b ? a : -b; }
}  // namespace sdf

namespace texture {
Vec3 solid(const Vec3& c);
Vec3 checker(const Vec3& p, double scale, const Vec3& c0, const Vec3& c1);
Vec3 gradient(const Vec3& p, const Vec3& c0, const Vec3& c1);  // along z in [-1,1]
}  // namespace texture

// Analytic ground-truth scene: a signed distance bound (zero level = the
// surface), a view-independent albedo, and a background color. The surface
// is contained in the unit-radius region of interest.
struct AnalyticScene {
  std::string name;
  std::function<double(const Vec3&)> sdf;
  std::function<Vec3(const Vec3&)> albedo;
  Vec3 background{0.08, 0.08, 0.10};
  // exact area-weighted surface sampler for evaluation
  std::function<Vec3(CounterRng&)> sample_surface;
};

AnalyticScene make_sphere_scene();  // textured sphere, r = 0.5
AnalyticScene make_torus_scene();   // major 0.35, minor 0.12, checker
AnalyticScene scene_by_name(const std::string& name);
std::vector<std::string> scene_names();

// --- multi-view dataset -------------------------------------------------------

struct ViewData {
  Camera camera;
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;    // h*w*3
  std::vector<std::uint8_t> mask;   // h*w, 0 or 255
  std::vector<float> depth;         // h*w Euclidean ray distance, +inf if empty
  bool has_depth = false;

  Vec3 rgb_at(std::size_t px, std::size_t py) const;
  bool mask_at(std::size_t px, std::size_t py) const;
};

struct MultiViewDataset {
  std::vector<ViewData> views;
};

// Sphere-traces the analytic SDF to its zero level (tolerance 1e-6); depth
// is the Euclidean ray distance, mask true exactly where depth is finite.
ViewData render_ground_truth(const AnalyticScene& scene, const Camera& cam);

// Cameras on the northern hemisphere (z >= 0) looking at the origin, with
// distance uniform in [dmin, dmax].
std::vector<Camera> generate_cameras(std::size_t count, double dmin, double dmax,
                                     std::size_t resolution, CounterRng& rng);

MultiViewDataset generate_dataset(const AnalyticScene& scene, std::size_t views,
                                  std::size_t resolution, std::uint64_t seed,
                                  double dmin = 1.6, double dmax = 2.4);

// --- visual hull --------------------------------------------------------------

struct VisualHull {
  std::size_t resolution = 0;
  GridBounds bounds;
  std::vector<std::uint8_t> grid;  // res^3 cell-center occupancies, x fastest
  TriangleMesh mesh;               // extracted at level 0.5
};

// A cell is occupied iff its center projects in front of and inside every
// view's mask. The hull is a superset of the true shape up to grid
// resolution.
VisualHull visual_hull(const MultiViewDataset& data, std::size_t resolution,
                       const GridBounds& bounds = {});

// First depth on the ray whose point lies inside all object masks.
std::optional<double> hull_entry_depth(const MultiViewDataset& data,
                                       const Ray& ray, double step);

// --- dataset directory --------------------------------------------------------
// Layout: cameras.txt, view_####.png, mask_####.png, depth_####.bin

void save_dataset(const std::string& dir, const MultiViewDataset& data);
MultiViewDataset load_dataset(const std::string& dir);

}  // namespace isoray
