#include "isoray/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>

namespace isoray {

namespace sdf {

double sphere(const Vec3& p, double r) { return norm(p) - r; }

double box(const Vec3& p, const Vec3& half_extent) {
  const Vec3 q{std::abs(p.x) - half_extent.x, std::abs(p.y) - half_extent.y,
               std::abs(p.z) - half_extent.z};
  const Vec3 qpos{std::max(q.x, 0.0), std::max(q.y, 0.0), std::max(q.z, 0.0)};
  return norm(qpos) + std::min(std::max({q.x, q.y, q.z}), 0.0);
}

double torus_z(const Vec3& p, double major, double minor) {
  const double ring = std::sqrt(p.x * p.x + p.y * p.y) - major;
  return std::sqrt(ring * ring + p.z * p.z) - minor;
}

double torus_x(const Vec3& p, double major, double minor) {
  return torus_z(Vec3{p.y, p.z, p.x}, major, minor);
}

}  // namespace sdf

namespace texture {

Vec3 solid(const Vec3& c) { return c; }

Vec3 checker(const Vec3& p, double scale, const Vec3& c0, const Vec3& c1) {
  const long long ix = static_cast<long long>(std::floor(p.x * scale));
  const long long iy = static_cast<long long>(std::floor(p.y * scale));
  const long long iz = static_cast<long long>(std::floor(p.z * scale));
  return ((ix + iy + iz) & 1) ? c1 : c0;
}

Vec3 gradient(const Vec3& p, const Vec3& c0, const Vec3& c1) {
  const double t = std::clamp(0.5 * (p.z + 1.0), 0.0, 1.0);
  return c0 + t * (c1 - c0);
}

}  // namespace texture

AnalyticScene make_sphere_scene() {
  AnalyticScene s;
  s.name = "sphere";
  s.sdf = [](const Vec3& p) { return sdf::sphere(p, 0.5); };
  s.albedo = [](const Vec3& p) {
    return texture::checker(p, 5.0, Vec3{0.92, 0.30, 0.20}, Vec3{0.95, 0.85, 0.25});
  };
  s.sample_surface = [](CounterRng& rng) {
    Vec3 v{rng.normal(), rng.normal(), rng.normal()};
    while (norm(v) < 1e-12) v = Vec3{rng.normal(), rng.normal(), rng.normal()};
    return normalized(v) * 0.5;
  };
  return s;
}

AnalyticScene make_torus_scene() {
  constexpr double kMajor = 0.35, kMinor = 0.12;
  AnalyticScene s;
  s.name = "torus";
  s.sdf = [](const Vec3& p) { return sdf::torus_x(p, kMajor, kMinor); };
  s.albedo = [](const Vec3& p) {
    return texture::checker(p, 8.0, Vec3{0.20, 0.45, 0.90}, Vec3{0.95, 0.92, 0.88});
  };
  s.sample_surface = [](CounterRng& rng) {
    // area weight along the tube is (major + minor*cos v); reject accordingly
    for (;;) {
      const double u = rng.uniform(0.0, 6.283185307179586);
      const double v = rng.uniform(0.0, 6.283185307179586);
      const double w = (kMajor + kMinor * std::cos(v)) / (kMajor + kMinor);
      if (rng.next_double() <= w) {
        // torus around the x axis: ring in the y-z plane
        const double ring = kMajor + kMinor * std::cos(v);
        return Vec3{kMinor * std::sin(v), ring * std::cos(u), ring * std::sin(u)};
      }
    }
  };
  return s;
}

std::vector<std::string> scene_names() { return {"sphere", "torus"}; }

AnalyticScene scene_by_name(const std::string& name) {
  if (name == "sphere") return make_sphere_scene();
  if (name == "torus") return make_torus_scene();
  throw std::invalid_argument("unknown scene '" + name +
                              "' (available: sphere, torus)");
}

// --- ground-truth rendering ----------------------------------------------------

Vec3 ViewData::rgb_at(std::size_t px, std::size_t py) const {
  const std::size_t i = (py * width + px) * 3;
  return Vec3{rgb[i] / 255.0, rgb[i + 1] / 255.0, rgb[i + 2] / 255.0};
}

bool ViewData::mask_at(std::size_t px, std::size_t py) const {
  return mask[py * width + px] >= 128;
}

namespace {

constexpr double kTraceTol = 1e-6;
constexpr double kTraceMax = 6.0;
constexpr int kTraceSteps = 2048;

std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0l, 255l));
}

}  // namespace

ViewData render_ground_truth(const AnalyticScene& scene, const Camera& cam) {
  ViewData view;
  view.camera = cam;
  view.width = cam.width;
  view.height = cam.height;
  view.has_depth = true;
  const std::size_t npix = cam.width * cam.height;
  view.rgb.assign(npix * 3, 0);
  view.mask.assign(npix, 0);
  view.depth.assign(npix, std::numeric_limits<float>::infinity());

  const Vec3 origin = cam.center();
#if defined(_OPENMP)
#pragma omp parallel for schedule(static)
#endif
  for (long long yy = 0; yy < static_cast<long long>(cam.height); ++yy) {
    const std::size_t y = static_cast<std::size_t>(yy);
    for (std::size_t x = 0; x < cam.width; ++x) {
      const Ray ray = pixel_to_ray(cam, static_cast<double>(x) + 0.5,
                                   static_cast<double>(y) + 0.5, 1e-3, kTraceMax);
      // sphere tracing: the SDF bounds the distance to the surface
      double t = 0.0;
      bool hit = false;
      for (int s = 0; s < kTraceSteps; ++s) {
        const double d = scene.sdf(origin + t * ray.dir);
        if (d < kTraceTol) {
          hit = true;
          break;
        }
        t += d;
        if (t > kTraceMax) break;
      }
      const std::size_t i = y * cam.width + x;
      if (hit) {
        const Vec3 p = origin + t * ray.dir;
        const Vec3 c = scene.albedo(p);
        view.rgb[3 * i + 0] = quantize(c.x);
        view.rgb[3 * i + 1] = quantize(c.y);
        view.rgb[3 * i + 2] = quantize(c.z);
        view.mask[i] = 255;
        view.depth[i] = static_cast<float>(t);
      } else {
        view.rgb[3 * i + 0] = quantize(scene.background.x);
        view.rgb[3 * i + 1] = quantize(scene.background.y);
        view.rgb[3 * i + 2] = quantize(scene.background.z);
      }
    }
  }
  return view;
}

std::vector<Camera> generate_cameras(std::size_t count, double dmin, double dmax,
                                     std::size_t resolution, CounterRng& rng) {
  if (count < 1) throw std::invalid_argument("generate_cameras: count must be >= 1");
  if (!(dmin > 0.0 && dmin <= dmax))
    throw std::invalid_argument("generate_cameras: need 0 < dmin <= dmax");
  std::vector<Camera> cams;
  cams.reserve(count);
  const double focal = 1.2 * static_cast<double>(resolution);
  while (cams.size() < count) {
    Vec3 v{rng.normal(), rng.normal(), rng.normal()};
    if (norm(v) < 1e-9) continue;
    v = normalized(v);
    v.z = std::abs(v.z);  // northern hemisphere
    const double dist = rng.uniform(dmin, dmax);
    cams.push_back(make_lookat_camera(v * dist, Vec3{0, 0, 0}, focal, resolution,
                                      resolution));
  }
  return cams;
}

MultiViewDataset generate_dataset(const AnalyticScene& scene, std::size_t views,
                                  std::size_t resolution, std::uint64_t seed,
                                  double dmin, double dmax) {
  CounterRng rng(seed, 0x63616d73ull /* cams */);
  const std::vector<Camera> cams = generate_cameras(views, dmin, dmax, resolution, rng);
  MultiViewDataset data;
  data.views.reserve(views);
  for (const Camera& c : cams) data.views.push_back(render_ground_truth(scene, c));
  return data;
}

// --- visual hull -----------------------------------------------------------------

VisualHull visual_hull(const MultiViewDataset& data, std::size_t resolution,
                       const GridBounds& bounds) {
  if (data.views.empty())
    throw std::invalid_argument("visual_hull: need at least one view");
  if (resolution < 2)
    throw std::invalid_argument("visual_hull: resolution must be >= 2");
  VisualHull hull;
  hull.resolution = resolution;
  hull.bounds = bounds;
  hull.grid.assign(resolution * resolution * resolution, 0);
  const double cell = (bounds.hi.x - bounds.lo.x) / static_cast<double>(resolution);

#if defined(_OPENMP)
#pragma omp parallel for schedule(static)
#endif
  for (long long zz = 0; zz < static_cast<long long>(resolution); ++zz) {
    const std::size_t z = static_cast<std::size_t>(zz);
    for (std::size_t y = 0; y < resolution; ++y)
      for (std::size_t x = 0; x < resolution; ++x) {
        const Vec3 p{bounds.lo.x + (static_cast<double>(x) + 0.5) * cell,
                     bounds.lo.y + (static_cast<double>(y) + 0.5) * cell,
                     bounds.lo.z + (static_cast<double>(z) + 0.5) * cell};
        bool inside = true;
        for (const ViewData& view : data.views) {
          const Projection pr = project(view.camera, p);
          if (!pr.in_front) {
            inside = false;
            break;
          }
          const long px = std::lround(std::floor(pr.ux));
          const long py = std::lround(std::floor(pr.uy));
          if (px < 0 || py < 0 || px >= static_cast<long>(view.width) ||
              py >= static_cast<long>(view.height) ||
              !view.mask_at(static_cast<std::size_t>(px),
                            static_cast<std::size_t>(py))) {
            inside = false;
            break;
          }
        }
        if (inside) hull.grid[(z * resolution + y) * resolution + x] = 1;
      }
  }

  std::vector<double> values(hull.grid.begin(), hull.grid.end());
  const Vec3 origin{bounds.lo.x + 0.5 * cell, bounds.lo.y + 0.5 * cell,
                    bounds.lo.z + 0.5 * cell};
  hull.mesh = extract_iso_mesh_grid(values, resolution, resolution, resolution,
                                    origin, cell, 0.5);
  return hull;
}

std::optional<double> hull_entry_depth(const MultiViewDataset& data,
                                       const Ray& ray, double step) {
  for (double d = ray.s0; d <= ray.far; d += step) {
    const Vec3 p = ray.origin + d * ray.dir;
    bool inside = true;
    for (const ViewData& view : data.views) {
      const Projection pr = project(view.camera, p);
      if (!pr.in_front) {
        inside = false;
        break;
      }
      const long px = std::lround(std::floor(pr.ux));
      const long py = std::lround(std::floor(pr.uy));
      if (px < 0 || py < 0 || px >= static_cast<long>(view.width) ||
          py >= static_cast<long>(view.height) ||
          !view.mask_at(static_cast<std::size_t>(px), static_cast<std::size_t>(py))) {
        inside = false;
        break;
      }
    }
    if (inside) return d;
  }
  return std::nullopt;
}

// --- dataset directory ------------------------------------------------------------

namespace {
std::string view_name(const char* prefix, std::size_t i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%04zu.%s", prefix, i, ext);
  return buf;
}
}  // namespace

void save_dataset(const std::string& dir, const MultiViewDataset& data) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::vector<Camera> cams;
  cams.reserve(data.views.size());
  for (const ViewData& v : data.views) cams.push_back(v.camera);
  save_cameras(dir + "/cameras.txt", cams);
  for (std::size_t i = 0; i < data.views.size(); ++i) {
    const ViewData& v = data.views[i];
    write_png(dir + "/" + view_name("view", i, "png"),
              {v.width, v.height, 3, v.rgb});
    write_png(dir + "/" + view_name("mask", i, "png"),
              {v.width, v.height, 1, v.mask});
    if (v.has_depth)
      write_depth(dir + "/" + view_name("depth", i, "bin"), v.width, v.height,
                  v.depth);
  }
}

MultiViewDataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::vector<Camera> cams = load_cameras(dir + "/cameras.txt");
  if (cams.empty()) throw std::runtime_error(dir + "/cameras.txt: no views");
  MultiViewDataset data;
  for (std::size_t i = 0; i < cams.size(); ++i) {
    ViewData v;
    v.camera = cams[i];
    const Image8 img = read_png(dir + "/" + view_name("view", i, "png"));
    if (img.channels != 3)
      throw std::runtime_error(dir + ": view image " + std::to_string(i) +
                               " is not rgb");
    const Image8 msk = read_png(dir + "/" + view_name("mask", i, "png"));
    if (msk.channels != 1)
      throw std::runtime_error(dir + ": mask image " + std::to_string(i) +
                               " is not grayscale");
    if (img.width != cams[i].width || img.height != cams[i].height ||
        msk.width != img.width || msk.height != img.height)
      throw std::runtime_error(dir + ": view " + std::to_string(i) +
                               " image/mask/camera sizes disagree");
    v.width = img.width;
    v.height = img.height;
    v.rgb = img.data;
    v.mask = msk.data;
    const std::string depth_path = dir + "/" + view_name("depth", i, "bin");
    if (fs::exists(depth_path)) {
      std::size_t dw = 0, dh = 0;
      v.depth = read_depth(depth_path, dw, dh);
      if (dw != v.width || dh != v.height)
        throw std::runtime_error(depth_path + ": size disagrees with view image");
      v.has_depth = true;
      for (std::size_t p = 0; p < v.depth.size(); ++p) {
        const bool fg = v.mask[p] >= 128;
        if (fg != std::isfinite(v.depth[p]))
          throw std::runtime_error(depth_path + ": mask/depth coherence violated at pixel " +
                                   std::to_string(p));
      }
    } else {
      v.depth.assign(v.width * v.height, std::numeric_limits<float>::infinity());
      v.has_depth = false;
    }
    data.views.push_back(std::move(v));
  }
  return data;
}

}  // namespace isoray
