#include <doctest.h>

#include <filesystem>
#include <isoray/scene.hpp>

using namespace isoray;

namespace {

Camera axis_camera(double dist, std::size_t res) {
  return make_lookat_camera(Vec3{0, 0, -dist}, Vec3{0, 0, 0},
                            1.2 * static_cast<double>(res), res, res);
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const char* name)
      : path(std::filesystem::temp_directory_path() / name) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("ground truth renderer: sphere depth, mask area, texture") {
  const AnalyticScene scene = make_sphere_scene();
  const std::size_t res = 128;
  Camera cam = axis_camera(2.0, res);
  ViewData view = render_ground_truth(scene, cam);

  SUBCASE("center pixel depth equals 2 - 0.5") {
    const std::size_t cxp = res / 2, cyp = res / 2;
    const float d = view.depth[cyp * res + cxp];
    REQUIRE(std::isfinite(d));
    // center pixel sits half a pixel off the optical axis; allow for it
    CHECK(std::abs(d - 1.5) < 1e-4);
    // unprojecting at the pixel center lands back on the surface
    const Vec3 p = unproject_depth(cam, static_cast<double>(res / 2) + 0.5,
                                   static_cast<double>(res / 2) + 0.5,
                                   static_cast<double>(d));
    CHECK(std::abs(scene.sdf(p)) < 1e-5);
  }

  SUBCASE("mask area matches the analytic silhouette disk within 1%") {
    // a centered sphere projects to a circle of radius fx*tan(asin(r/d))
    const double beta = std::asin(0.5 / 2.0);
    const double radius_px = cam.fx() * std::tan(beta);
    const double expect = 3.14159265358979 * radius_px * radius_px;
    std::size_t area = 0;
    for (std::uint8_t m : view.mask) area += m >= 128;
    CHECK(std::abs(static_cast<double>(area) - expect) < 0.01 * expect);
  }

  SUBCASE("mask true exactly where depth is finite") {
    for (std::size_t i = 0; i < view.depth.size(); ++i)
      CHECK((view.mask[i] >= 128) == std::isfinite(view.depth[i]));
  }

  SUBCASE("colors at hit points equal the texture function") {
    std::size_t checked = 0;
    for (std::size_t py = 0; py < res && checked < 50; py += 7)
      for (std::size_t px = 0; px < res && checked < 50; px += 7) {
        const float d = view.depth[py * res + px];
        if (!std::isfinite(d)) continue;
        const Vec3 p = unproject_depth(cam, px + 0.5, py + 0.5, d);
        const Vec3 want = scene.albedo(p);
        const Vec3 got = view.rgb_at(px, py);
        // 8-bit quantization plus half-pixel ray offset
        CHECK(norm(got - want) < 0.02);
        ++checked;
      }
    CHECK(checked > 20);
  }

  SUBCASE("unprojected depths land on the surface everywhere") {
    double worst = 0.0;
    for (std::size_t py = 0; py < res; py += 3)
      for (std::size_t px = 0; px < res; px += 3) {
        const float d = view.depth[py * res + px];
        if (!std::isfinite(d)) continue;
        const Vec3 p = unproject_depth(cam, px + 0.5, py + 0.5, d);
        worst = std::max(worst, std::abs(scene.sdf(p)));
      }
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("generate_cameras: hemisphere, distances, look-at") {
  CounterRng rng(0);
  const std::vector<Camera> cams = generate_cameras(24, 1.6, 2.4, 64, rng);
  REQUIRE(cams.size() == 24);
  for (const Camera& c : cams) {
    const Vec3 eye = c.center();
    CHECK(eye.z >= 0.0);
    CHECK(norm(eye) >= 1.6 - 1e-9);
    CHECK(norm(eye) <= 2.4 + 1e-9);
    // optical axis passes through the origin: the origin projects onto the
    // principal point
    const Projection pr = project(c, Vec3{0, 0, 0});
    REQUIRE(pr.in_front);
    CHECK(std::abs(pr.ux - c.cx()) < 1e-9);
    CHECK(std::abs(pr.uy - c.cy()) < 1e-9);
  }
  CHECK_THROWS_AS((void)generate_cameras(0, 1, 2, 64, rng), std::invalid_argument);
  CHECK_THROWS_AS((void)generate_cameras(5, -1, 2, 64, rng), std::invalid_argument);
}

TEST_CASE("dataset save/load round trip") {
  const AnalyticScene scene = make_sphere_scene();
  MultiViewDataset data = generate_dataset(scene, 3, 48, 7);
  TempDir dir("isoray_ds_test");
  save_dataset(dir.path.string(), data);
  MultiViewDataset back = load_dataset(dir.path.string());
  REQUIRE(back.views.size() == data.views.size());
  for (std::size_t i = 0; i < data.views.size(); ++i) {
    const ViewData& a = data.views[i];
    const ViewData& b = back.views[i];
    CHECK(a.rgb == b.rgb);    // 8-bit png round trips exactly
    CHECK(a.mask == b.mask);  // bit-identical masks
    REQUIRE(b.has_depth);
    double worst = 0.0;
    for (std::size_t p = 0; p < a.depth.size(); ++p) {
      if (std::isfinite(a.depth[p]) != std::isfinite(b.depth[p])) worst = 1.0;
      else if (std::isfinite(a.depth[p]))
        worst = std::max(
            worst, std::abs(static_cast<double>(a.depth[p]) - b.depth[p]) /
                       std::max(1.0, std::abs(static_cast<double>(a.depth[p]))));
    }
    CHECK(worst < 1e-6);  // f32 storage is the format's precision
  }
}

TEST_CASE("malformed dataset files are rejected with the file named") {
  TempDir dir("isoray_ds_bad");
  const AnalyticScene scene = make_sphere_scene();
  MultiViewDataset data = generate_dataset(scene, 1, 32, 3);
  save_dataset(dir.path.string(), data);
  // truncate the depth file
  std::filesystem::resize_file(dir.path / "depth_0000.bin", 16);
  CHECK_THROWS_WITH_AS(load_dataset(dir.path.string()),
                       doctest::Contains("depth_0000.bin"), std::runtime_error);
}

TEST_CASE("visual hull: frustum, superset property, sphere tightness") {
  const AnalyticScene scene = make_sphere_scene();

  SUBCASE("single view: hull is the mask cone within bounds") {
    MultiViewDataset data;
    data.views.push_back(render_ground_truth(scene, axis_camera(2.0, 64)));
    VisualHull hull = visual_hull(data, 32);
    // center axis points near the object are inside the cone
    auto at = [&](double x, double y, double z) {
      const double cell = 2.0 / 32.0;
      const std::size_t ix = static_cast<std::size_t>((x + 1.0) / cell);
      const std::size_t iy = static_cast<std::size_t>((y + 1.0) / cell);
      const std::size_t iz = static_cast<std::size_t>((z + 1.0) / cell);
      return hull.grid[(iz * 32 + iy) * 32 + ix] != 0;
    };
    CHECK(at(0, 0, 0));
    CHECK(at(0, 0, 0.6));   // behind the sphere, still inside the cone
    CHECK_FALSE(at(0.9, 0.9, 0.0));
  }

  SUBCASE("24 views: hull of a sphere approaches the sphere") {
    MultiViewDataset data = generate_dataset(scene, 24, 96, 1);
    VisualHull hull = visual_hull(data, 64);
    REQUIRE_FALSE(hull.mesh.empty());
    const double cell = 2.0 / 64.0;
    CounterRng rng(5);
    std::vector<Vec3> hull_pts = sample_surface(hull.mesh, 20000, rng);
    std::vector<Vec3> sphere_pts;
    for (int i = 0; i < 20000; ++i) sphere_pts.push_back(scene.sample_surface(rng));
    EvalReport r = chamfer_l1(hull_pts, sphere_pts);
    CHECK(r.chamfer_l1 < 2.0 * cell);

    // superset: every true-surface sample projects inside the hull grid
    // within one cell
    std::size_t outside = 0;
    for (const Vec3& p : sphere_pts) {
      const int ix = static_cast<int>((p.x + 1.0) / cell);
      const int iy = static_cast<int>((p.y + 1.0) / cell);
      const int iz = static_cast<int>((p.z + 1.0) / cell);
      bool near_occupied = false;
      for (int dz = -1; dz <= 1 && !near_occupied; ++dz)
        for (int dy = -1; dy <= 1 && !near_occupied; ++dy)
          for (int dx = -1; dx <= 1 && !near_occupied; ++dx) {
            const int x = ix + dx, y = iy + dy, z = iz + dz;
            if (x < 0 || y < 0 || z < 0 || x >= 64 || y >= 64 || z >= 64) continue;
            near_occupied = hull.grid[(static_cast<std::size_t>(z) * 64 +
                                       static_cast<std::size_t>(y)) *
                                          64 +
                                      static_cast<std::size_t>(x)] != 0;
          }
      if (!near_occupied) ++outside;
    }
    CHECK(outside == 0);
  }
}

TEST_CASE("hull entry depth: first in-all-masks point along a ray") {
  const AnalyticScene scene = make_sphere_scene();
  MultiViewDataset data = generate_dataset(scene, 12, 64, 2);
  // principal ray of view 0 passes through the object
  const Camera& cam = data.views[0].camera;
  Ray r = pixel_to_ray(cam, cam.cx(), cam.cy(), 0.5, 3.5);
  auto d = hull_entry_depth(data, r, 0.01);
  REQUIRE(d.has_value());
  // entry into the hull of a sphere from outside is near the sphere surface
  CHECK(norm(r.origin + *d * r.dir) == doctest::Approx(0.5).epsilon(0.1));
  // a ray pointing away from the object never enters
  Ray away{r.origin, normalized(r.origin), 0.5, 3.5};
  CHECK_FALSE(hull_entry_depth(data, away, 0.01).has_value());
}

TEST_CASE("sdf primitives: sign, distance bound, sampler consistency") {
  SUBCASE("sphere and box") {
    CHECK(sdf::sphere({0, 0, 0}, 0.5) == doctest::Approx(-0.5));
    CHECK(sdf::sphere({1, 0, 0}, 0.5) == doctest::Approx(0.5));
    CHECK(sdf::box({0, 0, 0}, {0.5, 0.5, 0.5}) < 0.0);
    CHECK(sdf::box({1, 0, 0}, {0.5, 0.5, 0.5}) == doctest::Approx(0.5));
  }
  SUBCASE("csg combinations keep the sign convention") {
    const Vec3 p{0.55, 0, 0};
    const double u = sdf::op_union(sdf::sphere(p, 0.5), sdf::box(p, {0.6, 0.1, 0.1}));
    CHECK(u < 0.0);
    // shell = outer minus inner: inside between the radii, outside in the cut
    CHECK(sdf::op_subtract(sdf::sphere(p, 0.6), sdf::sphere(p, 0.5)) < 0.0);
    const Vec3 q{0.3, 0, 0};
    CHECK(sdf::op_subtract(sdf::sphere(q, 0.6), sdf::sphere(q, 0.5)) > 0.0);
  }
  SUBCASE("scene samplers land on their zero level") {
    for (const std::string& name : scene_names()) {
      const AnalyticScene scene = scene_by_name(name);
      REQUIRE(scene.sample_surface);
      CounterRng rng(9);
      for (int i = 0; i < 200; ++i) {
        const Vec3 p = scene.sample_surface(rng);
        CHECK(std::abs(scene.sdf(p)) < 1e-9);
        CHECK(norm(p) < 1.0);  // contained in the unit region of interest
      }
    }
  }
  CHECK_THROWS_AS((void)scene_by_name("teapot"), std::invalid_argument);
}
