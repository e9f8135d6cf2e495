#include "isoray/camera.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace isoray {

namespace {
constexpr double kOrthoTol = 1e-9;
}

Camera make_camera(const Mat3& K, const Mat3& R, const Vec3& t,
                   std::size_t width, std::size_t height) {
  if (width == 0 || height == 0)
    throw std::invalid_argument("make_camera: zero image size");
  const double fx = K(0, 0), fy = K(1, 1), cx = K(0, 2), cy = K(1, 2);
  if (!(fx > 0.0 && fy > 0.0))
    throw std::invalid_argument("make_camera: focal lengths must be positive");
  if (!(cx >= 0.0 && cx < static_cast<double>(width) && cy >= 0.0 &&
        cy < static_cast<double>(height)))
    throw std::invalid_argument("make_camera: principal point outside image");
  // R^T R = I and det = +1, both to 1e-9
  const Mat3 gram = R.transposed() * R;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      const double want = i == j ? 1.0 : 0.0;
      if (std::abs(gram(i, j) - want) > kOrthoTol)
        throw std::invalid_argument("make_camera: R is not orthonormal");
    }
  if (std::abs(R.det() - 1.0) > kOrthoTol)
    throw std::invalid_argument("make_camera: det(R) must be +1");
  Camera c;
  c.K = K;
  c.R = R;
  c.t = t;
  c.width = width;
  c.height = height;
  return c;
}

Camera make_lookat_camera(const Vec3& eye, const Vec3& target, double focal,
                          std::size_t width, std::size_t height) {
  Vec3 fwd = normalized(target - eye);
  Vec3 up{0, 0, 1};
  if (std::abs(dot(fwd, up)) > 0.999) up = Vec3{0, 1, 0};
  const Vec3 xc = normalized(cross(up, fwd));
  const Vec3 yc = cross(fwd, xc);  // unit by construction
  Mat3 R;
  for (int j = 0; j < 3; ++j) {
    R(0, j) = xc[j];
    R(1, j) = yc[j];
    R(2, j) = fwd[j];
  }
  Mat3 K = Mat3::identity();
  K(0, 0) = K(1, 1) = focal;
  K(0, 2) = static_cast<double>(width) / 2.0;
  K(1, 2) = static_cast<double>(height) / 2.0;
  return make_camera(K, R, -(R * eye), width, height);
}

namespace {
Vec3 pixel_direction(const Camera& cam, double ux, double uy) {
  if (!(ux >= 0.0 && ux <= static_cast<double>(cam.width) && uy >= 0.0 &&
        uy <= static_cast<double>(cam.height)))
    throw std::invalid_argument("pixel (" + std::to_string(ux) + "," +
                                std::to_string(uy) + ") outside image");
  return normalized(cam.R.transposed() * (cam.K.inverse() * Vec3{ux, uy, 1.0}));
}
}  // namespace

Ray pixel_to_ray(const Camera& cam, double ux, double uy, double s0, double far) {
  if (!(s0 > 0.0 && s0 < far))
    throw std::invalid_argument("pixel_to_ray: need 0 < s0 < far");
  Ray r;
  r.origin = cam.center();
  r.dir = pixel_direction(cam, ux, uy);
  r.s0 = s0;
  r.far = far;
  return r;
}

Vec3 unproject_depth(const Camera& cam, double ux, double uy, double d) {
  if (!(d > 0.0))
    throw std::invalid_argument("unproject_depth: depth must be positive");
  return cam.center() + d * pixel_direction(cam, ux, uy);
}

Projection project(const Camera& cam, const Vec3& p) {
  const Vec3 pc = cam.R * p + cam.t;
  Projection out;
  out.depth_z = pc.z;
  if (!(pc.z > 0.0)) {
    out.in_front = false;  // behind camera
    return out;
  }
  out.in_front = true;
  out.ux = cam.fx() * pc.x / pc.z + cam.cx();
  out.uy = cam.fy() * pc.y / pc.z + cam.cy();
  return out;
}

void save_cameras(const std::string& path, const std::vector<Camera>& cams) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("save_cameras: cannot open " + path);
  os << std::setprecision(17);
  for (std::size_t i = 0; i < cams.size(); ++i) {
    const Camera& c = cams[i];
    os << "view " << i << " " << c.width << " " << c.height << "\n";
    os << "K";
    for (double v : c.K.m) os << " " << v;
    os << "\nR";
    for (double v : c.R.m) os << " " << v;
    os << "\nt " << c.t.x << " " << c.t.y << " " << c.t.z << "\n";
  }
  if (!os) throw std::runtime_error("save_cameras: write failed for " + path);
}

std::vector<Camera> load_cameras(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("load_cameras: cannot open " + path);
  std::vector<Camera> cams;
  std::string tok;
  while (is >> tok) {
    if (tok != "view")
      throw std::runtime_error(path + ": expected 'view', got '" + tok + "'");
    std::size_t id = 0, w = 0, h = 0;
    if (!(is >> id >> w >> h))
      throw std::runtime_error(path + ": malformed view header");
    if (id != cams.size())
      throw std::runtime_error(path + ": view ids must be consecutive from 0");
    Mat3 K, R;
    Vec3 t;
    if (!(is >> tok) || tok != "K")
      throw std::runtime_error(path + ": expected 'K' record");
    for (double& v : K.m)
      if (!(is >> v)) throw std::runtime_error(path + ": malformed K");
    if (!(is >> tok) || tok != "R")
      throw std::runtime_error(path + ": expected 'R' record");
    for (double& v : R.m)
      if (!(is >> v)) throw std::runtime_error(path + ": malformed R");
    if (!(is >> tok) || tok != "t")
      throw std::runtime_error(path + ": expected 't' record");
    if (!(is >> t.x >> t.y >> t.z))
      throw std::runtime_error(path + ": malformed t");
    cams.push_back(make_camera(K, R, t, w, h));
  }
  return cams;
}

}  // namespace isoray
