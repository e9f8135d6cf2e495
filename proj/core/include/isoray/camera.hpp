#pragma once

#include <string>
#include <vector>

#include "isoray/geometry.hpp"

namespace isoray {

// Pinhole camera. R maps world to camera coordinates (camera looks along
// +z, x right, y down in image space), t is the world-to-camera
// translation, so the camera center is -R^T t.
struct Camera {
  Mat3 K;
  Mat3 R;
  Vec3 t;
  std::size_t width = 0, height = 0;

  double fx() const { return K(0, 0); }
  double fy() const { return K(1, 1); }
  double cx() const { return K(0, 2); }
  double cy() const { return K(1, 2); }
  Vec3 center() const { return -(R.transposed() * t); }
};

// Validates: R orthonormal with det +1 (to 1e-9), fx,fy > 0, principal
// point inside the image.
Camera make_camera(const Mat3& K, const Mat3& R, const Vec3& t,
                   std::size_t width, std::size_t height);

Camera make_lookat_camera(const Vec3& eye, const Vec3& target, double focal,
                          std::size_t width, std::size_t height);

// A pixel ray r(d) = origin + d * dir with unit-norm dir, so d is the
// Euclidean distance from the camera center. Depth maps everywhere in this
// project store the same Euclidean ray distance.
struct Ray {
  Vec3 origin;
  Vec3 dir;        // unit norm
  double s0 = 0;   // near depth
  double far = 0;  // s0 + n * step
};

// Continuous pixel coordinates; integer pixel (i,j) samples at its center
// (i+0.5, j+0.5). u outside the image rectangle is rejected.
Ray pixel_to_ray(const Camera& cam, double ux, double uy, double s0 = 1e-3,
                 double far = 1e3);

// Point at Euclidean distance d from the camera center along the pixel ray.
Vec3 unproject_depth(const Camera& cam, double ux, double uy, double d);

struct Projection {
  double ux = 0, uy = 0;
  double depth_z = 0;    // camera-frame z
  bool in_front = false;  // false: point behind the camera
};

Projection project(const Camera& cam, const Vec3& p);

// --- camera text file -------------------------------------------------------
//
// One record per view:
//   view <id> <width> <height>
//   K <9 floats, row-major>
//   R <9 floats, row-major>
//   t <3 floats>

void save_cameras(const std::string& path, const std::vector<Camera>& cams);
std::vector<Camera> load_cameras(const std::string& path);

}  // namespace isoray
