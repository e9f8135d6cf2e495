#pragma once

// Test-only oracles, independent of the library's gradient paths: central
// finite differences and a bisection root finder.

#include <cmath>
#include <functional>
#include <vector>

namespace isoray::testing {

// d f / d x_i by central differences at step h
inline double central_fd(const std::function<double()>& f, double& xi, double h) {
  const double x0 = xi;
  xi = x0 + h;
  const double fp = f();
  xi = x0 - h;
  const double fm = f();
  xi = x0;
  return (fp - fm) / (2.0 * h);
}

inline double rel_err(double a, double b, double floor = 1e-10) {
  const double scale = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / scale;
}

// bracketed bisection to high precision; the reference for secant accuracy
inline double bisect_root(const std::function<double(double)>& g, double lo,
                          double hi, double tol = 1e-12) {
  double glo = g(lo);
  for (int i = 0; i < 200 && hi - lo > tol; ++i) {
    const double mid = 0.5 * (lo + hi);
    const double gm = g(mid);
    if ((glo < 0.0) == (gm < 0.0)) {
      lo = mid;
      glo = gm;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

}  // namespace isoray::testing
