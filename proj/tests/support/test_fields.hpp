#pragma once

// Shared field fixtures for the tests.
//
// make_l1_ball_field builds exact network weights whose occupancy is
// sigmoid(k*(c - |x|-|y|-|z|)): the tau=0.5 level set is the L1 ball of
// radius c, so depths, masks and crossing locations have closed forms.
//
// fit_sphere_logit_field runs a small 3d-supervised regression of the
// occupancy logit towards k*(0.5-|p|), giving a field whose level set is a
// genuine fitted sphere with radial gradients.

#include <cmath>
#include <filesystem>
#include <isoray/field.hpp>
#include <isoray/rng.hpp>
#include <isoray/trainer.hpp>

#include "oracles.hpp"

namespace isoray::testing {

inline FieldParams make_l1_ball_field(double c = 0.5, double k = 12.0,
                                      std::size_t blocks = 5) {
  const std::size_t width = 8;
  FieldParams p = init_field(width, blocks, 0, 0);
  for (Tensor& a : p.arrays) std::fill(a.values.begin(), a.values.end(), 0.0);
  // h = (x,-x, y,-y, z,-z, 0,0); residual blocks stay zero (identity)
  Tensor& w_in = p.arrays[0];
  for (int axis = 0; axis < 3; ++axis) {
    w_in.values[static_cast<std::size_t>(axis) * width +
                static_cast<std::size_t>(2 * axis)] = 1.0;
    w_in.values[static_cast<std::size_t>(axis) * width +
                static_cast<std::size_t>(2 * axis + 1)] = -1.0;
  }
  // occupancy logit = k*c - k*sum(relu(h)) = k*(c - |x|-|y|-|z|)
  Tensor& w_out = p.arrays[2 + 4 * blocks];
  for (std::size_t r = 0; r < 6; ++r) w_out.values[r * 4 + 0] = -k;
  Tensor& b_out = p.arrays[2 + 4 * blocks + 1];
  b_out.values[0] = k * c;
  // a gentle color pattern so texture lookups are non-trivial
  w_out.values[0 * 4 + 1] = 0.8;
  w_out.values[2 * 4 + 2] = 0.8;
  w_out.values[4 * 4 + 3] = 0.8;
  return p;
}

// first t > 0 with |o+t*d|_1 == c (entry into the L1 ball), if any
inline std::optional<double> l1_ball_entry(const Vec3& o, const Vec3& d, double c,
                                           double tmax) {
  auto h = [&](double t) {
    const Vec3 p = o + t * d;
    return std::abs(p.x) + std::abs(p.y) + std::abs(p.z);
  };
  // h is convex piecewise linear; locate its minimum by ternary search
  double lo = 0.0, hi = tmax;
  for (int i = 0; i < 200; ++i) {
    const double m1 = lo + (hi - lo) / 3.0;
    const double m2 = hi - (hi - lo) / 3.0;
    if (h(m1) < h(m2)) hi = m2;
    else lo = m1;
  }
  const double tmin = 0.5 * (lo + hi);
  if (h(tmin) > c || h(0.0) <= c) return std::nullopt;
  return bisect_root([&](double t) { return c - h(t); }, 0.0, tmin, 1e-13);
}

inline FieldParams fit_sphere_logit_field(std::size_t width = 48,
                                          std::size_t blocks = 3,
                                          std::uint64_t seed = 11,
                                          std::size_t iters = 8000) {
  // the fit is deterministic, so a cached copy is byte-equivalent to a rerun
  namespace fs = std::filesystem;
  const fs::path cache = fs::temp_directory_path() /
                         ("isoray_test_sphere_w" + std::to_string(width) + "b" +
                          std::to_string(blocks) + "s" + std::to_string(seed) +
                          "i" + std::to_string(iters) + ".irf");
  if (fs::exists(cache)) {
    try {
      return load_field(cache.string()).params;
    } catch (const std::exception&) {
      fs::remove(cache);
    }
  }
  FieldParams params = init_field(width, blocks, 0, seed);
  AdamState adam = make_adam_state(params, 0);
  const AdamHyper hp{0.9, 0.999, 1e-8};
  const double k = 6.0;
  const std::size_t batch = 256;

  for (std::size_t it = 0; it < iters; ++it) {
    CounterRng rng(seed, 0x736669ull, it);
    Tensor pts = Tensor::zeros({batch, 3});
    std::vector<double> target(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      Vec3 p;
      if (i % 2 == 0) {
        p = Vec3{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
      } else {
        // concentrate half the batch near the surface shell
        Vec3 dir{rng.normal(), rng.normal(), rng.normal()};
        while (norm(dir) < 1e-9) dir = Vec3{rng.normal(), rng.normal(), rng.normal()};
        p = normalized(dir) * rng.uniform(0.3, 0.7);
      }
      pts.values[3 * i + 0] = p.x;
      pts.values[3 * i + 1] = p.y;
      pts.values[3 * i + 2] = p.z;
      target[i] = k * (0.5 - norm(p));
    }
    Tape tape;
    TapeField tf = attach_field(tape, params, {}, false);
    FieldOutput out = tf.forward(pts);
    Tensor diff = sub(slice_cols(out.logits, 0, 1), Tensor({batch, 1}, target));
    Tensor loss = scale(sum(mul(diff, diff)), 1.0 / static_cast<double>(batch));
    GradientMap g = tape.backward(loss, 1.0);
    std::vector<std::vector<double>> grads;
    grads.reserve(tf.leaves.size());
    for (const Tensor& leaf : tf.leaves) grads.push_back(grad_of(g, leaf).values);
    const double lr = it < iters * 3 / 4 ? 1e-3 : 2e-4;
    adam_step(params, nullptr, grads, nullptr, adam, lr, hp);
  }
  save_field(cache.string(), params, {});
  return params;
}

}  // namespace isoray::testing
