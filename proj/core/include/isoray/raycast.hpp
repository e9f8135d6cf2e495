#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "isoray/camera.hpp"
#include "isoray/field.hpp"

namespace isoray {

// Sampling/refinement settings for the surface-depth operator. The sample
// interval is [s0, s0 + n*step]; sample j (1-based) sits at depth s0 + j*step.
struct RaySamplingConfig {
  std::size_t n = 128;
  double s0 = 0.5;
  double step = 3.0 / 128.0;
  std::size_t secant_iters = 8;
  double tau = 0.5;
  double secant_tol = 1e-5;

  // cap on points per field evaluation batch (bounds transient memory)
  std::size_t eval_chunk = 1u << 16;

  // optional origin-centered bounding sphere of the region of interest:
  // rays that never enter it report no hit without field evaluations.
  double roi_radius = 0.0;  // <= 0 disables
  // additionally restrict sample evaluations to the ray's ROI chord
  // (samples outside are treated as free space; see DepthForwardStats)
  bool clip_samples_to_roi = false;

  double far() const { return s0 + static_cast<double>(n) * step; }
  void validate() const;
};

// Result of the forward pass theta -> d for one ray.
struct SurfaceHit {
  bool hit = false;
  double d = 0.0;     // surface depth, valid iff hit
  Vec3 p{};           // origin + d*dir
  Vec3 w{};           // ray direction (cached for the backward pass)
  int j = -1;         // 1-based crossing interval [s0+j*step, s0+(j+1)*step]
  double denom = 0.0; // grad f(p) . w, cached for the backward pass
};

struct DepthForwardStats {
  std::size_t rays = 0;
  std::size_t hits = 0;
  std::size_t started_occupied = 0;  // f >= tau at the first evaluated sample
  std::size_t skipped_roi = 0;       // rays that never enter the ROI sphere
  std::size_t field_evals = 0;       // occupancy evaluations spent
};

// Sample points p_j = r(s0 + j*step), j = 1..n (s0 itself is not sampled).
Tensor sample_ray(const Ray& ray, const RaySamplingConfig& cfg);

// Smallest 1-based j with occ[j] < tau <= occ[j+1] (indices into `occ` are
// j-1 and j). Occupied->free transitions are ignored; absence is a valid
// result.
std::optional<int> find_crossing(const std::vector<double>& occ, double tau);

// Root refinement of f(d) = level on a bracket [lo,hi] with f(lo) < level
// <= f(hi): secant steps with a bisection fallback whenever an iterate
// leaves the bracket. Returns the best estimate seen, always inside [lo,hi].
double secant_root(const std::function<double(double)>& f, double lo, double hi,
                   double level, std::size_t max_iters, double tol);

// Spec-shaped wrapper: refine inside crossing interval j of the ray.
double secant_refine(const Ray& ray, int j, const RaySamplingConfig& cfg,
                     const std::function<double(const Vec3&)>& occ_at);

// Batched forward pass: per-ray first free->occupied crossing + secant
// refinement. Evaluates the field without recording on any tape and caches
// denom = grad f(p).w per hit.
std::vector<SurfaceHit> depth_forward(const std::vector<Ray>& rays,
                                      const OccupancyField& field,
                                      const RaySamplingConfig& cfg,
                                      DepthForwardStats* stats = nullptr);

// --- custom backward (implicit differentiation) -----------------------------

inline constexpr const char* kDepthOpName = "surface_depth";
inline constexpr double kDenomEps = 1e-6;  // |denom| below this: ray excluded

struct DepthBackwardStats {
  std::size_t rays = 0;
  std::size_t excluded = 0;  // grazing/singular intersections dropped
};

void register_depth_backward(Tape& tape);

// Records the hits' depths as one (H,1) custom node whose inputs are the
// field's parameter leaves. On backward, the incoming gradient lambda is
// mapped to mu = -lambda/denom per ray and pushed through one recorded
// occupancy pass over the surface points, so retained memory scales with
// the batch and network depth but not with the sampling accuracy n.
// All hits must have hit == true.
Tensor record_surface_depths(Tape& tape, const std::vector<SurfaceHit>& hits,
                             const OccupancyField& field,
                             const std::vector<Tensor>& param_leaves,
                             std::shared_ptr<DepthBackwardStats> stats = nullptr);

// --- rendering ---------------------------------------------------------------

struct RenderOutput {
  std::size_t width = 0, height = 0;
  std::vector<double> rgb;           // h*w*3, background color where no hit
  std::vector<double> depth;         // h*w Euclidean ray distance, +inf if miss
  std::vector<std::uint8_t> mask;    // h*w, 1 where hit
};

// Per-pixel: color = t(p), depth = d where the depth operator hits;
// background color and infinite depth elsewhere. `resolution` 0 keeps the
// camera's native size, otherwise intrinsics are rescaled.
RenderOutput render(const Camera& cam, const MlpField& field,
                    const RaySamplingConfig& cfg, const Vec3& background,
                    std::size_t resolution = 0);

// --- finite-difference diagnostic -------------------------------------------

// Builds a random small network (width 16, 5 blocks) and 5 rays with hits,
// then compares the gradient of L = sum d over all parameters against
// central finite differences (h = 1e-4).
struct DepthGradCheck {
  double max_rel_err = 0.0;
  double frac_below_1e3 = 0.0;  // fraction of coordinates with rel err < 1e-3
  std::size_t coords = 0;
};
DepthGradCheck depth_gradient_check(std::uint64_t seed);

}  // namespace isoray
