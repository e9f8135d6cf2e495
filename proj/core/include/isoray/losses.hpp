#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "isoray/raycast.hpp"
#include "isoray/rng.hpp"

namespace isoray {

struct PixelSample {
  int view = 0;
  double ux = 0, uy = 0;
  Vec3 gt_rgb{};
  bool in_mask = false;
  std::optional<double> gt_depth;  // Euclidean ray distance; foreground only
};

// The three pixel sets driving loss selection:
//   p0: in-mask with a predicted hit   -> rgb / depth / normal losses
//   p1: out-of-mask                    -> freespace loss
//   p2: in-mask without a hit          -> occupancy loss
struct PixelPartition {
  std::vector<std::size_t> p0, p1, p2;  // indices into the sample batch
};

PixelPartition classify(const std::vector<PixelSample>& samples,
                        const std::vector<SurfaceHit>& hits);

struct LossWeights {
  double rgb = 1.0;
  double depth = 1.0;
  double freespace = 1.0;
  double occupancy = 1.0;
  double normal = 0.05;
  void validate() const;  // non-negative, at least one positive
};

enum class OccupancyTarget {
  RandomDepth,  // uniform in [s0, far]
  HullDepth,    // visual-hull entry depth (falls back to random off-hull)
  GtDepth,      // ground-truth depth (requires depth supervision)
};

enum class FeatureMode {
  Rgb,          // identity features
  RgbGradient,  // rgb plus 2-point finite-difference image gradients
};

// Neighbor-pixel access needed only for FeatureMode::RgbGradient.
struct RgbFeatureContext {
  std::function<Vec3(const PixelSample&, double dx, double dy)> gt_rgb_at;
  std::function<Ray(const PixelSample&, double dx, double dy)> make_ray;
  const RaySamplingConfig* ray_cfg = nullptr;
};

struct LossConfig {
  LossWeights weights;
  OccupancyTarget occ_target = OccupancyTarget::RandomDepth;
  FeatureMode features = FeatureMode::Rgb;
  double normal_radius = 0.01;  // eps_n: neighbor ball for the normal term
  // When false the rgb loss treats the surface points as constants,
  // keeping only the direct texture gradient of the two chain-rule terms.
  bool rgb_through_depth = true;
  // Report and combine terms as per-batch means (sums otherwise); the two
  // differ only by a per-term reweighting absorbed into the loss weights.
  bool use_means = true;
  std::function<std::optional<double>(const Ray&)> hull_entry;
};

// Binary cross entropy with the probability clamped to [1e-7, 1-1e-7], so
// every evaluation is finite.
double bce(double p, double target);

inline constexpr const char* kBceOpName = "bce";
inline constexpr const char* kFieldProbeOpName = "field_probe";

void register_loss_ops(Tape& tape);

// Elementwise BCE of recorded probabilities (M,1) against fixed targets.
Tensor record_bce(Tape& tape, const Tensor& probs, const std::vector<double>& targets);

struct LossBreakdown {
  double total = 0;
  double rgb = 0, depth = 0, freespace = 0, occupancy = 0, normal = 0;
  std::size_t n_p0 = 0, n_p1 = 0, n_p2 = 0;
  std::size_t n_depth = 0;             // p0 samples with ground-truth depth
  std::size_t normal_degenerate = 0;   // skipped zero-gradient points
};

struct TotalLoss {
  Tensor value;  // scalar; on the tape whenever any term touched it
  LossBreakdown parts;
  std::shared_ptr<DepthBackwardStats> depth_stats;
};

// Builds the weighted objective on `tape`: rgb and depth flow through the
// surface-depth operator (both terms of the color chain rule), while
// freespace, occupancy and normal probes treat their sample points as
// constants. Terms over empty sets contribute zero.
TotalLoss total_loss(Tape& tape, const TapeField& tf, const MlpField& field,
                     const std::vector<PixelSample>& samples,
                     const std::vector<Ray>& rays,
                     const std::vector<SurfaceHit>& hits,
                     const PixelPartition& part, const LossConfig& cfg,
                     CounterRng& rng,
                     const RgbFeatureContext* fctx = nullptr);

}  // namespace isoray
